"""Low-resolution LiDAR simulation by beam/azimuth decimation of a dense sweep.

The dense sensor is a 64-beam spinning LiDAR covering +2 to -24.8 degrees of
elevation at 0.08 degree azimuth steps. The cheap sensor keeps every eighth
beam and every eighth azimuth column, then jitters each coordinate with
bounded uniform noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import CameraCalibration, GeometryError, PointCloud, cart_to_spherical, frustum_crop

_EPS = 1e-9


class OutOfFovError(GeometryError):
    pass


@dataclass(frozen=True)
class LidarSpec:
    n_beams: int = 64
    elev_min: float = -24.8
    elev_max: float = 2.0
    azim_step: float = 0.08

    def __post_init__(self):
        if not self.elev_max > self.elev_min:
            raise ValueError("elev_max must exceed elev_min")
        if self.n_beams < 1 or self.azim_step <= 0:
            raise ValueError("n_beams must be >= 1 and azim_step > 0")

    @property
    def beam_width(self) -> float:
        return (self.elev_max - self.elev_min) / self.n_beams

    @property
    def n_azim(self) -> int:
        # the last column may be partial when 360 is not a multiple of the step
        return int(math.ceil(360.0 / self.azim_step - _EPS))

    def beam_elevations(self) -> np.ndarray:
        """Elevation (degrees) at the centre of every beam, lowest first."""
        return self.elev_min + (np.arange(self.n_beams) + 0.5) * self.beam_width

    def azimuth_centers(self) -> np.ndarray:
        return (np.arange(self.n_azim) + 0.5) * self.azim_step


@dataclass(frozen=True)
class DownsampleSpec:
    beam_stride: int = 8
    azim_stride: int = 8
    noise_amplitude: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.beam_stride < 1 or self.azim_stride < 1:
            raise ValueError("strides must be >= 1")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")


def assign_bins_array(points: np.ndarray, spec: LidarSpec):
    """Vectorised bin assignment.

    Returns ``(beam, azim, rng, valid)``; ``valid`` is False for the origin and
    for elevations more than half a beam outside the field of view.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rng = np.sqrt(x * x + y * y + z * z)
    az = np.degrees(np.arctan2(y, x)) % 360.0
    with np.errstate(invalid="ignore", divide="ignore"):
        el = np.degrees(np.arcsin(np.clip(z / rng, -1.0, 1.0)))
    bw = spec.beam_width
    valid = (
        (rng > 0.0)
        & (el >= spec.elev_min - 0.5 * bw)
        & (el <= spec.elev_max + 0.5 * bw)
    )
    el = np.where(valid, el, spec.elev_min)
    beam = np.clip(np.floor((el - spec.elev_min) / bw), 0, spec.n_beams - 1).astype(np.int64)
    azim = np.floor(az / spec.azim_step).astype(np.int64)
    azim = np.minimum(azim, spec.n_azim - 1)
    return beam, azim, rng, valid


def assign_bins(p, spec: LidarSpec = LidarSpec()):
    """``(beam_index, azim_index)`` of a single point."""
    s = cart_to_spherical(p)
    bw = spec.beam_width
    if s.elevation < spec.elev_min - 0.5 * bw or s.elevation > spec.elev_max + 0.5 * bw:
        raise OutOfFovError(
            f"elevation {s.elevation:.3f} deg outside [{spec.elev_min}, {spec.elev_max}] +- half beam"
        )
    beam, azim, _, _ = assign_bins_array(np.asarray(p, dtype=np.float64).reshape(1, 3), spec)
    return int(beam[0]), int(azim[0])


def add_noise(cloud: PointCloud, amplitude: float, seed: int) -> PointCloud:
    """Independent uniform jitter in [-amplitude, +amplitude] on every coordinate."""
    if amplitude < 0:
        raise ValueError("noise amplitude must be >= 0")
    if amplitude == 0 or len(cloud) == 0:
        return cloud
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-amplitude, amplitude, size=cloud.points.shape)
    return PointCloud(cloud.points + jitter, cloud.intensity)


def decimation_indices(cloud: PointCloud, lidar: LidarSpec, ds: DownsampleSpec) -> np.ndarray:
    """Indices of the points a decimated sensor would return, in input order."""
    if len(cloud) == 0:
        return np.empty(0, dtype=np.int64)
    beam, azim, rng, valid = assign_bins_array(cloud.points, lidar)
    kept = valid & (beam % ds.beam_stride == 0) & (azim % ds.azim_stride == 0)
    cand = np.nonzero(kept)[0]
    keys = beam[cand] * lidar.n_azim + azim[cand]
    winners = kernels.select_nearest_per_bin(keys.astype(np.int64), rng[cand])
    return cand[winners]


def downsample_frame(
    cloud: PointCloud, lidar: LidarSpec = LidarSpec(), ds: DownsampleSpec = DownsampleSpec()
) -> PointCloud:
    """Keep every ``beam_stride``-th beam and ``azim_stride``-th column, then add noise."""
    sparse = cloud.subset(decimation_indices(cloud, lidar, ds))
    return add_noise(sparse, ds.noise_amplitude, ds.seed)


def max_output_size(lidar: LidarSpec, ds: DownsampleSpec) -> int:
    return math.ceil(lidar.n_beams / ds.beam_stride) * math.ceil(lidar.n_azim / ds.azim_stride)


def simulate_low_res(
    dense: PointCloud,
    calib: CameraCalibration,
    img_w: int,
    img_h: int,
    lidar: LidarSpec = LidarSpec(),
    ds: DownsampleSpec = DownsampleSpec(),
) -> PointCloud:
    """Frustum crop, then decimation, then noise."""
    return downsample_frame(frustum_crop(dense, calib, img_w, img_h), lidar, ds)
