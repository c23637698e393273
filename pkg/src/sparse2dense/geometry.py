"""Point-cloud value types, spherical coordinates and KITTI-style projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np


class GeometryError(ValueError):
    """Raised on degenerate geometric input (zero vectors, points behind the camera)."""


@dataclass(frozen=True)
class PointCloud:
    """Ordered (N, 3) float64 points in metres with optional intensity in [0, 1]."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise GeometryError(
                    f"intensity length {inten.shape[0]} != point count {pts.shape[0]}"
                )
            inten.setflags(write=False)
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        inten = None if self.intensity is None else self.intensity[idx]
        return PointCloud(self.points[idx], inten)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


CloudLike = Union[PointCloud, np.ndarray]


def as_points(cloud: CloudLike) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


class SphericalCoord(NamedTuple):
    range: float
    azimuth: float
    elevation: float


def cart_to_spherical(p) -> SphericalCoord:
    """Range, azimuth in [0, 360) and elevation, angles in degrees."""
    x, y, z = (float(v) for v in p)
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise GeometryError("direction of the zero vector is undefined")
    az = math.degrees(math.atan2(y, x)) % 360.0
    if az >= 360.0:
        az = 0.0
    el = math.degrees(math.asin(max(-1.0, min(1.0, z / r))))
    return SphericalCoord(r, az, el)


def cart_to_spherical_array(points: np.ndarray):
    """Vectorised :func:`cart_to_spherical`; zero vectors get range 0 and angles 0."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2 + pts[:, 2] ** 2)
    az = np.degrees(np.arctan2(pts[:, 1], pts[:, 0])) % 360.0
    az[az >= 360.0] = 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        el = np.degrees(np.arcsin(np.clip(pts[:, 2] / r, -1.0, 1.0)))
    el[r == 0.0] = 0.0
    return r, az, el


def spherical_to_cart(s: SphericalCoord) -> np.ndarray:
    az = math.radians(s.azimuth)
    el = math.radians(s.elevation)
    c = math.cos(el)
    return np.array([s.range * c * math.cos(az), s.range * c * math.sin(az), s.range * math.sin(el)])


def _identity34() -> np.ndarray:
    return np.hstack([np.eye(3), np.zeros((3, 1))])


@dataclass(frozen=True)
class CameraCalibration:
    """KITTI calibration: ``x_img ~ P2 @ R0_rect @ Tr_velo_to_cam @ [x_velo; 1]``."""

    P2: np.ndarray = field(default_factory=_identity34)
    R0_rect: np.ndarray = field(default_factory=lambda: np.eye(3))
    Tr_velo_to_cam: np.ndarray = field(default_factory=_identity34)

    def __post_init__(self):
        for name, shape in (("P2", (3, 4)), ("R0_rect", (3, 3)), ("Tr_velo_to_cam", (3, 4))):
            m = np.array(getattr(self, name), dtype=np.float64).reshape(shape)
            if not np.all(np.isfinite(m)):
                raise GeometryError(f"{name} has non-finite entries")
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @classmethod
    def identity(cls) -> "CameraCalibration":
        return cls()

    def is_orthonormal(self, tol: float = 1e-3) -> bool:
        r0 = self.R0_rect
        rt = self.Tr_velo_to_cam[:, :3]
        eye = np.eye(3)
        return bool(
            np.abs(r0 @ r0.T - eye).max() < tol and np.abs(rt @ rt.T - eye).max() < tol
        )

    def velo_to_rect(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cam = pts @ self.Tr_velo_to_cam[:, :3].T + self.Tr_velo_to_cam[:, 3]
        return cam @ self.R0_rect.T

    def rect_to_velo(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cam = np.linalg.solve(self.R0_rect, pts.T).T
        rot = self.Tr_velo_to_cam[:, :3]
        return np.linalg.solve(rot, (cam - self.Tr_velo_to_cam[:, 3]).T).T

    def project_rect(self, rect: np.ndarray):
        """Pixel coordinates ``(u, v)`` and homogeneous scale ``w`` of rectified points."""
        h = rect @ self.P2[:, :3].T + self.P2[:, 3]
        w = h[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            return h[:, 0] / w, h[:, 1] / w, w


def project_points(points: np.ndarray, calib: CameraCalibration):
    """Vectorised projection: ``(u, v, depth, w)`` for every LiDAR point."""
    rect = calib.velo_to_rect(points)
    u, v, w = calib.project_rect(rect)
    return u, v, rect[:, 2], w


def project_to_image(p, calib: CameraCalibration):
    """Project one LiDAR-frame point to ``(u, v, depth)``; depth is rectified-camera z."""
    u, v, depth, w = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), calib)
    if depth[0] <= 0.0 or w[0] <= 0.0:
        raise GeometryError(f"point {tuple(np.ravel(p))} is behind the camera (depth {depth[0]:.4g})")
    return float(u[0]), float(v[0]), float(depth[0])


def frustum_mask(points: np.ndarray, calib: CameraCalibration, img_w: int, img_h: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    u, v, depth, w = project_points(pts, calib)
    return (depth > 0) & (w > 0) & (u >= 0) & (u < img_w) & (v >= 0) & (v < img_h)


def frustum_crop(cloud: PointCloud, calib: CameraCalibration, img_w: int, img_h: int) -> PointCloud:
    """Keep the points that land inside the image with positive depth, in input order."""
    return cloud.subset(np.nonzero(frustum_mask(cloud.points, calib, img_w, img_h))[0])


def bounding_diagonal(cloud: CloudLike) -> float:
    pts = as_points(cloud)
    if pts.shape[0] == 0:
        raise GeometryError("bounding diagonal of an empty cloud")
    ext = pts.max(axis=0) - pts.min(axis=0)
    return float(np.sqrt(np.dot(ext, ext)))


@dataclass(frozen=True)
class OrientedBox3D:
    """Box with geometric centre, extents along its local x/y/z and yaw about +z."""

    center: np.ndarray
    length: float
    width: float
    height: float
    yaw: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        for name in ("length", "width", "height"):
            v = float(getattr(self, name))
            if not v > 0.0:
                raise GeometryError(f"box {name} must be positive, got {v}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "yaw", float(self.yaw))

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    def bev_corners(self) -> np.ndarray:
        """Ground-plane rectangle corners, counter-clockwise, shape (4, 2)."""
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def as_row(self) -> np.ndarray:
        return np.array([*self.center, self.length, self.width, self.height, self.yaw])
