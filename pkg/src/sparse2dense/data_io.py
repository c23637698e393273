"""KITTI-format readers/writers, netpbm images, ASCII PLY and synthetic scenes.

Datasets on disk follow the KITTI object layout, pairing files by stem::

    root/velodyne/<id>.bin   root/image_2/<id>.pgm
    root/calib/<id>.txt      root/label_2/<id>.txt

KITTI ships PNG images; convert them once with any tool, e.g.
``convert 000000.png 000000.ppm``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from .errors import FormatError
from .evaluation import box_to_kitti, format_kitti_object, kitti_to_velo_box, parse_kitti_objects, velo_box_to_kitti
from .geometry import CameraCalibration, OrientedBox3D, PointCloud
from .lidar_sim import LidarSpec

log = logging.getLogger(__name__)

IMAGE_DIR, CLOUD_DIR, CALIB_DIR, LABEL_DIR = "image_2", "velodyne", "calib", "label_2"
IMAGE_EXTS = (".pgm", ".ppm")


# --------------------------------------------------------------------------
# velodyne .bin
# --------------------------------------------------------------------------


def read_velodyne_bin(path) -> PointCloud:
    """Little-endian float32 quadruples (x, y, z, reflectance)."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite values")
    return PointCloud(arr[:, :3], arr[:, 3])


def write_velodyne_bin(cloud: PointCloud, path) -> None:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    arr = np.column_stack([cloud.points, inten]).astype("<f4")
    Path(path).write_bytes(arr.tobytes())


# --------------------------------------------------------------------------
# calibration text
# --------------------------------------------------------------------------

_CALIB_KEYS = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


def parse_calib(text: str, source: str = "<calib>") -> CameraCalibration:
    found = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if ":" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'KEY: values'")
        key, _, rest = line.partition(":")
        key = key.strip()
        try:
            vals = [float(v) for v in rest.split()]
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from None
        if key in _CALIB_KEYS:
            if len(vals) != _CALIB_KEYS[key]:
                raise FormatError(f"{source}:{lineno}: {key} needs {_CALIB_KEYS[key]} values, got {len(vals)}")
            found[key] = np.array(vals)
    kwargs = {}
    for key, count in _CALIB_KEYS.items():
        if key in found:
            kwargs[key] = found[key].reshape(3, 3 if count == 9 else 4)
        else:
            log.warning("%s: missing %s, using identity", source, key)
    return CameraCalibration(**kwargs)


def read_calib(path) -> CameraCalibration:
    return parse_calib(Path(path).read_text(), str(path))


def format_calib(calib: CameraCalibration) -> str:
    def row(m):
        return " ".join(f"{v:.12e}" for v in np.ravel(m))

    lines = [f"P{i}: {row(calib.P2)}" for i in range(4)]
    lines.append(f"R0_rect: {row(calib.R0_rect)}")
    lines.append(f"Tr_velo_to_cam: {row(calib.Tr_velo_to_cam)}")
    lines.append(f"Tr_imu_to_velo: {row(np.hstack([np.eye(3), np.zeros((3, 1))]))}")
    return "\n".join(lines) + "\n"


def write_calib(calib: CameraCalibration, path) -> None:
    Path(path).write_text(format_calib(calib))


# --------------------------------------------------------------------------
# binary netpbm (P5 grey / P6 RGB)
# --------------------------------------------------------------------------


def _header_tokens(raw: bytes, count: int):
    tokens, pos, n = [], 0, len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates header and raster
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Read a binary PGM/PPM as an ``H x W x C`` float array in [0, 1]."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported image magic {magic!r} (need P5 or P6)")
    try:
        tokens, start = _header_tokens(raw, 4)
        w, h, maxval = (int(t) for t in tokens[1:4])
    except (ValueError, FormatError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from None
    if w < 1 or h < 1 or not 0 < maxval <= 65535:
        raise FormatError(f"{path}: bad dimensions or maxval")
    c = 1 if magic == b"P5" else 3
    dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * c * dt.itemsize
    body = raw[start : start + need]
    if len(body) != need:
        raise FormatError(f"{path}: raster truncated ({len(body)} of {need} bytes)")
    img = np.frombuffer(body, dtype=dt).reshape(h, w, c).astype(np.float64) / maxval
    return img


def write_image(img: np.ndarray, path, maxval: int = 255) -> None:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c not in (1, 3):
        raise ValueError("netpbm images need 1 or 3 channels")
    q = np.round(np.clip(arr, 0.0, 1.0) * maxval)
    dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + q.astype(dt).tobytes())


# --------------------------------------------------------------------------
# ASCII PLY
# --------------------------------------------------------------------------


def write_ply(cloud: PointCloud, path) -> None:
    """ASCII PLY with x, y, z (and intensity when present) at 9 significant digits."""
    has_i = cloud.intensity is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_i:
        lines.append("property float intensity")
    lines.append("end_header")
    data = cloud.points if not has_i else np.column_stack([cloud.points, cloud.intensity])
    body = "\n".join(" ".join(f"{v:.9g}" for v in row) for row in data)
    Path(path).write_text("\n".join(lines) + "\n" + (body + "\n" if len(cloud) else ""))


def read_ply(path) -> PointCloud:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    count, props, i = None, [], 1
    while True:
        if i >= len(lines):
            raise FormatError(f"{path}: missing end_header")
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise FormatError(f"{path}: unsupported element {parts[1]}")
            try:
                count = int(parts[2])
            except (IndexError, ValueError):
                raise FormatError(f"{path}: bad element line {lines[i - 1]!r}") from None
        elif parts[0] == "property":
            props.append(parts[-1])
        elif parts[0] == "end_header":
            break
    if count is None or props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: need a vertex element with x, y, z")
    rows = [ln.split() for ln in lines[i : i + count]]
    if len(rows) != count or any(len(r) != len(props) for r in rows):
        raise FormatError(f"{path}: vertex data truncated")
    try:
        data = np.array(rows, dtype=np.float64).reshape(count, len(props))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    inten = data[:, props.index("intensity")] if "intensity" in props else None
    return PointCloud(data[:, :3], inten)


def read_cloud(path) -> PointCloud:
    """``.bin`` (KITTI velodyne) or ``.ply`` by extension."""
    p = Path(path)
    if p.suffix == ".ply":
        return read_ply(p)
    return read_velodyne_bin(p)


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------


@dataclass
class Scene:
    image: np.ndarray
    dense_cloud: PointCloud
    calib: CameraCalibration
    boxes: List[OrientedBox3D] = field(default_factory=list)
    labels: List[str] = field(default_factory=list)
    id: str = "000000"

    def __post_init__(self):
        if len(self.dense_cloud) == 0:
            raise ValueError(f"scene {self.id}: empty dense cloud")
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.image.shape[0] < 1 or self.image.shape[1] < 1:
            raise ValueError(f"scene {self.id}: empty image")

    @property
    def img_h(self) -> int:
        return self.image.shape[0]

    @property
    def img_w(self) -> int:
        return self.image.shape[1]


def scene_ids(root) -> List[str]:
    """Sorted stems of ``root/velodyne/*.bin``."""
    return sorted(p.stem for p in (Path(root) / CLOUD_DIR).glob("*.bin"))


def _find_image(root: Path, sid: str) -> Path:
    for ext in IMAGE_EXTS:
        p = root / IMAGE_DIR / f"{sid}{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no image for scene {sid} under {root / IMAGE_DIR}")


def read_scene(root, sid: str) -> Scene:
    """Load one KITTI-layout scene; label boxes are returned in the LiDAR frame."""
    root = Path(root)
    image = read_image(_find_image(root, sid))
    cloud = read_velodyne_bin(root / CLOUD_DIR / f"{sid}.bin")
    calib_path = root / CALIB_DIR / f"{sid}.txt"
    calib = read_calib(calib_path) if calib_path.exists() else CameraCalibration()
    boxes, labels = [], []
    label_path = root / LABEL_DIR / f"{sid}.txt"
    if label_path.exists():
        for det in parse_kitti_objects(label_path.read_text()):
            boxes.append(kitti_to_velo_box(*box_to_kitti(det.box), calib))
            labels.append(det.label)
    return Scene(image, cloud, calib, boxes, labels, sid)


def write_scene(scene: Scene, root) -> None:
    root = Path(root)
    for sub in (IMAGE_DIR, CLOUD_DIR, CALIB_DIR, LABEL_DIR):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_image(scene.image, root / IMAGE_DIR / f"{scene.id}.pgm")
    write_velodyne_bin(scene.dense_cloud, root / CLOUD_DIR / f"{scene.id}.bin")
    write_calib(scene.calib, root / CALIB_DIR / f"{scene.id}.txt")
    lines = []
    for box, label in zip(scene.boxes, scene.labels):
        lines.append(format_kitti_object(label, *velo_box_to_kitti(box, scene.calib)))
    (root / LABEL_DIR / f"{scene.id}.txt").write_text("".join(line + "\n" for line in lines))


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

# LiDAR x forward, y left, z up  ->  camera x right, y down, z forward
VELO_TO_CAM = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class SynthObject:
    kind: str  # "box" or "sphere"
    center: tuple  # (x, y) on the ground, LiDAR frame
    size: tuple  # box: (length, width, height); sphere: (radius,)
    yaw: float = 0.0


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_objects: int = 4
    kinds: tuple = ("box", "box", "sphere")
    x_range: tuple = (6.0, 30.0)
    y_range: tuple = (-10.0, 10.0)
    box_length: tuple = (3.2, 4.6)
    box_width: tuple = (1.5, 1.9)
    box_height: tuple = (1.4, 1.7)
    sphere_radius: tuple = (0.4, 1.0)
    ground_z: float = -1.73
    image_w: int = 416
    image_h: int = 160
    focal: float = 200.0
    max_range: float = 80.0
    inv_depth_ref: float = 3.0
    objects: Optional[tuple] = None  # explicit SynthObjects override random placement

    def __post_init__(self):
        for name in ("x_range", "y_range", "box_length", "box_width", "box_height", "sphere_radius"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must be a non-degenerate range")
        if self.image_w < 1 or self.image_h < 1 or self.focal <= 0:
            raise ValueError("image dimensions and focal length must be positive")


def synth_calibration(spec: SynthSpec) -> CameraCalibration:
    """Pinhole camera at the LiDAR origin, principal point at the image centre."""
    k = np.array([[spec.focal, 0.0, spec.image_w / 2.0], [0.0, spec.focal, spec.image_h / 2.0], [0.0, 0.0, 1.0]])
    return CameraCalibration(np.hstack([k, np.zeros((3, 1))]), np.eye(3), VELO_TO_CAM)


def _place_objects(spec: SynthSpec, rng: np.random.Generator) -> List[SynthObject]:
    if spec.objects is not None:
        return list(spec.objects)
    placed: List[SynthObject] = []
    footprints = []
    tries = 0
    while len(placed) < spec.n_objects and tries < 200 * max(spec.n_objects, 1):
        tries += 1
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        x = rng.uniform(*spec.x_range)
        y = rng.uniform(*spec.y_range)
        if kind == "box":
            size = (rng.uniform(*spec.box_length), rng.uniform(*spec.box_width), rng.uniform(*spec.box_height))
            yaw = rng.uniform(-math.pi, math.pi)
            reach = 0.5 * math.hypot(size[0], size[1])
        else:
            size = (rng.uniform(*spec.sphere_radius),)
            yaw = 0.0
            reach = size[0]
        if any(math.hypot(x - fx, y - fy) < reach + fr + 0.5 for fx, fy, fr in footprints):
            continue
        footprints.append((x, y, reach))
        placed.append(SynthObject(kind, (x, y), size, yaw))
    return placed


def _object_arrays(objects: Sequence[SynthObject], ground_z: float):
    boxes, spheres = [], []
    for ob in objects:
        if ob.kind == "box":
            ln, wd, ht = ob.size
            boxes.append([ob.center[0], ob.center[1], ground_z + 0.5 * ht, ln, wd, ht, ob.yaw])
        elif ob.kind == "sphere":
            r = ob.size[0]
            spheres.append([ob.center[0], ob.center[1], ground_z + r, r])
        else:
            raise ValueError(f"unknown object kind {ob.kind!r}")
    return np.array(boxes, dtype=np.float64).reshape(-1, 7), np.array(spheres, dtype=np.float64).reshape(-1, 4)


def lidar_directions(lidar: LidarSpec = LidarSpec()) -> np.ndarray:
    """Unit ray per (beam, azimuth) bin centre, beam-major."""
    el = np.radians(lidar.beam_elevations())[:, None]
    az = np.radians(lidar.azimuth_centers())[None, :]
    d = np.stack(np.broadcast_arrays(np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)), axis=-1)
    return np.ascontiguousarray(d.reshape(-1, 3))


def camera_rays(calib: CameraCalibration, width: int, height: int):
    """Camera centre and unit ray per pixel centre, both in the LiDAR frame."""
    m = calib.P2[:, :3]
    center_rect = -np.linalg.solve(m, calib.P2[:, 3])
    center = calib.rect_to_velo(center_rect[None])[0]
    u, v = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=0)
    d_rect = np.linalg.solve(m, pix).T
    d_velo = calib.rect_to_velo(center_rect[None] + d_rect) - center
    d_velo /= np.linalg.norm(d_velo, axis=1, keepdims=True)
    d_rect /= np.linalg.norm(d_rect, axis=1, keepdims=True)
    return center, np.ascontiguousarray(d_velo), d_rect[:, 2]


_INTENSITY = {"ground": 0.25, "box": 0.7, "sphere": 0.5}


def synth_scene(spec: SynthSpec = SynthSpec(), lidar: LidarSpec = LidarSpec(), sid: Optional[str] = None) -> Scene:
    """Ground plane plus boxes/spheres, swept by the dense LiDAR and rendered as inverse depth."""
    rng = np.random.default_rng(spec.seed)
    objects = _place_objects(spec, rng)
    boxes_arr, spheres_arr = _object_arrays(objects, spec.ground_z)

    origin = np.zeros(3)
    dirs = lidar_directions(lidar)
    t, hit = kernels.raycast(origin, dirs, spec.ground_z, boxes_arr, spheres_arr, spec.max_range)
    ok = hit >= 0
    pts = dirs[ok] * t[ok, None]
    nb = boxes_arr.shape[0]
    h = hit[ok]
    inten = np.where(h == 0, _INTENSITY["ground"], np.where(h <= nb, _INTENSITY["box"], _INTENSITY["sphere"]))
    cloud = PointCloud(pts, inten)

    calib = synth_calibration(spec)
    center, pdirs, zfac = camera_rays(calib, spec.image_w, spec.image_h)
    tc, hc = kernels.raycast(center, pdirs, spec.ground_z, boxes_arr, spheres_arr, spec.max_range)
    depth = tc * zfac
    with np.errstate(divide="ignore"):
        inv = np.where(hc >= 0, np.minimum(spec.inv_depth_ref / depth, 1.0), 0.0)
    image = inv.reshape(spec.image_h, spec.image_w, 1)

    boxes, labels = [], []
    for ob in objects:
        if ob.kind == "box":
            ln, wd, ht = ob.size
            boxes.append(OrientedBox3D(np.array([ob.center[0], ob.center[1], spec.ground_z + 0.5 * ht]), ln, wd, ht, ob.yaw))
            labels.append("Car")
        else:
            r = ob.size[0]
            boxes.append(OrientedBox3D(np.array([ob.center[0], ob.center[1], spec.ground_z + r]), 2 * r, 2 * r, 2 * r, 0.0))
            labels.append("Misc")
    return Scene(image, cloud, calib, boxes, labels, sid if sid is not None else f"{spec.seed:06d}")
