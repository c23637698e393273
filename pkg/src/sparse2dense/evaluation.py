"""Scene reassembly, reconstruction metrics and oriented-box IoU / AP."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError
from .geometry import CameraCalibration, CloudLike, OrientedBox3D, PointCloud, as_points, bounding_diagonal
from .sampling import DEFAULT_RADIUS

PSNR_INF = math.inf
_AREA_EPS = 1e-9


@dataclass(frozen=True)
class ReconstructionReport:
    chamfer: float
    psnr: float
    n_points_pred: int
    n_points_gt: int

    def to_json(self) -> dict:
        return {
            "chamfer": self.chamfer,
            "psnr": "inf" if math.isinf(self.psnr) else self.psnr,
            "n_points_pred": self.n_points_pred,
            "n_points_gt": self.n_points_gt,
        }


@dataclass(frozen=True)
class Detection:
    box: OrientedBox3D
    score: float = 1.0
    label: str = "Car"

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


def assemble_scene(pred_groups, queries, radius: float = DEFAULT_RADIUS) -> PointCloud:
    """Denormalise every group about its query and concatenate: ``n * k`` points."""
    g = np.asarray(pred_groups, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if g.ndim != 3 or g.shape[0] != q.shape[0] or g.shape[2] != 3:
        raise ValueError(f"groups {g.shape} do not match queries {q.shape}")
    return PointCloud((q[:, None, :] + radius * g).reshape(-1, 3))


def _directional_means(a: np.ndarray, b: np.ndarray):
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("metric of an empty point cloud")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(np.mean(d_ab**2)), float(np.mean(d_ba**2))


def chamfer_metric(pred: CloudLike, gt: CloudLike) -> float:
    """Symmetric squared Chamfer; each direction averaged over its own set size."""
    a, b = _directional_means(as_points(pred), as_points(gt))
    return a + b


def psnr_metric(pred: CloudLike, gt: CloudLike) -> float:
    """``10 log10(peak^2 / MSE)`` with peak = gt bounding-box diagonal.

    MSE is the mean of the two directional mean squared nearest-neighbour
    distances. Returns ``inf`` when the clouds coincide.
    """
    gt_pts = as_points(gt)
    a, b = _directional_means(as_points(pred), gt_pts)
    mse = 0.5 * (a + b)
    peak = bounding_diagonal(gt_pts)
    if peak <= 0:
        raise ValueError("PSNR needs a ground truth with non-zero extent")
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def restrict_to_support(gt: CloudLike, support: CloudLike, radius: float = DEFAULT_RADIUS) -> PointCloud:
    """Ground-truth points within ``radius`` of any support (query) point."""
    g, q = as_points(gt), as_points(support)
    if g.shape[0] == 0 or q.shape[0] == 0:
        return PointCloud(g[:0])
    d, _ = cKDTree(q).query(g, k=1)
    return PointCloud(g[d <= radius])


def reconstruction_report(pred: CloudLike, gt: CloudLike) -> ReconstructionReport:
    p, g = as_points(pred), as_points(gt)
    return ReconstructionReport(chamfer_metric(p, g), psnr_metric(p, g), p.shape[0], g.shape[0])


# --------------------------------------------------------------------------
# oriented IoU
# --------------------------------------------------------------------------


def _clip_polygon(subject: List[np.ndarray], clip: np.ndarray) -> List[np.ndarray]:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = subject
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= -_AREA_EPS

        def cross_point(p, q):
            d = q - p
            denom = edge[0] * d[1] - edge[1] * d[0]
            t = (edge[1] * (p[0] - a[0]) - edge[0] * (p[1] - a[1])) / denom
            return p + t * d

        inp, out = out, []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(cross_point(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross_point(prev, cur))
    return out


def polygon_area(poly: Sequence[np.ndarray]) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def bev_intersection_area(a: OrientedBox3D, b: OrientedBox3D) -> float:
    poly = _clip_polygon(list(a.bev_corners()), b.bev_corners())
    area = polygon_area(poly)
    return area if area > _AREA_EPS else 0.0


def iou3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Volume IoU of two yaw-rotated boxes: BEV overlap area times vertical overlap."""
    za0, za1 = a.center[2] - 0.5 * a.height, a.center[2] + 0.5 * a.height
    zb0, zb1 = b.center[2] - 0.5 * b.height, b.center[2] + 0.5 * b.height
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# --------------------------------------------------------------------------
# average precision
# --------------------------------------------------------------------------

N_RECALL_POINTS = 40


def average_precision(detections: Sequence[Detection], gts: Sequence[OrientedBox3D], iou_threshold: float = 0.7) -> float:
    """Greedy score-ordered matching, then 40-point interpolated AP (recall 1/40 .. 1)."""
    if len(gts) == 0:
        raise ValueError("average precision needs at least one ground-truth box")
    dets = sorted(detections, key=lambda d: -d.score)
    if not dets:
        return 0.0
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets))
    for i, det in enumerate(dets):
        best, best_j = -1.0, -1
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            iou = iou3d(det.box, gt)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_threshold:
            matched[best_j] = True
            tp[i] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(dets) + 1)
    ap = 0.0
    for r in np.linspace(1.0 / N_RECALL_POINTS, 1.0, N_RECALL_POINTS):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / N_RECALL_POINTS


# --------------------------------------------------------------------------
# KITTI label / result text
# --------------------------------------------------------------------------


def box_from_kitti(h: float, w: float, l: float, x: float, y: float, z: float, ry: float) -> OrientedBox3D:
    """Camera-frame KITTI box (bottom-centre, y down) to a z-up box for IoU.

    The z-up frame is (x_cam, z_cam, -y_cam); yaw = -ry.
    """
    return OrientedBox3D(np.array([x, z, -y + 0.5 * h]), l, w, h, -ry)


def box_to_kitti(box: OrientedBox3D):
    """Inverse of :func:`box_from_kitti`: ``(h, w, l, x, y, z, ry)``."""
    x, zc, up = box.center
    return box.height, box.width, box.length, x, -(up - 0.5 * box.height), zc, -box.yaw


def velo_box_to_kitti(box: OrientedBox3D, calib: CameraCalibration):
    """LiDAR-frame box (z up, yaw about z) to KITTI camera fields ``(h, w, l, x, y, z, ry)``."""
    bottom = np.array([box.center[0], box.center[1], box.center[2] - 0.5 * box.height])
    x, y, z = calib.velo_to_rect(bottom)[0]
    ry = -box.yaw - 0.5 * math.pi
    ry = (ry + math.pi) % (2 * math.pi) - math.pi
    return box.height, box.width, box.length, x, y, z, ry


def kitti_to_velo_box(h, w, l, x, y, z, ry, calib: CameraCalibration) -> OrientedBox3D:
    """Inverse of :func:`velo_box_to_kitti`."""
    bottom = calib.rect_to_velo(np.array([[x, y, z]], dtype=np.float64))[0]
    yaw = -ry - 0.5 * math.pi
    yaw = (yaw + math.pi) % (2 * math.pi) - math.pi
    return OrientedBox3D(bottom + np.array([0.0, 0.0, 0.5 * h]), l, w, h, yaw)


def parse_kitti_objects(text: str, with_score: bool = False) -> List[Detection]:
    """Parse KITTI label / result lines into :class:`Detection` objects.

    Columns: type, truncated, occluded, alpha, bbox(4), h, w, l, x, y, z, ry[, score].
    ``DontCare`` lines are skipped; labels without a score get score 1.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "DontCare":
            continue
        if len(parts) not in (15, 16):
            raise FormatError(f"line {lineno}: expected 15 or 16 fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        h, w, l, x, y, z, ry = vals[7:14]
        score = vals[14] if len(vals) == 15 else 1.0
        if with_score and len(vals) != 15:
            raise FormatError(f"line {lineno}: detection line without a score")
        try:
            box = box_from_kitti(h, w, l, x, y, z, ry)
            out.append(Detection(box, min(max(score, 0.0), 1.0), parts[0]))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    return out


def format_kitti_object(label: str, h, w, l, x, y, z, ry, score=None, bbox=(0.0, 0.0, 0.0, 0.0)) -> str:
    alpha = -10.0
    fields = [label, "0.00", "0", f"{alpha:.2f}", *(f"{v:.2f}" for v in bbox)]
    fields += [f"{v:.4f}" for v in (h, w, l, x, y, z, ry)]
    if score is not None:
        fields.append(f"{score:.4f}")
    return " ".join(fields)
