"""Independent brute-force reference implementations used as test oracles.

These deliberately share no code with the package: plain loops, itertools,
and the most literal reading of each definition.
"""

import itertools
import math


def fps_brute(points, n, start=0):
    """Greedy FPS by recomputing every candidate's distance to the selected set from scratch."""
    pts = [tuple(float(c) for c in p) for p in points]
    chosen = [start]
    while len(chosen) < n:
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            if i in chosen:
                continue
            d = min(sum((a - b) ** 2 for a, b in zip(p, pts[j])) for j in chosen)
            if d > best_d:  # strict: first index wins ties
                best, best_d = i, d
        chosen.append(best)
    return chosen


def chamfer_brute(x, y):
    """Symmetric squared Chamfer, each direction averaged over its own set size."""
    def one_way(a, b):
        total = 0.0
        for p in a:
            total += min(sum((pi - qi) ** 2 for pi, qi in zip(p, q)) for q in b)
        return total / len(a)

    return one_way(x, y) + one_way(y, x)


def radius_brute(points, query, radius):
    return [i for i, p in enumerate(points) if math.dist(p, query) <= radius]


def aabb_iou(a, b):
    """IoU of axis-aligned boxes given as (cx, cy, cz, l, w, h)."""
    inter = 1.0
    for axis in range(3):
        lo = max(a[axis] - a[axis + 3] / 2, b[axis] - b[axis + 3] / 2)
        hi = min(a[axis] + a[axis + 3] / 2, b[axis] + b[axis + 3] / 2)
        inter *= max(0.0, hi - lo)
    va = a[3] * a[4] * a[5]
    vb = b[3] * b[4] * b[5]
    return inter / (va + vb - inter)


def kept_bin_count(n_beams, n_azim, beam_stride, azim_stride):
    """Count kept (beam, azim) pairs by enumeration."""
    return sum(1 for b, a in itertools.product(range(n_beams), range(n_azim))
               if b % beam_stride == 0 and a % azim_stride == 0)


def patch_count(h, w, ps=32):
    """Pad each side up to a multiple of ``ps`` and count tiles by stepping through the padded image."""
    hp, wp = h, w
    while hp % ps:
        hp += 1
    while wp % ps:
        wp += 1
    return len(range(0, hp, ps)) * len(range(0, wp, ps)), (hp, wp)


def ray_plane_z(origin, direction, z0):
    """Distance along a unit ray to the horizontal plane z = z0, or None."""
    if abs(direction[2]) < 1e-15:
        return None
    t = (z0 - origin[2]) / direction[2]
    return t if t > 0 else None


def ray_box(origin, direction, center, size, yaw):
    """Entry distance of a ray into a yaw-rotated box by sampling the slab equations literally."""
    c, s = math.cos(yaw), math.sin(yaw)
    rel = [origin[i] - center[i] for i in range(3)]
    o = (c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2])
    d = (c * direction[0] + s * direction[1], -s * direction[0] + c * direction[1], direction[2])
    t_in, t_out = -math.inf, math.inf
    for axis in range(3):
        half = size[axis] / 2
        if abs(d[axis]) < 1e-15:
            if abs(o[axis]) > half:
                return None
            continue
        t1 = (-half - o[axis]) / d[axis]
        t2 = (half - o[axis]) / d[axis]
        t_in = max(t_in, min(t1, t2))
        t_out = min(t_out, max(t1, t2))
    if t_in > t_out or t_out <= 0:
        return None
    return t_in if t_in > 0 else None


def interpolated_ap_brute(tp_flags, n_gt, points=40):
    """40-point interpolated AP from a score-ordered list of TP/FP flags."""
    prec, rec = [], []
    tp = 0
    for i, f in enumerate(tp_flags, 1):
        tp += f
        prec.append(tp / i)
        rec.append(tp / n_gt)
    total = 0.0
    for j in range(1, points + 1):
        r = j / points
        cands = [p for p, rr in zip(prec, rec) if rr >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / points
