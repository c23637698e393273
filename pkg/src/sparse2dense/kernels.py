"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The public names (``fps``, ``select_nearest_per_bin``, ``raycast``,
``radius_query``, ``group_chamfer``) are bound to the numba variant unless
``SPARSE2DENSE_NUMBA=0`` is set. Both variants are always importable under
their suffixed names so tests and the benchmark can compare them.
"""

from __future__ import annotations

import numpy as np

from ._accel import HAS_NUMBA, USE_NUMBA, njit

MISS = -1
GROUND = 0
# relative slack so points exactly on the sphere survive rounding of (p - q)
RADIUS_SLACK = 1e-12
_CELL_TOL = 1e-9


# --------------------------------------------------------------------------
# farthest point sampling
# --------------------------------------------------------------------------


def fps_numpy(points: np.ndarray, n: int, start: int) -> np.ndarray:
    npts = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    mind = np.full(npts, np.inf)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    cur = start
    for i in range(n):
        out[i] = cur
        dx = x - x[cur]
        dy = y - y[cur]
        dz = z - z[cur]
        np.minimum(mind, dx * dx + dy * dy + dz * dz, out=mind)
        mind[cur] = -1.0
        cur = int(np.argmax(mind))
    return out


def _fps_loop(points, n, start):
    npts = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    mind = np.full(npts, np.inf)
    cur = start
    for i in range(n):
        out[i] = cur
        px = points[cur, 0]
        py = points[cur, 1]
        pz = points[cur, 2]
        best = -2.0
        nxt = 0
        mind[cur] = -1.0
        for j in range(npts):
            m = mind[j]
            if m >= 0.0:
                dx = points[j, 0] - px
                dy = points[j, 1] - py
                dz = points[j, 2] - pz
                d = dx * dx + dy * dy + dz * dz
                if d < m:
                    m = d
                    mind[j] = d
            if m > best:
                best = m
                nxt = j
        cur = nxt
    return out


fps_numba = njit(_fps_loop)


# --------------------------------------------------------------------------
# bin collision resolution (nearest range wins, ties -> lowest index)
# --------------------------------------------------------------------------


def select_nearest_per_bin_numpy(keys: np.ndarray, ranges: np.ndarray) -> np.ndarray:
    """Indices (ascending) of the nearest-range entry for every distinct key."""
    if keys.size == 0:
        return np.empty(0, dtype=np.int64)
    idx = np.arange(keys.size)
    order = np.lexsort((idx, ranges, keys))
    sk = keys[order]
    first = np.ones(sk.size, dtype=bool)
    first[1:] = sk[1:] != sk[:-1]
    return np.sort(order[first]).astype(np.int64)


def _select_bins_loop(keys, ranges):
    m = keys.size
    if m == 0:
        return np.empty(0, dtype=np.int64)
    kmax = 0
    for i in range(m):
        if keys[i] > kmax:
            kmax = keys[i]
    best = np.full(kmax + 1, -1, dtype=np.int64)
    for i in range(m):
        b = best[keys[i]]
        if b < 0 or ranges[i] < ranges[b]:
            best[keys[i]] = i
    keep = np.zeros(m, dtype=np.bool_)
    for k in range(kmax + 1):
        if best[k] >= 0:
            keep[best[k]] = True
    return np.nonzero(keep)[0].astype(np.int64)


select_nearest_per_bin_numba = njit(_select_bins_loop)


# --------------------------------------------------------------------------
# ray casting against ground plane, yaw-rotated boxes and spheres
# --------------------------------------------------------------------------


def raycast_numpy(origin, dirs, ground_z, boxes, spheres, max_range):
    """Nearest hit along each unit direction from a shared origin.

    ``boxes`` rows are (cx, cy, cz, length, width, height, yaw); ``spheres``
    rows are (cx, cy, cz, radius). Returns ``(t, hit_id)`` with ``t = inf``
    and ``hit_id = -1`` on a miss; ids are 0 for ground, 1..M for boxes and
    M+1.. for spheres.
    """
    nr = dirs.shape[0]
    t = np.full(nr, np.inf)
    hit = np.full(nr, MISS, dtype=np.int64)
    ox, oy, oz = origin
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]

    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (ground_z - oz) / dz
    ok = (dz < 0.0) & (tg > 0.0) & (tg <= max_range) & (tg < t)
    t[ok] = tg[ok]
    hit[ok] = GROUND

    for b in range(boxes.shape[0]):
        cx, cy, cz, ln, wd, ht, yaw = boxes[b]
        c = np.cos(yaw)
        s = np.sin(yaw)
        rx, ry, rz = ox - cx, oy - cy, oz - cz
        lox = c * rx + s * ry
        loy = -s * rx + c * ry
        loz = rz
        ldx = c * dx + s * dy
        ldy = -s * dx + c * dy
        ldz = dz
        tmin = np.full(nr, -np.inf)
        tmax = np.full(nr, np.inf)
        alive = np.ones(nr, dtype=bool)
        for lo, ld, half in ((lox, ldx, 0.5 * ln), (loy, ldy, 0.5 * wd), (loz, ldz, 0.5 * ht)):
            par = np.abs(ld) < 1e-12
            if abs(lo) > half:
                alive &= ~par
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-half - lo) / ld
                t2 = (half - lo) / ld
            lo_t = np.where(par, -np.inf, np.minimum(t1, t2))
            hi_t = np.where(par, np.inf, np.maximum(t1, t2))
            tmin = np.maximum(tmin, lo_t)
            tmax = np.minimum(tmax, hi_t)
        ok = alive & (tmax >= tmin) & (tmin > 0.0) & (tmin <= max_range) & (tmin < t)
        t[ok] = tmin[ok]
        hit[ok] = 1 + b

    nb = boxes.shape[0]
    for q in range(spheres.shape[0]):
        cx, cy, cz, rad = spheres[q]
        rx, ry, rz = ox - cx, oy - cy, oz - cz
        bq = dx * rx + dy * ry + dz * rz
        cq = rx * rx + ry * ry + rz * rz - rad * rad
        disc = bq * bq - cq
        with np.errstate(invalid="ignore"):
            ts = -bq - np.sqrt(disc)
        ok = (disc >= 0.0) & (ts > 0.0) & (ts <= max_range) & (ts < t)
        t[ok] = ts[ok]
        hit[ok] = 1 + nb + q
    return t, hit


def _raycast_loop(origin, dirs, ground_z, boxes, spheres, max_range):
    nr = dirs.shape[0]
    t = np.full(nr, np.inf)
    hit = np.full(nr, -1, dtype=np.int64)
    ox = origin[0]
    oy = origin[1]
    oz = origin[2]
    nb = boxes.shape[0]
    ns = spheres.shape[0]
    for r in range(nr):
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        best = np.inf
        bid = -1
        if dz < 0.0:
            tg = (ground_z - oz) / dz
            if tg > 0.0 and tg <= max_range and tg < best:
                best = tg
                bid = 0
        for b in range(nb):
            c = np.cos(boxes[b, 6])
            s = np.sin(boxes[b, 6])
            rx = ox - boxes[b, 0]
            ry = oy - boxes[b, 1]
            rz = oz - boxes[b, 2]
            lo3 = (c * rx + s * ry, -s * rx + c * ry, rz)
            ld3 = (c * dx + s * dy, -s * dx + c * dy, dz)
            half3 = (0.5 * boxes[b, 3], 0.5 * boxes[b, 4], 0.5 * boxes[b, 5])
            tmin = -np.inf
            tmax = np.inf
            alive = True
            for a in range(3):
                lo = lo3[a]
                ld = ld3[a]
                half = half3[a]
                if abs(ld) < 1e-12:
                    if abs(lo) > half:
                        alive = False
                    continue
                t1 = (-half - lo) / ld
                t2 = (half - lo) / ld
                if t1 > t2:
                    t1, t2 = t2, t1
                if t1 > tmin:
                    tmin = t1
                if t2 < tmax:
                    tmax = t2
            if alive and tmax >= tmin and tmin > 0.0 and tmin <= max_range and tmin < best:
                best = tmin
                bid = 1 + b
        for q in range(ns):
            rx = ox - spheres[q, 0]
            ry = oy - spheres[q, 1]
            rz = oz - spheres[q, 2]
            bq = dx * rx + dy * ry + dz * rz
            cq = rx * rx + ry * ry + rz * rz - spheres[q, 3] * spheres[q, 3]
            disc = bq * bq - cq
            if disc >= 0.0:
                ts = -bq - np.sqrt(disc)
                if ts > 0.0 and ts <= max_range and ts < best:
                    best = ts
                    bid = 1 + nb + q
        t[r] = best
        hit[r] = bid
    return t, hit


raycast_numba = njit(_raycast_loop)


# --------------------------------------------------------------------------
# voxel-grid radius search
# --------------------------------------------------------------------------


def radius_query_numpy(points, order, sorted_keys, lo, dims, cell, queries, radius):
    """CSR neighbour lists: ``(offsets, indices)``; indices ascending per query."""
    r2 = radius * radius * (1.0 + RADIUS_SLACK)
    nq = queries.shape[0]
    chunks = []
    offsets = np.zeros(nq + 1, dtype=np.int64)
    c_lo = np.maximum(np.floor((queries - radius - lo) / cell - _CELL_TOL).astype(np.int64), 0)
    c_hi = np.minimum(np.floor((queries + radius - lo) / cell + _CELL_TOL).astype(np.int64), np.asarray(dims) - 1)
    for i in range(nq):
        cands = []
        for ix in range(c_lo[i, 0], c_hi[i, 0] + 1):
            for iy in range(c_lo[i, 1], c_hi[i, 1] + 1):
                base = ix + dims[0] * iy
                for iz in range(c_lo[i, 2], c_hi[i, 2] + 1):
                    key = base + dims[0] * dims[1] * iz
                    a = np.searchsorted(sorted_keys, key, side="left")
                    b = np.searchsorted(sorted_keys, key, side="right")
                    if b > a:
                        cands.append(order[a:b])
        if cands:
            cand = np.concatenate(cands)
            d = points[cand] - queries[i]
            d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
            sel = np.sort(cand[d2 <= r2])
        else:
            sel = np.empty(0, dtype=np.int64)
        chunks.append(sel)
        offsets[i + 1] = offsets[i] + sel.size
    indices = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    return offsets, indices.astype(np.int64)


def _radius_query_loop(points, order, sorted_keys, lo, dims, cell, queries, radius):
    r2 = radius * radius * (1.0 + RADIUS_SLACK)
    nq = queries.shape[0]
    counts = np.zeros(nq, dtype=np.int64)
    # pass 0 counts, pass 1 fills
    offsets = np.zeros(nq + 1, dtype=np.int64)
    indices = np.empty(0, dtype=np.int64)
    for pass_ in range(2):
        for i in range(nq):
            qx = queries[i, 0]
            qy = queries[i, 1]
            qz = queries[i, 2]
            x0 = max(np.int64(np.floor((qx - radius - lo[0]) / cell - _CELL_TOL)), 0)
            x1 = min(np.int64(np.floor((qx + radius - lo[0]) / cell + _CELL_TOL)), dims[0] - 1)
            y0 = max(np.int64(np.floor((qy - radius - lo[1]) / cell - _CELL_TOL)), 0)
            y1 = min(np.int64(np.floor((qy + radius - lo[1]) / cell + _CELL_TOL)), dims[1] - 1)
            z0 = max(np.int64(np.floor((qz - radius - lo[2]) / cell - _CELL_TOL)), 0)
            z1 = min(np.int64(np.floor((qz + radius - lo[2]) / cell + _CELL_TOL)), dims[2] - 1)
            pos = offsets[i]
            for ix in range(x0, x1 + 1):
                for iy in range(y0, y1 + 1):
                    for iz in range(z0, z1 + 1):
                        key = ix + dims[0] * (iy + dims[1] * iz)
                        a = np.searchsorted(sorted_keys, key, side="left")
                        b = np.searchsorted(sorted_keys, key, side="right")
                        for j in range(a, b):
                            p = order[j]
                            dx = points[p, 0] - qx
                            dy = points[p, 1] - qy
                            dz = points[p, 2] - qz
                            if dx * dx + dy * dy + dz * dz <= r2:
                                if pass_ == 0:
                                    counts[i] += 1
                                else:
                                    indices[pos] = p
                                    pos += 1
            if pass_ == 1:
                indices[offsets[i] : pos].sort()
        if pass_ == 0:
            for i in range(nq):
                offsets[i + 1] = offsets[i] + counts[i]
            indices = np.empty(offsets[nq], dtype=np.int64)
    return offsets, indices


radius_query_numba = njit(_radius_query_loop)


# --------------------------------------------------------------------------
# batched per-group Chamfer distance
# --------------------------------------------------------------------------


def group_chamfer_numpy(pred: np.ndarray, gt: np.ndarray):
    """Per-group Chamfer terms for ``pred`` [n, k, 3] against ``gt`` [n, m, 3].

    Returns ``(loss [n], nn_pred [n, k], nn_gt [n, m])`` where ``nn_pred``
    indexes into ``gt`` and ``nn_gt`` into ``pred``; ties go to the lowest index.
    """
    dx = pred[:, :, None, 0] - gt[:, None, :, 0]
    dy = pred[:, :, None, 1] - gt[:, None, :, 1]
    dz = pred[:, :, None, 2] - gt[:, None, :, 2]
    d = dx * dx + dy * dy + dz * dz
    nn_pred = np.argmin(d, axis=2)
    nn_gt = np.argmin(d, axis=1)
    dp = np.take_along_axis(d, nn_pred[:, :, None], axis=2)[:, :, 0]
    dg = np.take_along_axis(d, nn_gt[:, None, :], axis=1)[:, 0, :]
    loss = dp.mean(axis=1) + dg.mean(axis=1)
    return loss, nn_pred.astype(np.int64), nn_gt.astype(np.int64)


def _group_chamfer_loop(pred, gt):
    n, k = pred.shape[0], pred.shape[1]
    m = gt.shape[1]
    loss = np.zeros(n)
    nn_pred = np.zeros((n, k), dtype=np.int64)
    nn_gt = np.zeros((n, m), dtype=np.int64)
    for g in range(n):
        best_g = np.full(m, np.inf)
        acc_p = 0.0
        for i in range(k):
            best = np.inf
            for j in range(m):
                dx = pred[g, i, 0] - gt[g, j, 0]
                dy = pred[g, i, 1] - gt[g, j, 1]
                dz = pred[g, i, 2] - gt[g, j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
                    nn_pred[g, i] = j
                if d < best_g[j]:
                    best_g[j] = d
                    nn_gt[g, j] = i
            acc_p += best
        acc_g = 0.0
        for j in range(m):
            acc_g += best_g[j]
        loss[g] = acc_p / k + acc_g / m
    return loss, nn_pred, nn_gt


group_chamfer_numba = njit(_group_chamfer_loop)


def group_chamfer_grad(pred, gt, nn_pred, nn_gt):
    """Gradient of ``sum(loss)`` from :func:`group_chamfer` w.r.t. ``pred``."""
    n, k, _ = pred.shape
    m = gt.shape[1]
    rows = np.arange(n)[:, None]
    grad = (2.0 / k) * (pred - gt[rows, nn_pred])
    back = (2.0 / m) * (pred[rows, nn_gt] - gt)
    np.add.at(grad, (np.broadcast_to(rows, nn_gt.shape), nn_gt), back)
    return grad


# --------------------------------------------------------------------------

if USE_NUMBA:
    fps = fps_numba
    select_nearest_per_bin = select_nearest_per_bin_numba
    raycast = raycast_numba
    radius_query = radius_query_numba
    group_chamfer = group_chamfer_numba
else:
    fps = fps_numpy
    select_nearest_per_bin = select_nearest_per_bin_numpy
    raycast = raycast_numpy
    radius_query = radius_query_numpy
    group_chamfer = group_chamfer_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"

__all__ = [
    "BACKEND",
    "HAS_NUMBA",
    "fps",
    "fps_numpy",
    "fps_numba",
    "select_nearest_per_bin",
    "select_nearest_per_bin_numpy",
    "select_nearest_per_bin_numba",
    "raycast",
    "raycast_numpy",
    "raycast_numba",
    "radius_query",
    "radius_query_numpy",
    "radius_query_numba",
    "group_chamfer",
    "group_chamfer_numpy",
    "group_chamfer_numba",
    "group_chamfer_grad",
]
