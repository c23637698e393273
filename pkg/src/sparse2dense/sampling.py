"""Query selection on the sparse frame and ground-truth neighbourhoods from the dense one."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import CloudLike, as_points

log = logging.getLogger(__name__)

DEFAULT_RADIUS = 1.2


class InsufficientPointsError(ValueError):
    pass


class EmptyNeighborhoodError(ValueError):
    pass


@dataclass(frozen=True)
class QuerySet:
    queries: np.ndarray  # (n, 3)
    source_indices: np.ndarray  # (n,) into the sparse cloud

    def __len__(self) -> int:
        return self.queries.shape[0]


@dataclass(frozen=True)
class QueryGroupPair:
    query: np.ndarray  # (3,)
    gt_group: np.ndarray  # (k, 3), normalised
    valid_count: int


def farthest_point_sampling(cloud: CloudLike, n: int, start_index: int = 0) -> QuerySet:
    """Greedy farthest point sampling from ``start_index``; ties go to the lowest index."""
    pts = np.ascontiguousarray(as_points(cloud))
    if n > pts.shape[0]:
        raise InsufficientPointsError(f"requested {n} queries from a cloud of {pts.shape[0]} points")
    if n <= 0:
        return QuerySet(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    if not 0 <= start_index < pts.shape[0]:
        raise IndexError(f"start_index {start_index} out of range")
    idx = kernels.fps(pts, int(n), int(start_index))
    return QuerySet(pts[idx], idx)


def random_point_sampling(cloud: CloudLike, n: int, seed: int = 0) -> QuerySet:
    pts = as_points(cloud)
    if n > pts.shape[0]:
        raise InsufficientPointsError(f"requested {n} queries from a cloud of {pts.shape[0]} points")
    idx = np.random.default_rng(seed).choice(pts.shape[0], size=n, replace=False).astype(np.int64)
    return QuerySet(pts[idx], idx)


def select_queries(cloud: CloudLike, n: int, method: str = "fps", seed: int = 0) -> QuerySet:
    if method == "fps":
        return farthest_point_sampling(cloud, n, 0)
    if method == "rps":
        return random_point_sampling(cloud, n, seed)
    raise ValueError(f"unknown sampling method {method!r} (expected 'fps' or 'rps')")


class VoxelGrid:
    """Uniform grid with points sorted by linearised cell key; exact radius search."""

    def __init__(self, points: np.ndarray, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        self.cell = float(cell)
        if self.points.shape[0]:
            self.lo = self.points.min(axis=0)
            hi = self.points.max(axis=0)
        else:
            self.lo = np.zeros(3)
            hi = np.zeros(3)
        self.dims = (np.floor((hi - self.lo) / self.cell).astype(np.int64) + 1).astype(np.int64)
        c = np.floor((self.points - self.lo) / self.cell).astype(np.int64)
        c = np.minimum(c, self.dims - 1)
        keys = c[:, 0] + self.dims[0] * (c[:, 1] + self.dims[1] * c[:, 2])
        self.order = np.argsort(keys, kind="stable").astype(np.int64)
        self.sorted_keys = keys[self.order]

    def query_radius(self, queries: np.ndarray, radius: float):
        """Neighbours within ``radius`` (inclusive) of each query as CSR ``(offsets, indices)``."""
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        if radius > self.cell:
            raise ValueError("radius must not exceed the grid cell size")
        if self.points.shape[0] == 0:
            return np.zeros(q.shape[0] + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        return kernels.radius_query(
            self.points, self.order, self.sorted_keys, self.lo, self.dims, self.cell, q, float(radius)
        )


def normalize_group(points: np.ndarray, query, radius: float = DEFAULT_RADIUS) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - np.asarray(query, dtype=np.float64)) / radius


def denormalize_group(group, query, radius: float = DEFAULT_RADIUS) -> np.ndarray:
    return np.asarray(query, dtype=np.float64) + radius * np.asarray(group, dtype=np.float64)


def _group_from_neighbors(dense_pts, nbr, query, k, radius, rng) -> QueryGroupPair:
    m = nbr.size
    if m == 0:
        raise EmptyNeighborhoodError(f"no dense points within {radius} m of query {tuple(query)}")
    if m >= k:
        pick = nbr[rng.choice(m, size=k, replace=False)] if m > k else nbr
        valid = k
    else:
        pick = np.concatenate([nbr, nbr[rng.choice(m, size=k - m, replace=True)]])
        valid = m
    group = np.clip(normalize_group(dense_pts[pick], query, radius), -1.0, 1.0)
    return QueryGroupPair(np.asarray(query, dtype=np.float64), group, int(valid))


def extract_group(
    dense: CloudLike, query, k: int, radius: float = DEFAULT_RADIUS, seed: int = 0
) -> QueryGroupPair:
    """Sample ``k`` dense points within ``radius`` of ``query`` and normalise them.

    Neighbourhoods larger than ``k`` are subsampled without replacement;
    smaller ones are padded by resampling with replacement and
    ``valid_count`` records how many distinct points were available.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = as_points(dense)
    q = np.asarray(query, dtype=np.float64).reshape(3)
    grid = VoxelGrid(pts, radius)
    _, nbr = grid.query_radius(q[None], radius)
    return _group_from_neighbors(pts, nbr, q, k, radius, np.random.default_rng(seed))


def extract_groups(
    dense: CloudLike, queries: np.ndarray, k: int, radius: float = DEFAULT_RADIUS, seed: int = 0
):
    """Ground-truth groups for every query; queries without neighbours are dropped.

    Each query draws from its own generator seeded with ``(seed, i)`` so the
    result does not depend on extraction order. Returns ``(kept, groups,
    valid_counts)`` where ``kept`` indexes into ``queries``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = as_points(dense)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    offsets, indices = VoxelGrid(pts, radius).query_radius(q, radius)
    kept, groups, valid = [], [], []
    for i in range(q.shape[0]):
        nbr = indices[offsets[i] : offsets[i + 1]]
        if nbr.size == 0:
            log.warning("dropping query %d at %s: empty neighbourhood", i, q[i])
            continue
        pair = _group_from_neighbors(pts, nbr, q[i], k, radius, np.random.default_rng([seed, i]))
        kept.append(i)
        groups.append(pair.gt_group)
        valid.append(pair.valid_count)
    groups_arr = np.stack(groups) if groups else np.zeros((0, k, 3))
    return np.asarray(kept, dtype=np.int64), groups_arr, np.asarray(valid, dtype=np.int64)
