#!/usr/bin/env python3
"""Time the numba kernels against their numpy fallbacks on pipeline-sized inputs.

Usage:
    python benchmarks/bench_kernels.py [--repeat R] [--json]

Both variants are always importable; the env flag only picks the default
dispatch, so one process can time both.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from sparse2dense import kernels
from sparse2dense.data_io import SynthSpec, _object_arrays, _place_objects, lidar_directions
from sparse2dense.lidar_sim import LidarSpec, assign_bins_array
from sparse2dense.sampling import VoxelGrid


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    dense = rng.uniform(-40, 40, size=(50_000, 3))
    sparse = rng.uniform(-40, 40, size=(800, 3))

    spec = LidarSpec()
    beam, azim, rngs, valid = assign_bins_array(dense, spec)
    keys = (beam * spec.n_azim + azim)[valid].astype(np.int64)
    ranges = rngs[valid]

    synth = SynthSpec(seed=0)
    boxes, spheres = _object_arrays(_place_objects(synth, np.random.default_rng(0)), synth.ground_z)
    dirs = lidar_directions(spec)
    origin = np.zeros(3)

    grid = VoxelGrid(dense, 1.2)
    queries = dense[rng.choice(len(dense), 512, replace=False)]

    pred = rng.uniform(-1, 1, size=(512, 32, 3))
    gt = rng.uniform(-1, 1, size=(512, 32, 3))

    return {
        "fps 800 -> 512": (lambda f: f(sparse, 512, 0), kernels.fps_numpy, kernels.fps_numba),
        "bin select 50k": (lambda f: f(keys, ranges), kernels.select_nearest_per_bin_numpy,
                           kernels.select_nearest_per_bin_numba),
        "raycast 288k rays": (lambda f: f(origin, dirs, synth.ground_z, boxes, spheres, synth.max_range),
                              kernels.raycast_numpy, kernels.raycast_numba),
        "radius query 512 in 50k": (lambda f: f(grid.points, grid.order, grid.sorted_keys, grid.lo, grid.dims,
                                                grid.cell, queries, 1.2),
                                    kernels.radius_query_numpy, kernels.radius_query_numba),
        "group chamfer 512x32": (lambda f: f(pred, gt), kernels.group_chamfer_numpy, kernels.group_chamfer_numba),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", action="store_true", help="one JSON object per kernel on stdout")
    args = ap.parse_args()

    if not kernels.HAS_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    rows = []
    for name, (call, np_fn, nb_fn) in cases(np.random.default_rng(0)).items():
        call(nb_fn)  # compile (or load from cache) outside the timing
        t_np = best_of(lambda: call(np_fn), args.repeat)
        t_nb = best_of(lambda: call(nb_fn), args.repeat)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb})

    if args.json:
        for r in rows:
            print(json.dumps(r))
        return
    print(f"{'kernel':<26}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<26}{1e3 * r['numpy_s']:>12.2f}{1e3 * r['numba_s']:>12.2f}{r['speedup']:>9.1f}x")


if __name__ == "__main__":
    main()
