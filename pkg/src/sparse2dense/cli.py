"""``sparse2dense`` command line: synth, downsample, sample, train, reconstruct, eval, gradcheck, replay.

Machine-readable results go to stdout as JSON lines; human-readable text and
logs go to stderr. Exit codes: 0 ok, 1 usage, 2 data/format error, 3 numeric
failure. Log level comes from ``SPARSE2DENSE_LOG`` (default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data_io, pipeline
from .errors import FormatError
from .evaluation import average_precision, parse_kitti_objects, reconstruction_report, restrict_to_support
from .geometry import GeometryError, PointCloud, frustum_crop
from .lidar_sim import DownsampleSpec, LidarSpec, downsample_frame
from .model import init_weights
from .sampling import DEFAULT_RADIUS, InsufficientPointsError, extract_groups, select_queries
from .training import CheckpointError, NumericError, TrainSample, load_checkpoint, save_checkpoint, train, write_loss_csv

log = logging.getLogger("sparse2dense")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, default=_json_default) + "\n")
    sys.stdout.flush()


def say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _write_cloud(cloud: PointCloud, path) -> None:
    if Path(path).suffix == ".ply":
        data_io.write_ply(cloud, path)
    else:
        data_io.write_velodyne_bin(cloud, path)


def _check_crop_flags(args) -> None:
    if args.calib and not (args.img_w and args.img_h):
        raise UsageError("--calib needs --img-w and --img-h")


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    t0 = time.time()
    if args.scenes < 0:
        raise UsageError("--scenes must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lidar = LidarSpec()
    ids = []
    for i in range(args.scenes):
        spec = data_io.SynthSpec(seed=args.seed + i, n_objects=args.objects, image_w=args.img_w, image_h=args.img_h)
        scene = data_io.synth_scene(spec, lidar, sid=f"{i:06d}")
        data_io.write_scene(scene, out)
        ids.append(scene.id)
        say(f"scene {scene.id}: {len(scene.dense_cloud)} points, {len(scene.boxes)} objects")
    pipeline.write_manifest(
        out / "manifest.json", "synth", argv,
        {"scenes": args.scenes, "objects": args.objects, "img_w": args.img_w, "img_h": args.img_h, "lidar": dataclasses.asdict(lidar)},
        args.seed, [], [str(out)], t0, {"scene_ids": ids},
    )
    emit({"event": "synth", "out": str(out), "scenes": len(ids)})
    return EXIT_OK


def cmd_downsample(args, argv) -> int:
    t0 = time.time()
    _check_crop_flags(args)
    cloud = data_io.read_cloud(args.inp)
    n_in = len(cloud)
    if args.calib:
        cloud = frustum_crop(cloud, data_io.read_calib(args.calib), args.img_w, args.img_h)
    n_crop = len(cloud)
    lidar = LidarSpec()
    ds = DownsampleSpec(args.beam_stride, args.azim_stride, args.noise, args.seed)
    out_cloud = downsample_frame(cloud, lidar, ds)
    _write_cloud(out_cloud, args.out)
    pipeline.write_manifest(
        _manifest_path(args.out), "downsample", argv,
        {"lidar": dataclasses.asdict(lidar), "downsample": dataclasses.asdict(ds), "img_w": args.img_w, "img_h": args.img_h},
        args.seed, [p for p in (args.inp, args.calib) if p], [args.out], t0,
    )
    say(f"input {n_in} points, after crop {n_crop}, output {len(out_cloud)}")
    emit({"event": "downsample", "input_points": n_in, "cropped_points": n_crop, "output_points": len(out_cloud)})
    return EXIT_OK


def cmd_sample(args, argv) -> int:
    t0 = time.time()
    _check_crop_flags(args)
    sparse = data_io.read_cloud(args.inp)
    dense = data_io.read_cloud(args.dense)
    if args.calib:
        dense = frustum_crop(dense, data_io.read_calib(args.calib), args.img_w, args.img_h)
    qs = select_queries(sparse, args.n, args.method, args.seed)
    kept, groups, valid = extract_groups(dense, qs.queries, args.k, args.radius, args.seed)
    pipeline.write_samples(args.out, qs.queries[kept], qs.source_indices[kept], groups, valid, args.radius)
    cfg = {"n": args.n, "k": args.k, "radius": args.radius, "method": args.method}
    pipeline.write_manifest(_manifest_path(args.out), "sample", argv, cfg, args.seed,
                            [p for p in (args.inp, args.dense, args.calib) if p], [args.out], t0)
    say(f"{len(kept)} groups of {args.k} ({args.n - len(kept)} dropped)")
    emit({"event": "sample", "groups": int(len(kept)), "k": args.k, "dropped": int(args.n - len(kept)),
          "method": args.method, "first_indices": qs.source_indices[:8].tolist()})
    return EXIT_OK


def _load_samples(data: Path, cfg: pipeline.PipelineConfig) -> List[TrainSample]:
    ids = data_io.scene_ids(data)
    if not ids:
        raise FileNotFoundError(f"no scenes under {data / data_io.CLOUD_DIR}")
    samples = []
    for sid in ids:
        scene = data_io.read_scene(data, sid)
        pre = data / "samples" / f"{sid}.s2dq"
        if pre.exists():
            q, _, groups, _, _ = pipeline.read_samples(pre)
            samples.append(TrainSample(scene.image, q, groups, sid))
        else:
            samples.append(pipeline.build_sample(scene, cfg).sample)
    return samples


def cmd_train(args, argv) -> int:
    t0 = time.time()
    cfg = pipeline.load_config(args.config)
    steps = args.steps if args.steps is not None else cfg.train.steps
    cfg = cfg.replace(train=dataclasses.replace(cfg.train, steps=steps))
    data = Path(args.data)
    samples = _load_samples(data, cfg)
    if args.resume:
        ck = load_checkpoint(args.resume)
        weights, state, start = ck.weights, ck.state, ck.step
        if ck.weights.config != cfg.model:
            raise UsageError("--resume checkpoint model config differs from --config")
    else:
        weights, state, start = init_weights(cfg.model, cfg.train.seed), None, 0
    every = max(1, args.log_every)

    def progress(step, lr, loss):
        if step % every == 0 or step == steps - 1:
            say(f"step {step:6d}  lr {lr:.3e}  loss {loss:.6f}")
            emit({"event": "step", "step": step, "lr": lr, "loss": loss})

    result = train(samples, weights, cfg.train, state, start_step=start, stop_step=steps, callback=progress)
    out = Path(args.out)
    csv_path = out.with_name(out.name + ".loss.csv")
    save_checkpoint(out, result.weights, result.state, steps, cfg.train, {"pipeline": cfg.to_dict()})
    write_loss_csv(result.history, csv_path)
    pipeline.write_manifest(_manifest_path(out), "train", argv, cfg.to_dict(), cfg.train.seed,
                            [data] + ([args.config] if args.config else []) + ([args.resume] if args.resume else []),
                            [out, csv_path], t0, {"start_step": start, "stop_step": steps})
    losses = result.losses
    emit({"event": "train", "checkpoint": str(out), "steps": steps,
          "first_loss": float(losses[0]) if losses.size else None,
          "final_loss": float(losses[-1]) if losses.size else None})
    return EXIT_OK


def _pipeline_from_ckpt(ck, override: Optional[str]) -> pipeline.PipelineConfig:
    if override:
        cfg = pipeline.load_config(override)
        return cfg.replace(model=ck.weights.config)
    d = ck.extra.get("pipeline")
    if d:
        return pipeline.PipelineConfig.from_dict(d)
    return pipeline.PipelineConfig(model=ck.weights.config)


def cmd_reconstruct(args, argv) -> int:
    t0 = time.time()
    ck = load_checkpoint(args.ckpt)
    cfg = _pipeline_from_ckpt(ck, args.config)
    ids = data_io.scene_ids(args.scene)
    sid = args.id if args.id is not None else (ids[0] if ids else None)
    if sid is None:
        raise FileNotFoundError(f"no scenes under {args.scene}")
    scene = data_io.read_scene(args.scene, sid)
    cloud, queries = pipeline.reconstruct(scene, ck.weights, cfg)
    data_io.write_ply(cloud, args.out)
    outputs = [args.out]
    if args.queries_out:
        data_io.write_ply(PointCloud(queries), args.queries_out)
        outputs.append(args.queries_out)
    pipeline.write_manifest(_manifest_path(args.out), "reconstruct", argv, cfg.to_dict(), cfg.sampling.seed,
                            [args.ckpt, args.scene], outputs, t0, {"scene_id": sid})
    say(f"scene {sid}: {len(queries)} queries -> {len(cloud)} points")
    emit({"event": "reconstruct", "scene": sid, "queries": len(queries), "points": len(cloud), "out": args.out})
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    t0 = time.time()
    _check_crop_flags(args)
    if bool(args.dets) != bool(args.labels):
        raise UsageError("--dets and --labels go together")
    pred = data_io.read_cloud(args.pred)
    gt = data_io.read_cloud(args.gt)
    if args.calib:
        gt = frustum_crop(gt, data_io.read_calib(args.calib), args.img_w, args.img_h)
    if args.support:
        gt = restrict_to_support(gt, data_io.read_cloud(args.support), args.radius)
        if len(gt) == 0:
            raise ValueError("no ground-truth point lies within --radius of the support points")
    rep = reconstruction_report(pred, gt)
    say(f"{'metric':<10}{'value':>14}")
    say(f"{'chamfer':<10}{rep.chamfer:>14.6f}")
    say(f"{'psnr':<10}{rep.psnr:>14.4f}")
    say(f"{'pred pts':<10}{rep.n_points_pred:>14d}")
    say(f"{'gt pts':<10}{rep.n_points_gt:>14d}")
    emit({"event": "reconstruction_report", **rep.to_json()})
    result = {"report": rep.to_json()}
    if args.dets:
        dets = parse_kitti_objects(Path(args.dets).read_text(), with_score=True)
        gts = [d.box for d in parse_kitti_objects(Path(args.labels).read_text())]
        ap = average_precision(dets, gts, args.iou)
        say(f"{'AP3D@' + str(args.iou):<10}{ap:>14.4f}")
        emit({"event": "average_precision", "ap": ap, "iou": args.iou, "detections": len(dets), "gts": len(gts)})
        result["ap"] = ap
    inputs = [p for p in (args.pred, args.gt, args.calib, args.support, args.dets, args.labels) if p]
    if args.manifest:
        cfg = {"iou": args.iou, "support_radius": args.radius if args.support else None}
        pipeline.write_manifest(args.manifest, "eval", argv, cfg, None, inputs, [], t0, result)
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    if args.config:
        d = json.loads(Path(args.config).read_text())
        model_cfg = pipeline.reduced_model_config(**d.get("model", {}))
    else:
        model_cfg = pipeline.reduced_model_config()
    res = pipeline.run_gradcheck(model_cfg, n=args.n, seed=args.seed, max_coords_per_param=args.coords or None,
                                 epsilon=args.epsilon)
    ok = res.max_rel_error < GRADCHECK_TOL
    say(f"max relative error {res.max_rel_error:.3e} over {res.n_coords} coordinates "
        f"({res.n_skipped} straddled a kink) in {res.seconds:.1f}s: {'ok' if ok else 'FAILED'}")
    emit({"event": "gradcheck", "max_rel_error": res.max_rel_error, "coords": res.n_coords,
          "skipped": res.n_skipped, "seconds": res.seconds, "ok": ok})
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_replay(args, argv) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        old = manifest["argv"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{args.manifest}: not a run manifest ({exc})") from None
    if old and old[0] == "replay":
        raise UsageError("refusing to replay a replay")
    say("replaying: sparse2dense " + " ".join(old))
    return main(old)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparse2dense", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic KITTI-layout dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--objects", type=int, default=4)
    s.add_argument("--img-w", type=int, default=416)
    s.add_argument("--img-h", type=int, default=160)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("downsample", help="simulate a low-resolution LiDAR frame")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--calib")
    s.add_argument("--img-w", type=int)
    s.add_argument("--img-h", type=int)
    s.add_argument("--beam-stride", type=int, default=8)
    s.add_argument("--azim-stride", type=int, default=8)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_downsample)

    s = sub.add_parser("sample", help="select queries and extract ground-truth groups")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--dense", required=True)
    s.add_argument("--calib")
    s.add_argument("--img-w", type=int)
    s.add_argument("--img-h", type=int)
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--k", type=int, default=32)
    s.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    s.add_argument("--method", choices=("fps", "rps"), default="fps")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("train", help="train on a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--steps", type=int)
    s.add_argument("--resume")
    s.add_argument("--log-every", type=int, default=50)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="densify one scene with a trained checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True, help="dataset directory")
    s.add_argument("--id")
    s.add_argument("--config", help="override lidar/downsample/sampling sections")
    s.add_argument("--out", required=True)
    s.add_argument("--queries-out")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", help="reconstruction metrics and optional AP")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--calib")
    s.add_argument("--img-w", type=int)
    s.add_argument("--img-h", type=int)
    s.add_argument("--support", help="score only gt points within --radius of these points (e.g. the queries)")
    s.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    s.add_argument("--dets")
    s.add_argument("--labels")
    s.add_argument("--iou", type=float, default=0.7)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the reduced model")
    s.add_argument("--config", help="JSON whose model section overrides the reduced config")
    s.add_argument("--n", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--coords", type=int, default=16, help="probed coordinates per tensor (0 = all)")
    s.add_argument("--epsilon", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("SPARSE2DENSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        say(f"error: {exc}")
        return EXIT_USAGE
    except NumericError as exc:
        say(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (FormatError, CheckpointError, InsufficientPointsError, GeometryError, OSError, ValueError) as exc:
        say(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
