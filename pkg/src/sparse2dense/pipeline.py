"""Glue between modules: configs, per-scene sample building, reconstruction, manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import platform
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from .data_io import Scene
from .errors import FormatError
from .evaluation import assemble_scene
from .geometry import PointCloud, frustum_crop
from .lidar_sim import DownsampleSpec, LidarSpec, simulate_low_res
from .model import ModelConfig, ModelWeights, forward, init_weights, predict
from .neural import gradient_check
from .sampling import DEFAULT_RADIUS, extract_groups, select_queries
from .training import TrainConfig, TrainSample, batch_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingConfig:
    n: int = 512
    k: int = 32
    radius: float = DEFAULT_RADIUS
    method: str = "fps"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.k < 1:
            raise ValueError("n and k must be positive")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.method not in ("fps", "rps"):
            raise ValueError(f"unknown sampling method {self.method!r}")


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lidar: LidarSpec = field(default_factory=LidarSpec)
    downsample: DownsampleSpec = field(default_factory=DownsampleSpec)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "lidar": dataclasses.asdict(self.lidar),
            "downsample": dataclasses.asdict(self.downsample),
            "sampling": dataclasses.asdict(self.sampling),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - {"model", "train", "lidar", "downsample", "sampling"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                model=ModelConfig.from_dict(d.get("model", {})),
                train=TrainConfig(**d.get("train", {})),
                lidar=LidarSpec(**d.get("lidar", {})),
                downsample=DownsampleSpec(**d.get("downsample", {})),
                sampling=SamplingConfig(**d.get("sampling", {})),
            )
        except TypeError as exc:
            raise ValueError(f"bad config: {exc}") from None

    def replace(self, **sections) -> "PipelineConfig":
        return dataclasses.replace(self, **sections)


def load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return PipelineConfig.from_dict(data)


def reduced_model_config(**overrides) -> ModelConfig:
    """Small float64 model used for gradient checks."""
    base = dict(
        token_dim=32, enc_layers=1, dec_layers=1, heads=2, k_out=4,
        dropout_main=0.0, dropout_dec=0.0, cnn_widths=(4, 4, 8, 8), dtype="float64",
    )
    base.update(overrides)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# per-scene data
# --------------------------------------------------------------------------


@dataclass
class SceneSample:
    sample: TrainSample
    sparse: PointCloud
    dense_gt: PointCloud  # frustum-cropped dense cloud
    source_indices: np.ndarray
    valid_counts: np.ndarray


def sparse_input(scene: Scene, cfg: PipelineConfig) -> PointCloud:
    return simulate_low_res(scene.dense_cloud, scene.calib, scene.img_w, scene.img_h, cfg.lidar, cfg.downsample)


def dense_ground_truth(scene: Scene) -> PointCloud:
    return frustum_crop(scene.dense_cloud, scene.calib, scene.img_w, scene.img_h)


def build_sample(scene: Scene, cfg: PipelineConfig) -> SceneSample:
    """Sparse input, query selection and normalised ground-truth groups for one scene."""
    sparse = sparse_input(scene, cfg)
    dense = dense_ground_truth(scene)
    s = cfg.sampling
    qs = select_queries(sparse, s.n, s.method, s.seed)
    kept, groups, valid = extract_groups(dense, qs.queries, s.k, s.radius, s.seed)
    if kept.size == 0:
        raise ValueError(f"scene {scene.id}: no query has dense neighbours")
    sample = TrainSample(scene.image, qs.queries[kept], groups, scene.id)
    return SceneSample(sample, sparse, dense, qs.source_indices[kept], valid)


def reconstruct(scene: Scene, weights: ModelWeights, cfg: PipelineConfig, sparse: Optional[PointCloud] = None):
    """Returns ``(assembled cloud, queries)`` for a scene."""
    if sparse is None:
        sparse = sparse_input(scene, cfg)
    s = cfg.sampling
    qs = select_queries(sparse, s.n, s.method, s.seed)
    groups = predict(scene.image, qs.queries, weights)
    return assemble_scene(groups, qs.queries, s.radius), qs.queries


# --------------------------------------------------------------------------
# sample container
# --------------------------------------------------------------------------

SAMPLE_MAGIC = b"S2DQ"
SAMPLE_VERSION = 1
_SAMPLE_HEADER = struct.Struct("<4sIIIf")


def write_samples(path, queries, source_indices, groups, valid_counts, radius: float) -> None:
    """Little-endian container: header (magic, version, n, k, radius) then one f32 record per group.

    Record layout: ``qx qy qz source_index valid_count`` followed by ``k*3`` normalised coordinates.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(groups, dtype=np.float64)
    n, k = g.shape[0], g.shape[1] if g.ndim == 3 else 0
    rec = np.column_stack([q, np.asarray(source_indices, float), np.asarray(valid_counts, float), g.reshape(n, -1)])
    Path(path).write_bytes(_SAMPLE_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, n, k, radius) + rec.astype("<f4").tobytes())


def read_samples(path):
    """Returns ``(queries, source_indices, groups, valid_counts, radius)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _SAMPLE_HEADER.size:
        raise FormatError(f"{path}: truncated sample header")
    magic, version, n, k, radius = _SAMPLE_HEADER.unpack_from(raw)
    if magic != SAMPLE_MAGIC or version != SAMPLE_VERSION:
        raise FormatError(f"{path}: not a sample file")
    width = 5 + 3 * k
    body = raw[_SAMPLE_HEADER.size :]
    if len(body) != 4 * n * width:
        raise FormatError(f"{path}: expected {n} records of {width} floats")
    rec = np.frombuffer(body, dtype="<f4").reshape(n, width).astype(np.float64)
    return rec[:, :3], rec[:, 3].astype(np.int64), rec[:, 5:].reshape(n, k, 3), rec[:, 4].astype(np.int64), float(radius)


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GradcheckResult:
    max_rel_error: float
    n_coords: int
    n_skipped: int
    per_param: list  # (name, worst error, probed, skipped)
    seconds: float


def run_gradcheck(model_cfg: Optional[ModelConfig] = None, n: int = 3, seed: int = 0, image_hw=(64, 64),
                  max_coords_per_param: Optional[int] = 16, epsilon: float = 1e-3) -> GradcheckResult:
    """Full model + Chamfer loss against central differences on a random image and queries."""
    cfg = model_cfg if model_cfg is not None else reduced_model_config()
    if cfg.dtype != "float64":
        log.warning("gradient check in %s; float64 is recommended", cfg.dtype)
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    weights = init_weights(cfg, seed)
    image = rng.uniform(0.0, 1.0, size=(*image_hw, cfg.in_channels))
    queries = rng.uniform(-5.0, 5.0, size=(n, 3))
    gt = rng.uniform(-1.0, 1.0, size=(n, cfg.k_out, 3))

    def loss_fn(_):
        return batch_loss(forward(image, queries, weights, training=False), gt)

    worst, report = gradient_check(loss_fn, weights.trainable(), None, epsilon=epsilon,
                                   max_coords_per_param=max_coords_per_param, seed=seed, details=True)
    return GradcheckResult(worst, sum(r[2] for r in report), sum(r[3] for r in report), report,
                           time.perf_counter() - t0)


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_inputs(paths: Sequence) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file() and not q.name.endswith(".manifest.json")):
                out[str(f)] = sha256_file(f)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return out


def write_manifest(path, command: str, argv: List[str], config: dict, seed, inputs: Sequence, outputs: Sequence,
                   started: float, extra: Optional[dict] = None) -> dict:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "elapsed_s": round(time.time() - started, 3),
        "inputs": hash_inputs(inputs),
        "outputs": [str(p) for p in outputs],
        "backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
