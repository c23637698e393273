"""Chamfer-loss training with AdamW, a cosine schedule and global-norm clipping."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from . import neural as nn
from .model import ModelConfig, ModelWeights, forward
from .neural import Parameter, Tape, Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    weight_decay: float = 0.1
    clip_norm: float = 0.1
    steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


def _as_group_batch(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.ascontiguousarray(arr, dtype=np.float64)


def batch_loss(pred_groups, gt_groups) -> Tensor:
    """Mean over groups of the symmetric Chamfer distance; differentiable in ``pred_groups``."""
    pred = pred_groups if isinstance(pred_groups, Tensor) else Tensor(np.asarray(pred_groups, dtype=np.float64))
    p64 = _as_group_batch(pred)
    g64 = _as_group_batch(gt_groups)
    if p64.ndim != 3 or g64.ndim != 3 or p64.shape[0] != g64.shape[0] or p64.shape[2] != 3 or g64.shape[2] != 3:
        raise nn.ShapeError(f"group shapes do not match: {p64.shape} vs {g64.shape}")
    if p64.shape[1] == 0 or g64.shape[1] == 0:
        raise ValueError("Chamfer distance of an empty set")
    if p64.shape[0] == 0:
        raise ValueError("no groups")
    per_group, nn_pred, nn_gt = kernels.group_chamfer(p64, g64)
    nn.record_branch(nn_pred)
    nn.record_branch(nn_gt)
    n = p64.shape[0]
    value = np.asarray(per_group.mean(), dtype=pred.dtype)

    def vjp(g):
        grad = kernels.group_chamfer_grad(p64, g64, nn_pred, nn_gt) * (float(g) / n)
        return (grad.astype(pred.dtype),)

    return nn._make(value, (pred,), vjp)


def chamfer_loss(pred, gt) -> Tensor:
    """Symmetric Chamfer distance between two point sets [k, 3]."""
    if isinstance(pred, Tensor):
        return batch_loss(pred.reshape(1, *pred.shape), np.asarray(gt)[None])
    return batch_loss(np.asarray(pred, dtype=np.float64)[None], np.asarray(gt)[None])


# --------------------------------------------------------------------------
# optimisation primitives
# --------------------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_final: float) -> float:
    if total_steps <= 0:
        return lr_init
    step = min(max(step, 0), total_steps)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * step / total_steps))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], clip_norm: float = 0.1):
    """Rescale all gradients together so their joint L2 norm is at most ``clip_norm``.

    Returns ``(clipped, norm_before)``.
    """
    norm = global_norm(grads)
    if norm > clip_norm:
        factor = clip_norm / norm
        return [g * g.dtype.type(factor) for g in grads], norm
    return list(grads), norm


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Sequence[Parameter], state: AdamState, step_index: int, config: TrainConfig) -> float:
    """One decoupled-weight-decay Adam update using each parameter's ``.grad``.

    The learning rate comes from :func:`cosine_lr` at ``step_index``; it is returned.
    """
    lr = cosine_lr(step_index, config.steps, config.lr_init, config.lr_final)
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p in params:
        if p.frozen:
            continue
        g = p.grad
        if g.shape != p.data.shape:
            raise nn.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {p.name}")
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[p.name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        data = p.data
        if config.weight_decay:
            data = data - (lr * config.weight_decay) * data
        update = (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        p.data = (data - lr * update).astype(p.dtype, copy=False)
    return lr


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


@dataclass
class TrainSample:
    image: np.ndarray
    queries: np.ndarray  # (n, 3) metres
    gt_groups: np.ndarray  # (n, k, 3) normalised
    id: str = ""


@dataclass
class TrainResult:
    weights: ModelWeights
    state: AdamState
    history: list  # rows of (step, lr, loss)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[2] for row in self.history])


def train_step(sample: TrainSample, weights: ModelWeights, state: AdamState, step: int, config: TrainConfig):
    """forward -> loss -> backward -> clip -> AdamW. Returns ``(loss, lr, grad_norm)``."""
    rng = np.random.default_rng([config.seed, step])
    params = weights.trainable()
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        pred = forward(sample.image, sample.queries, weights, training=True, rng=rng)
        loss = batch_loss(pred, sample.gt_groups)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {step} (scene {sample.id!r})")
    tape.backward(loss)
    clipped, norm = clip_global_norm([p.grad for p in params], config.clip_norm)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm at step {step} (scene {sample.id!r})")
    for p, g in zip(params, clipped):
        p.grad = g
    lr = adamw_step(params, state, step, config)
    return value, lr, norm


def train(
    dataset: Sequence[TrainSample],
    weights: ModelWeights,
    config: TrainConfig,
    state: Optional[AdamState] = None,
    start_step: int = 0,
    stop_step: Optional[int] = None,
    callback: Optional[Callable[[int, float, float], None]] = None,
) -> TrainResult:
    """Run steps ``start_step .. stop_step`` (default ``config.steps``) in place on ``weights``.

    Step ``s`` uses scene ``s % len(dataset)`` and a dropout generator seeded
    with ``(config.seed, s)``, so a run resumed from a checkpoint follows the
    same trajectory as an uninterrupted one.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    state = state if state is not None else AdamState()
    stop = config.steps if stop_step is None else stop_step
    history = []
    for step in range(start_step, stop):
        sample = dataset[step % len(dataset)]
        loss, lr, _ = train_step(sample, weights, state, step, config)
        history.append((step, lr, loss))
        if callback is not None:
            callback(step, lr, loss)
    return TrainResult(weights, state, history)


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in history:
            w.writerow([step, repr(float(lr)), repr(float(loss))])


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"S2DCKPT\x00"
VERSION = 1
_ROLE = {"weight": 0, "adam_m": 1, "adam_v": 2}
_ROLE_NAME = {v: k for k, v in _ROLE.items()}
_DTYPE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPE_CODE = {v: k for k, v in _DTYPE.items()}


@dataclass
class Checkpoint:
    weights: ModelWeights
    state: AdamState
    step: int
    train_config: Optional[TrainConfig] = None
    extra: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return self.weights.config


def _write_tensor(buf, name: str, role: str, arr: np.ndarray):
    dt = np.dtype(arr.dtype).newbyteorder("<")
    if dt not in _DTYPE:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BBB", _ROLE[role], _DTYPE[dt], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def save_checkpoint(path, weights: ModelWeights, state: Optional[AdamState] = None, step: int = 0,
                    train_config: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> None:
    """Binary checkpoint: header, JSON configs, then little-endian tensors (f32 unless the model is f64)."""
    meta = {
        "model_config": weights.config.to_dict(),
        "train_config": dataclasses.asdict(train_config) if train_config is not None else None,
        "adam_step": state.step if state is not None else 0,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = [(name, "weight", p.data) for name, p in weights.params.items()]
    if state is not None:
        tensors += [(name, "adam_m", arr) for name, arr in sorted(state.m.items())]
        tensors += [(name, "adam_v", arr) for name, arr in sorted(state.v.items())]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<Q", step))
    buf.write(struct.pack("<I", len(tensors)))
    for name, role, arr in tensors:
        _write_tensor(buf, name, role, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (jlen,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(jlen)).decode("utf-8"))
    (step,) = struct.unpack("<Q", take(8))
    (count,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_dict(meta["model_config"])
    params, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        role, dcode, ndim = struct.unpack("<BBB", take(3))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPE_CODE.get(dcode)
        if dt is None or role not in _ROLE_NAME:
            raise CheckpointError(f"{path}: bad tensor header for {name}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        {0: params, 1: m, 2: v}[role][name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensors")

    from .model import init_weights

    weights = init_weights(config, seed=0)
    for name, p in weights.params.items():
        if name not in params:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if params[name].shape != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        p.data = params[name].astype(config.np_dtype, copy=False)
        p.zero_grad()
    tc = meta.get("train_config")
    state = AdamState(m=m, v=v, step=int(meta.get("adam_step", 0)))
    return Checkpoint(weights, state, int(step), TrainConfig(**tc) if tc else None, meta.get("extra", {}))
