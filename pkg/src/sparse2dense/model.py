"""Image + query-point encoder-decoder that predicts a local point group per query.

Pipeline: zero-pad the image and cut it into square patches, turn each patch
into a token with a small VGG-style CNN whose pooled stages are skip-pooled
and concatenated, run a post-norm transformer encoder over the patch tokens,
decode Fourier-embedded query points against that memory, and map every
decoder token to ``k_out`` normalised points with a tanh-bounded MLP.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import neural as nn
from .neural import Parameter, Tensor

log = logging.getLogger(__name__)

REFERENCE_K_OUT = (32, 64)


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 32
    token_dim: int = 256
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 8
    ffn_dim: Optional[int] = None  # defaults to 4 * token_dim
    k_out: int = 32
    dropout_main: float = 0.1
    dropout_dec: float = 0.3
    fourier_bands: Optional[int] = None  # defaults to token_dim // 2
    fourier_sigma: float = 1.0
    fourier_seed: int = 0
    patch_fourier_sigma: float = 4.0
    cnn_widths: tuple = (32, 64, 128, 256)
    in_channels: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.token_dim)
        if self.fourier_bands is None:
            object.__setattr__(self, "fourier_bands", self.token_dim // 2)
        object.__setattr__(self, "cnn_widths", tuple(int(c) for c in self.cnn_widths))
        if self.token_dim % self.heads:
            raise ValueError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if 2 * self.fourier_bands != self.token_dim:
            raise ValueError("fourier_bands must equal token_dim / 2")
        if self.token_dim % len(self.cnn_widths):
            raise ValueError("token_dim must split evenly across the CNN skip branches")
        if self.patch_size % (2 ** len(self.cnn_widths)):
            raise ValueError("patch_size must be divisible by 2**len(cnn_widths)")
        if self.k_out not in REFERENCE_K_OUT:
            log.info("k_out=%d differs from the published settings %s", self.k_out, REFERENCE_K_OUT)

    @property
    def skip_dim(self) -> int:
        return self.token_dim // len(self.cnn_widths)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cnn_widths"] = list(self.cnn_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "cnn_widths" in d:
            d["cnn_widths"] = tuple(d["cnn_widths"])
        return cls(**d)


class ModelWeights:
    """Named parameter collection plus the config that shaped it."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Parameter]"):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def trainable(self):
        return [p for p in self.params.values() if not p.frozen]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self, trainable_only: bool = True) -> int:
        ps = self.trainable() if trainable_only else self.params.values()
        return int(sum(p.data.size for p in ps))


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add(name, arr, frozen=False):
        params[name] = Parameter(np.asarray(arr, dtype=dt), name, frozen=frozen)

    def dense(name, fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        add(name + ".w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        add(name + ".b", np.zeros(fan_out))

    def conv(name, cin, cout, k):
        std = math.sqrt(2.0 / (cin * k * k))
        add(name + ".w", rng.normal(0.0, std, size=(cout, cin, k, k)))
        add(name + ".b", np.zeros(cout))

    def norm(name, d):
        add(name + ".g", np.ones(d))
        add(name + ".b", np.zeros(d))

    def attention(name, d):
        for proj in ("q", "k", "v", "o"):
            dense(f"{name}.{proj}", d, d)

    d = config.token_dim
    cin = config.in_channels
    for s, width in enumerate(config.cnn_widths):
        conv(f"cnn.s{s}.conv0", cin, width, 3)
        conv(f"cnn.s{s}.conv1", width, width, 3)
        dense(f"cnn.s{s}.skip0", width, config.skip_dim)
        dense(f"cnn.s{s}.skip1", config.skip_dim, config.skip_dim)
        cin = width
    dense("pos.proj", d, d)
    for layer in range(config.enc_layers):
        p = f"enc{layer}"
        attention(p + ".attn", d)
        norm(p + ".ln1", d)
        dense(p + ".ffn0", d, config.ffn_dim)
        dense(p + ".ffn1", config.ffn_dim, d)
        norm(p + ".ln2", d)
    for layer in range(config.dec_layers):
        p = f"dec{layer}"
        attention(p + ".self", d)
        norm(p + ".ln1", d)
        attention(p + ".cross", d)
        norm(p + ".ln2", d)
        dense(p + ".ffn0", d, config.ffn_dim)
        dense(p + ".ffn1", config.ffn_dim, d)
        norm(p + ".ln3", d)
    for i, (a, b) in enumerate([(d, d), (d, d), (d, d), (d, 3 * config.k_out)]):
        dense(f"gen.l{i}", a, b)

    frng = np.random.default_rng(config.fourier_seed)
    add("fourier.query_B", frng.normal(0.0, config.fourier_sigma, size=(3, config.fourier_bands)), frozen=True)
    add("fourier.patch_B", frng.normal(0.0, config.patch_fourier_sigma, size=(2, config.fourier_bands)), frozen=True)
    return ModelWeights(config, params)


# --------------------------------------------------------------------------
# image to patch tokens
# --------------------------------------------------------------------------


def patch_grid(h: int, w: int, patch_size: int = 32):
    """``(rows, cols)`` of the patch grid after padding up to a multiple of ``patch_size``."""
    return -(-h // patch_size), -(-w // patch_size)


def pad_and_patch(image: np.ndarray, patch_size: int = 32):
    """Zero-pad bottom/right to a multiple of ``patch_size`` and split row-major.

    Returns ``(patches [P, C, patch, patch], (rows, cols))``.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if h < 1 or w < 1:
        raise ValueError("image must have positive height and width")
    rows, cols = patch_grid(h, w, patch_size)
    padded = np.zeros((rows * patch_size, cols * patch_size, c), dtype=img.dtype)
    padded[:h, :w] = img
    patches = (
        padded.reshape(rows, patch_size, cols, patch_size, c)
        .transpose(0, 2, 4, 1, 3)
        .reshape(rows * cols, c, patch_size, patch_size)
    )
    return patches, (rows, cols)


def patch_features(patches, weights: ModelWeights) -> Tensor:
    """One token per patch: skip-pooled VGG stages concatenated to ``token_dim``."""
    cfg = weights.config
    x = nn.Tensor(np.asarray(patches, dtype=cfg.np_dtype)) if not isinstance(patches, Tensor) else patches
    if x.ndim != 4 or x.shape[2] != cfg.patch_size or x.shape[3] != cfg.patch_size:
        raise nn.ShapeError(f"expected patches [P, C, {cfg.patch_size}, {cfg.patch_size}], got {x.shape}")
    branches = []
    for s in range(len(cfg.cnn_widths)):
        p = f"cnn.s{s}"
        x = nn.relu(nn.conv2d(x, weights[p + ".conv0.w"], weights[p + ".conv0.b"], padding=1))
        x = nn.relu(nn.conv2d(x, weights[p + ".conv1.w"], weights[p + ".conv1.b"], padding=1))
        x = nn.max_pool2d(x)
        v = nn.global_avg_pool(x)
        v = nn.relu(nn.linear(v, weights[p + ".skip0.w"], weights[p + ".skip0.b"]))
        branches.append(nn.linear(v, weights[p + ".skip1.w"], weights[p + ".skip1.b"]))
    return nn.concat(branches, axis=-1)


def fourier_embed(points, B) -> np.ndarray:
    """``concat(sin(2 pi p B), cos(2 pi p B))`` for points [..., dim] and B [dim, bands]."""
    Bm = B.data if isinstance(B, Tensor) else np.asarray(B)
    proj = 2.0 * np.pi * (np.asarray(points, dtype=np.float64) @ Bm.astype(np.float64))
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)


def patch_centers(grid) -> np.ndarray:
    rows, cols = grid
    r, c = np.meshgrid((np.arange(rows) + 0.5) / rows, (np.arange(cols) + 0.5) / cols, indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=-1)


# --------------------------------------------------------------------------
# transformer blocks
# --------------------------------------------------------------------------

AttentionHook = Optional[Callable[[str, np.ndarray], None]]


def _attention(xq, xkv, weights, prefix, heads, rate, training, rng, hook):
    lq, d = xq.shape
    lk = xkv.shape[0]
    dh = d // heads
    q = nn.linear(xq, weights[prefix + ".q.w"], weights[prefix + ".q.b"]).reshape(lq, heads, dh).transpose(1, 0, 2)
    k = nn.linear(xkv, weights[prefix + ".k.w"], weights[prefix + ".k.b"]).reshape(lk, heads, dh).transpose(1, 2, 0)
    v = nn.linear(xkv, weights[prefix + ".v.w"], weights[prefix + ".v.b"]).reshape(lk, heads, dh).transpose(1, 0, 2)
    probs = nn.softmax(nn.scale(q @ k, 1.0 / math.sqrt(dh)), axis=-1)
    if hook is not None:
        hook(prefix, probs.data)
    probs = nn.dropout(probs, rate, training, rng)
    ctx = (probs @ v).transpose(1, 0, 2).reshape(lq, d)
    return nn.linear(ctx, weights[prefix + ".o.w"], weights[prefix + ".o.b"])


def _ffn(x, weights, prefix, rate, training, rng):
    h = nn.relu(nn.linear(x, weights[prefix + ".ffn0.w"], weights[prefix + ".ffn0.b"]))
    h = nn.dropout(h, rate, training, rng)
    return nn.linear(h, weights[prefix + ".ffn1.w"], weights[prefix + ".ffn1.b"])


def _add_norm(x, y, weights, name, rate, training, rng):
    y = nn.dropout(y, rate, training, rng)
    return nn.layer_norm(x + y, weights[name + ".g"], weights[name + ".b"])


def encode(tokens, weights: ModelWeights, training: bool = False, rng=None, grid=None, hook: AttentionHook = None) -> Tensor:
    """Add patch positional embeddings and run the self-attention encoder stack."""
    cfg = weights.config
    x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens, dtype=cfg.np_dtype))
    npatch = x.shape[0]
    if npatch < 1:
        raise ValueError("encoder needs at least one token")
    if grid is None:
        grid = (1, npatch)
    pos = fourier_embed(patch_centers(grid), weights["fourier.patch_B"]).astype(cfg.np_dtype)
    x = x + nn.linear(Tensor(pos), weights["pos.proj.w"], weights["pos.proj.b"])
    rate = cfg.dropout_main
    for layer in range(cfg.enc_layers):
        p = f"enc{layer}"
        x = _add_norm(x, _attention(x, x, weights, p + ".attn", cfg.heads, rate, training, rng, hook), weights, p + ".ln1", rate, training, rng)
        x = _add_norm(x, _ffn(x, weights, p, rate, training, rng), weights, p + ".ln2", rate, training, rng)
    return x


def query_embeddings(queries, weights: ModelWeights) -> np.ndarray:
    return fourier_embed(np.asarray(queries).reshape(-1, 3), weights["fourier.query_B"]).astype(weights.config.np_dtype)


def decode(queries, memory, weights: ModelWeights, training: bool = False, rng=None, hook: AttentionHook = None) -> Tensor:
    """Self-attention among query tokens, cross-attention into the image memory, FFN."""
    cfg = weights.config
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if q.shape[0] < 1:
        raise ValueError("decoder needs at least one query")
    mem = memory if isinstance(memory, Tensor) else Tensor(np.asarray(memory, dtype=cfg.np_dtype))
    x = Tensor(query_embeddings(q, weights))
    rate = cfg.dropout_dec
    for layer in range(cfg.dec_layers):
        p = f"dec{layer}"
        x = _add_norm(x, _attention(x, x, weights, p + ".self", cfg.heads, rate, training, rng, hook), weights, p + ".ln1", rate, training, rng)
        x = _add_norm(x, _attention(x, mem, weights, p + ".cross", cfg.heads, rate, training, rng, hook), weights, p + ".ln2", rate, training, rng)
        x = _add_norm(x, _ffn(x, weights, p, rate, training, rng), weights, p + ".ln3", rate, training, rng)
    return x


def generate_points(point_tokens, weights: ModelWeights) -> Tensor:
    """Four affine layers with ReLU in between and tanh on the output: [n, k_out, 3]."""
    cfg = weights.config
    x = point_tokens if isinstance(point_tokens, Tensor) else Tensor(np.asarray(point_tokens, dtype=cfg.np_dtype))
    if x.shape[-1] != cfg.token_dim:
        raise nn.ShapeError(f"point tokens must have dim {cfg.token_dim}, got {x.shape}")
    for i in range(3):
        x = nn.relu(nn.linear(x, weights[f"gen.l{i}.w"], weights[f"gen.l{i}.b"]))
    x = nn.tanh(nn.linear(x, weights["gen.l3.w"], weights["gen.l3.b"]))
    return x.reshape(x.shape[0], cfg.k_out, 3)


def forward(image, queries, weights: ModelWeights, training: bool = False, rng=None, hook: AttentionHook = None) -> Tensor:
    """Predicted normalised groups [n, k_out, 3] for ``queries`` [n, 3] given ``image`` [H, W, C]."""
    if training and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    patches, grid = pad_and_patch(np.asarray(image, dtype=weights.config.np_dtype), weights.config.patch_size)
    tokens = patch_features(patches, weights)
    memory = encode(tokens, weights, training, rng, grid=grid, hook=hook)
    point_tokens = decode(queries, memory, weights, training, rng, hook=hook)
    return generate_points(point_tokens, weights)


def predict(image, queries, weights: ModelWeights) -> np.ndarray:
    """Eval-mode forward returning a plain float64 array."""
    return forward(image, queries, weights, training=False).data.astype(np.float64)
