"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when any
input requires a gradient. Outside a tape nothing is recorded, which is how
inference and finite-difference probes run::

    with Tape() as tape:
        loss = mean(mul(x, x))
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named leaf tensor owned by a model; ``frozen`` ones never receive gradients."""

    def __init__(self, data, name: str, frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self.frozen = bool(frozen)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record_branch(arr) -> None:
    """Log a piecewise-branch choice (ReLU signs, argmax, nearest neighbours).

    A no-op unless :func:`gradient_check` is listening; it uses the log to
    spot finite-difference probes that straddle a kink.
    """
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(np.asarray(arr).tobytes())


def _branches_of(fn, arg):
    _state.branches = []
    try:
        value = float(fn(arg).data)
        return value, _state.branches
    finally:
        _state.branches = None


class Tape:
    """Records forward operations; :meth:`backward` replays them in reverse once."""

    def __init__(self):
        self.nodes: list = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def record(self, out: Tensor, parents: Sequence[Tensor], vjp: Callable):
        self.nodes.append((out, parents, vjp))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError("backward without an explicit gradient needs a scalar loss")
            grad = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        leaves = {}
        for out, parents, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = vjp(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p._leaf:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads.pop(key).astype(leaf.dtype, copy=False)
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad = leaf.grad + g
        if loss._leaf and loss.requires_grad:
            loss.grad = grads.get(id(loss))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(value: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=rg)
    out._leaf = False
    if rg:
        tape = active_tape()
        if tape is not None:
            tape.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(a, b):
    a, b = _t(a), _t(b)
    # plain Python/0-d constants adopt the tensor dtype
    if a.data.ndim == 0 and not a.requires_grad and b.data.dtype != a.data.dtype:
        a = Tensor(a.data.astype(b.dtype))
    if b.data.ndim == 0 and not b.requires_grad and a.data.dtype != b.data.dtype:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x, c: float) -> Tensor:
    """Multiply by a non-differentiable scalar constant."""
    x = _t(x)
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    record_branch(mask)
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    """Hyperbolic tangent kept strictly inside (-1, 1) even where it rounds to +-1."""
    x = _t(x)
    top = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    y = np.clip(np.tanh(x.data), -top, top)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def sin(x) -> Tensor:
    x = _t(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = _t(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def exp(x) -> Tensor:
    x = _t(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


# --------------------------------------------------------------------------
# shape and reductions
# --------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _t(x)
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes=None) -> Tensor:
    x = _t(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _t(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _t(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / count)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def take_rows(x, idx) -> Tensor:
    """``x[idx]`` along the first axis."""
    x = _t(x)
    idx = np.asarray(idx)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), vjp)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics for 2-D operands, equal-batch stacks, or stack @ matrix."""
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --------------------------------------------------------------------------
# normalisation, activation, regularisation
# --------------------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = _t(x)
    with np.errstate(over="ignore"):  # max - (-huge) may overflow to -inf; exp gives 0
        z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp)


def layer_norm(x, gain, bias, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` then apply ``gain`` and ``bias``."""
    x, gain, bias = _t(x), _t(gain), _t(bias)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gshape = [1] * x.ndim
    gshape[axis] = x.shape[axis]
    gb = gain.data.reshape(gshape)
    y = xhat * gb + bias.data.reshape(gshape)

    def vjp(g):
        dxhat = g * gb
        dx = inv * (
            dxhat
            - dxhat.mean(axis=axis, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        )
        red = tuple(i for i in range(x.ndim) if i != axis % x.ndim)
        dgain = (g * xhat).sum(axis=red).reshape(gain.shape)
        dbias = g.sum(axis=red).reshape(bias.shape)
        return dx, dgain, dbias

    return _make(y.astype(x.dtype, copy=False), (x, gain, bias), vjp)


def dropout(x, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate`` is 0.

    ``rng`` may be a ``numpy.random.Generator`` or an integer seed.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    x = _t(x)
    if not training or rate == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# convolution and pooling (NCHW; a missing batch axis is added and removed)
# --------------------------------------------------------------------------


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B, C, H, W] (or [C, H, W]) with ``kernels`` [O, C, kh, kw]."""
    x, kernels = _t(x), _t(kernels)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] and [O,C,kh,kw], got {x.shape}, {kernels.shape}")
    nb, c, h, w = x.shape
    o, c2, kh, kw = kernels.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernels {c2}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(nb * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(nb, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, kernels]
    if bias is not None:
        bias = _t(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (g2.T @ cols).reshape(kernels.shape)
        gcols = (g2 @ wmat).reshape(nb, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        res = [gx, gk]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    y = _make(out, tuple(parents), vjp)
    return reshape(y, y.shape[1:]) if squeeze else y


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    x = _t(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    nb, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(nb, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    record_branch(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(nb, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, h, w)
        return (gx,)

    y = _make(out, (x,), vjp)
    return reshape(y, y.shape[1:]) if squeeze else y


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing spatial axes."""
    return mean(x, axis=(-2, -1))


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------


def gradient_check(
    model_fn: Callable,
    params: Iterable[Tensor],
    input=None,
    epsilon: float = 1e-3,
    max_coords_per_param: Optional[int] = None,
    seed: int = 0,
    details: bool = False,
    min_epsilon: float = 1e-7,
):
    """Largest relative error between tape gradients and central differences.

    ``model_fn(input)`` must return a deterministic scalar :class:`Tensor`.
    The relative error per coordinate is ``|fd - ad| / max(|fd|, |ad|, 1e-8)``.
    ``max_coords_per_param`` limits the probe to a seeded random subset of
    coordinates in each tensor.

    A difference quotient is only meaningful when both probes stay on the
    same smooth piece as the unperturbed point. Probes whose branch log
    (see :func:`record_branch`) differs from the base are retried with a
    halved step down to ``min_epsilon``; coordinates still straddling a kink
    there are excluded and counted in the report.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = np.zeros_like(p.data)
    _state.branches = []
    try:
        with Tape() as tape:
            loss = model_fn(input)
        base = _state.branches
    finally:
        _state.branches = None
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    report = []
    for p in params:
        ad = p.grad.copy().reshape(-1)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = np.sort(rng.choice(flat.size, size=max_coords_per_param, replace=False))
        p_worst, skipped = 0.0, 0
        for i in coords:
            orig = flat[i]
            eps = epsilon
            while True:
                flat[i] = orig + eps
                fp, bp = _branches_of(model_fn, input)
                flat[i] = orig - eps
                fm, bm = _branches_of(model_fn, input)
                flat[i] = orig
                smooth = bp == base and bm == base
                if smooth or eps / 2 < min_epsilon:
                    break
                eps /= 2
            if not smooth:
                skipped += 1
                continue
            fd = (fp - fm) / (2.0 * eps)
            g = float(ad[i])
            err = abs(fd - g) / max(abs(fd), abs(g), 1e-8)
            p_worst = max(p_worst, err)
        worst = max(worst, p_worst)
        report.append((getattr(p, "name", "?"), p_worst, len(coords), skipped))
    return (worst, report) if details else worst
