import numpy as np
import pytest

from sparse2dense import neural as nn
from sparse2dense.neural import Parameter, ShapeError, Tape, Tensor, gradient_check

SEEDS = range(20)


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _dims(rng, n, hi=8):
    return tuple(int(v) for v in rng.integers(1, hi + 1, size=n))


def _check(build, leaves, rng):
    """Gradient-check ``sum(build(*leaves) * R)`` for a fixed random projection ``R``."""
    with Tape():
        probe = build(*leaves)
    proj = rng.normal(size=probe.shape)

    def fn(_):
        return nn.tsum(nn.mul(build(*leaves), proj))

    return gradient_check(fn, leaves, None)


UNARY = {
    "relu": nn.relu,
    "tanh": nn.tanh,
    "sin": nn.sin,
    "cos": nn.cos,
    "exp": nn.exp,
    "scale": lambda x: nn.scale(x, -2.5),
    "neg": lambda x: -x,
    "sum_axis": lambda x: nn.tsum(x, axis=0),
    "mean_keep": lambda x: nn.mean(x, axis=-1, keepdims=True),
    "transpose": lambda x: nn.transpose(x),
    "reshape": lambda x: nn.reshape(x, (-1,)),
    "softmax": lambda x: nn.softmax(x, axis=-1),
    "softmax_axis0": lambda x: nn.softmax(x, axis=0),
    "global_avg_pool": lambda x: nn.global_avg_pool(x),
    "take_rows": lambda x: nn.take_rows(x, np.array([0, 0, x.shape[0] - 1])),
    "dropout_train": lambda x: nn.dropout(x, 0.3, True, 11),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng, _dims(rng, 2))
    assert _check(UNARY[name], [x], rng) < 1e-3


BINARY = {
    "add": (nn.add, lambda d: (d, d)),
    "add_broadcast": (nn.add, lambda d: (d, d[-1:])),
    "sub": (nn.sub, lambda d: (d, d)),
    "mul": (nn.mul, lambda d: (d, d)),
    "mul_broadcast": (nn.mul, lambda d: (d, (1,) + d[1:])),
    "matmul": (nn.matmul, lambda d: (d[:2], (d[1], d[2]))),
    "concat": (lambda a, b: nn.concat([a, b], axis=-1), lambda d: (d[:2], (d[0], d[2]))),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_gradients(name, seed):
    rng = np.random.default_rng(seed)
    op, shapes = BINARY[name]
    d = _dims(rng, 3)
    sa, sb = shapes(d)
    a, b = _leaf(rng, sa), _leaf(rng, sb)
    assert _check(op, [a, b], rng) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_batched_matmul_and_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    b, m, k, n = _dims(rng, 4)
    a, w, bias = _leaf(rng, (b, m, k)), _leaf(rng, (k, n)), _leaf(rng, (n,))
    assert _check(lambda a, w, bias: nn.linear(a, w, bias), [a, w, bias], rng) < 1e-3
    c = _leaf(rng, (b, k, n))
    assert _check(nn.matmul, [a, c], rng) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    r, c = _dims(rng, 2)
    c = max(c, 2)
    x, g, b = _leaf(rng, (r, c)), _leaf(rng, (c,)), _leaf(rng, (c,))
    assert _check(lambda x, g, b: nn.layer_norm(x, g, b), [x, g, b], rng) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_and_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    cin, cout = _dims(rng, 2, 3)
    hw = 2 * int(rng.integers(2, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x = _leaf(rng, (2, cin, hw, hw))
    k = _leaf(rng, (cout, cin, 3, 3))
    b = _leaf(rng, (cout,))
    assert _check(lambda x, k, b: nn.conv2d(x, k, b, stride=stride, padding=pad), [x, k, b], rng) < 1e-3
    assert _check(nn.max_pool2d, [x], rng) < 1e-3


def test_gradient_check_polynomial_and_linear():
    w = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        y = w * w
    tape.backward(y)
    assert w.grad == 6.0
    fd = (float(((w.data + 1e-3) ** 2)) - float((w.data - 1e-3) ** 2)) / 2e-3
    assert abs(fd - 6.0) < 1e-6
    assert gradient_check(lambda _: w * w, [w]) < 1e-9
    a = Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
    coef = np.array([2.0, -3.0, 0.5])
    assert gradient_check(lambda _: nn.tsum(a * coef), [a]) < 1e-10


def test_gradient_check_reports_kink_straddles():
    x = Tensor(np.array([1e-4, -1e-4, 0.5]), requires_grad=True)
    err, rep = gradient_check(lambda _: nn.tsum(nn.relu(x)), [x], epsilon=1e-3, min_epsilon=1e-3, details=True)
    assert rep[0][3] == 2  # the two near-zero coordinates straddle the kink at that step
    assert err < 1e-9
    err, rep = gradient_check(lambda _: nn.tsum(nn.relu(x)), [x], epsilon=1e-3, details=True)
    assert rep[0][3] == 0 and err < 1e-9  # halving the step resolves them


def test_gradient_check_catches_wrong_vjp():
    x = Tensor(np.array([0.3, 0.7]), requires_grad=True)

    def bad_square(t):
        return nn._make(t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

    assert gradient_check(lambda _: nn.tsum(bad_square(x)), [x]) > 0.4


def test_backward_linearity(rng):
    w = _leaf(rng, (4, 3))
    x = rng.normal(size=(5, 4))

    def l1():
        return nn.tsum(nn.tanh(nn.matmul(x, w)))

    def l2():
        return nn.mean(nn.mul(nn.matmul(x, w), nn.matmul(x, w)))

    grads = []
    for fn in (l1, l2, lambda: nn.add(l1(), l2())):
        w.grad = None
        with Tape() as tape:
            loss = fn()
        tape.backward(loss)
        grads.append(w.grad.copy())
    np.testing.assert_allclose(grads[2], grads[0] + grads[1], rtol=1e-12, atol=1e-14)


def test_matmul_examples():
    a = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(nn.matmul(Tensor(a), Tensor(np.eye(4))).data, a)
    out = nn.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])
    with pytest.raises(ShapeError):
        nn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples(rng):
    np.testing.assert_allclose(nn.softmax(Tensor(np.zeros((2, 5)))).data, 0.2)
    np.testing.assert_allclose(nn.softmax(Tensor([0.0, 1000.0])).data, [0.0, 1.0], atol=1e-12)
    x = rng.normal(size=(3, 6))
    np.testing.assert_allclose(nn.softmax(Tensor(x + 123.4)).data, nn.softmax(Tensor(x)).data, atol=1e-6)
    assert np.isfinite(nn.softmax(Tensor([1e308, -1e308, 0.0])).data).all()


def test_conv_examples():
    x = np.random.default_rng(0).normal(size=(1, 5, 5))
    out = nn.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)
    out = nn.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1) and out.data.item() == 9.0
    out = nn.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 2, 2)


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = nn.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]).sum() + b[o]
                    assert out[n, o, i, j] == pytest.approx(ref, abs=1e-12)


def test_layer_norm_examples(rng):
    one, zero = np.ones(6), np.zeros(6)
    np.testing.assert_array_equal(nn.layer_norm(Tensor(np.full((2, 6), 3.0)), Tensor(one), Tensor(zero)).data, 0.0)
    x = rng.normal(2.0, 5.0, size=(4, 6))
    y = nn.layer_norm(Tensor(x), Tensor(one), Tensor(zero)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)
    bias = rng.normal(size=6)
    y = nn.layer_norm(Tensor(x), Tensor(zero), Tensor(bias)).data
    np.testing.assert_array_equal(y, np.broadcast_to(bias, x.shape))


def test_dropout_examples(rng):
    x = Tensor(rng.normal(size=(8, 8)))
    assert nn.dropout(x, 0.0, True, 1) is x
    assert nn.dropout(x, 0.9, False, 1) is x
    ones = Tensor(np.ones(10_000))
    mean = np.mean([nn.dropout(ones, 0.3, True, s).data.mean() for s in range(20)])
    assert abs(mean - 1.0) < 0.02
    with pytest.raises(ValueError):
        nn.dropout(x, 1.0, True, 0)


def test_max_pool_routes_to_first_max():
    x = Tensor(np.array([[[1.0, 1.0], [0.0, 1.0]]]), requires_grad=True)
    with Tape() as tape:
        y = nn.max_pool2d(x)
    tape.backward(nn.tsum(y) if y.data.size > 1 else y)
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_no_nan_on_extreme_inputs():
    big = Tensor(np.array([[1e30, -1e30, 0.0, 5.0]]))
    assert np.isfinite(nn.layer_norm(big, Tensor(np.ones(4)), Tensor(np.zeros(4))).data).all()
    assert np.isfinite(nn.tanh(big).data).all()
    assert np.isfinite(nn.layer_norm(Tensor(np.zeros((1, 4))), Tensor(np.ones(4)), Tensor(np.zeros(4))).data).all()


def test_frozen_parameter_gets_no_gradient(rng):
    p = Parameter(rng.normal(size=(3,)), "frozen", frozen=True)
    q = Parameter(rng.normal(size=(3,)), "live")
    with Tape() as tape:
        loss = nn.tsum(nn.mul(p, q))
    tape.backward(loss)
    assert not p.grad.any()
    np.testing.assert_array_equal(q.grad, p.data)


def test_no_tape_records_nothing(rng):
    w = _leaf(rng, (3,))
    y = nn.tanh(w)
    assert nn.active_tape() is None and y.requires_grad


def test_float32_stays_float32():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    assert (x * 2.0 + 1.0).dtype == np.float32
    assert nn.softmax(x).dtype == np.float32
