import numpy as np
import pytest

from helpers import conv_loop, numeric_grad, rel_error
from physiolite import nn
from physiolite.exceptions import ConfigError, DataError
from physiolite.nn import ConvSpec, FixedPointMultiplier, QuantParams


def test_conv_identity_and_box():
    x = np.array([[1.0, -2.0, 3.5]])
    y, _ = nn.conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1), ConvSpec(1, 1, 1))
    np.testing.assert_array_equal(y, x)
    y, _ = nn.conv1d_forward(np.array([[1.0, 2.0, 3.0]]), np.ones((1, 1, 3)), None, ConvSpec(1, 1, 3, padding="valid"))
    np.testing.assert_array_equal(y, [[6.0]])


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("k,stride,groups", [(5, 1, 1), (3, 2, 1), (7, 2, 1), (3, 1, 4), (3, 1, 2), (1, 1, 1)])
def test_conv_matches_loop(seed, k, stride, groups):
    rng = np.random.default_rng(seed)
    c_out = 8 if groups != 4 else 4
    spec = ConvSpec(4, c_out, k, stride, "same", groups)
    x = rng.standard_normal((4, 32))
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(c_out)
    y, _ = nn.conv1d_forward(x, w, b, spec)
    assert np.max(np.abs(y - conv_loop(x, w, b, stride, k // 2, groups))) < 1e-6
    assert y.shape[-1] == spec.out_length(32)


def test_conv_batch_invariance(rng):
    spec = ConvSpec(3, 5, 5)
    x = rng.standard_normal((4, 3, 20)).astype(np.float32)
    w = rng.standard_normal(spec.weight_shape).astype(np.float32)
    y, _ = nn.conv1d_forward(x, w, None, spec)
    for i in range(4):
        np.testing.assert_array_equal(y[i], nn.conv1d_forward(x[i], w, None, spec)[0])
    perm = [2, 0, 3, 1]
    np.testing.assert_array_equal(nn.conv1d_forward(x[perm], w, None, spec)[0], y[perm])


def _conv_grad_case(seed, spec, n=2, length=8):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, spec.in_channels, length))
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(spec.out_channels)
    y, cache = nn.conv1d_forward(x, w, b, spec)
    r = rng.standard_normal(y.shape)
    gx, gw, gb = nn.conv1d_backward(r, cache)

    def f():
        return float((nn.conv1d_forward(x, w, b, spec)[0] * r).sum())

    return [(gx, numeric_grad(f, x)), (gw, numeric_grad(f, w)), (gb, numeric_grad(f, b))]


@pytest.mark.parametrize("seed", range(20))
def test_conv_backward_fd(seed):
    specs = [ConvSpec(3, 4, 3), ConvSpec(3, 2, 5, 2), ConvSpec(2, 3, 1), ConvSpec(4, 4, 3, 1, "same", 2)]
    spec = specs[seed % len(specs)]
    for ana, num in _conv_grad_case(seed, spec):
        assert rel_error(ana, num) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_depthwise_backward_fd(seed):
    spec = ConvSpec(4, 4, 3, 1 + seed % 2, "same", groups=4)
    assert spec.is_depthwise
    for ana, num in _conv_grad_case(seed, spec, length=9):
        assert rel_error(ana, num) < 1e-4


def test_conv_backward_trivia(rng):
    spec = ConvSpec(3, 4, 3)
    x = rng.standard_normal((2, 3, 8))
    y, cache = nn.conv1d_forward(x, rng.standard_normal(spec.weight_shape), np.zeros(4), spec)
    gx, gw, gb = nn.conv1d_backward(np.zeros_like(y), cache)
    assert not np.any(gx) and not np.any(gw) and not np.any(gb)
    g = rng.standard_normal(y.shape)
    np.testing.assert_allclose(nn.conv1d_backward(g, cache)[2], g.sum(axis=(0, 2)))
    with pytest.raises(DataError):
        nn.conv1d_backward(g, None)


def test_conv_errors(rng):
    with pytest.raises(DataError):
        nn.conv1d_forward(np.zeros((2, 8)), np.zeros((4, 3, 3)), None, ConvSpec(3, 4, 3))
    with pytest.raises(ConfigError):
        ConvSpec(3, 4, 3, groups=2)


def test_relu():
    y, cache = nn.relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0, 0, 2])
    np.testing.assert_array_equal(nn.relu_backward(np.array([5.0, 5.0, 5.0]), cache), [0, 0, 5])


@pytest.mark.parametrize("seed", range(20))
def test_relu_fd(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(20)
    x[np.abs(x) < 0.01] = 0.5  # keep away from the kink
    r = rng.standard_normal(20)
    y, cache = nn.relu_forward(x)
    num = numeric_grad(lambda: float((nn.relu_forward(x)[0] * r).sum()), x)
    assert rel_error(nn.relu_backward(r, cache), num) < 1e-6


def test_pool():
    assert nn.global_avg_pool_forward(np.full((1, 5), 3.0))[0][0] == 3.0
    assert nn.global_avg_pool_forward(np.array([[0.0, 2.0]]))[0][0] == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_pool_fd(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 7))
    r = rng.standard_normal((2, 3))
    _, length = nn.global_avg_pool_forward(x)
    num = numeric_grad(lambda: float((nn.global_avg_pool_forward(x)[0] * r).sum()), x)
    assert rel_error(nn.global_avg_pool_backward(r, length), num) < 1e-6


def test_dense_trivia(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(nn.dense_forward(x, np.eye(4), np.zeros(4))[0], x)
    b = rng.standard_normal(2)
    np.testing.assert_array_equal(nn.dense_forward(np.zeros((1, 4)), rng.standard_normal((2, 4)), b)[0], b[None])


@pytest.mark.parametrize("seed", range(20))
def test_dense_fd(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 7))
    w = rng.standard_normal((3, 7))
    b = rng.standard_normal(3)
    r = rng.standard_normal((5, 3))
    _, cache = nn.dense_forward(x, w, b)
    gx, gw, gb = nn.dense_backward(r, cache)

    def f():
        return float((nn.dense_forward(x, w, b)[0] * r).sum())

    for ana, num in ((gx, numeric_grad(f, x)), (gw, numeric_grad(f, w)), (gb, numeric_grad(f, b))):
        assert rel_error(ana, num) < 1e-4


# ---------------------------------------------------------------------------
# int8


def test_quant_params():
    qp = QuantParams(0.1, 3)
    np.testing.assert_array_equal(qp.quantize([0.0, 0.05, -0.05, 100.0]), [3, 4, 3, 127])
    with pytest.raises(ConfigError):
        QuantParams(0.0)
    with pytest.raises(ConfigError):
        QuantParams(1.0, 200)
    a = nn.affine_activation_params(0.5, 2.0)
    assert a.quantize([0.0])[0] == a.zero_point  # zero is exactly representable


@pytest.mark.parametrize("real", [1e-6, 0.003, 0.25, 0.5, 0.999, 1.7, 123.0])
def test_fixed_point_multiplier(real, rng):
    m = FixedPointMultiplier.from_real(real)
    assert abs(m.real - real) <= real * 2 ** -30
    acc = rng.integers(-2 ** 20, 2 ** 20, size=500)
    exact = np.floor(acc * m.multiplier / 2 ** m.shift + 0.5)
    np.testing.assert_array_equal(m.apply(acc), exact)


def test_weight_quant_grid(rng):
    w = rng.standard_normal((8, 4, 3))
    qp = nn.symmetric_weight_params(w)
    assert np.max(np.abs(qp.dequantize(qp.quantize(w)) - w)) <= qp.scale / 2 + 1e-15


def test_int8_zero_input_gives_bias(rng):
    spec = ConvSpec(3, 4, 3)
    in_qp, w_qp, out_qp = QuantParams(0.02, -5), QuantParams(0.01), QuantParams(0.05, 10)
    wq = rng.integers(-127, 128, size=spec.weight_shape).astype(np.int8)
    bias = rng.integers(-2000, 2000, size=4).astype(np.int32)
    x = np.full((3, 16), in_qp.zero_point, dtype=np.int8)
    y = nn.conv1d_int8(x, wq, bias, spec, in_qp, w_qp, out_qp)
    mult = FixedPointMultiplier.from_real(in_qp.scale * w_qp.scale / out_qp.scale)
    expected = nn.requantize(bias.astype(np.int64), mult, out_qp.zero_point)
    np.testing.assert_array_equal(y, np.repeat(expected[:, None], 16, axis=1))


def test_int8_identity_kernel(rng):
    x = rng.integers(-128, 128, size=(1, 30)).astype(np.int8)
    qp = QuantParams(1 / 128)
    y = nn.conv1d_int8(x, np.ones((1, 1, 1), dtype=np.int8), None, ConvSpec(1, 1, 1), qp, QuantParams(1.0), qp)
    np.testing.assert_array_equal(y, x)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("relu", [False, True])
def test_int8_conv_vs_float_oracle(seed, relu):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(6, 8, 5, 1 + seed % 2)
    x = rng.uniform(-1, 1, size=(2, 6, 40))
    w = rng.standard_normal(spec.weight_shape) * 0.3
    b = rng.standard_normal(8) * 0.1
    in_qp = nn.affine_activation_params(x.min(), x.max())
    w_qp = nn.symmetric_weight_params(w)
    xq, wq = in_qp.quantize(x), w_qp.quantize(w)
    bq = nn.quantize_bias(b, in_qp, w_qp)
    # float reference on the dequantized grid values
    y_ref, _ = nn.conv1d_forward(in_qp.dequantize(xq), w_qp.dequantize(wq), bq * in_qp.scale * w_qp.scale, spec)
    if relu:
        y_ref = np.maximum(y_ref, 0)
    out_qp = nn.affine_activation_params(y_ref.min(), y_ref.max())
    got = nn.conv1d_int8(xq, wq, bq, spec, in_qp, w_qp, out_qp, relu=relu)
    assert np.max(np.abs(got.astype(int) - out_qp.quantize(y_ref).astype(int))) <= 1


def test_int8_dense_add_pool_vs_float(rng):
    x = rng.uniform(-2, 2, size=(4, 10))
    w = rng.standard_normal((3, 10))
    in_qp, w_qp = nn.affine_activation_params(x.min(), x.max()), nn.symmetric_weight_params(w)
    xq, wq = in_qp.quantize(x), w_qp.quantize(w)
    ref = in_qp.dequantize(xq) @ w_qp.dequantize(wq).T
    out_qp = nn.affine_activation_params(ref.min(), ref.max())
    got = nn.dense_int8(xq, wq, None, in_qp, w_qp, out_qp)
    assert np.max(np.abs(got.astype(int) - out_qp.quantize(ref).astype(int))) <= 1

    a, b = rng.uniform(-1, 1, (2, 50)), rng.uniform(-3, 1, (2, 50))
    a_qp, b_qp = nn.affine_activation_params(a.min(), a.max()), nn.affine_activation_params(b.min(), b.max())
    aq, bq = a_qp.quantize(a), b_qp.quantize(b)
    s = a_qp.dequantize(aq) + b_qp.dequantize(bq)
    s_qp = nn.affine_activation_params(s.min(), s.max())
    got = nn.add_int8(aq, a_qp, bq, b_qp, s_qp)
    assert np.max(np.abs(got.astype(int) - s_qp.quantize(s).astype(int))) <= 1

    e = rng.uniform(0, 4, (3, 5, 33))
    e_qp = nn.affine_activation_params(e.min(), e.max())
    eq = e_qp.quantize(e)
    m = e_qp.dequantize(eq).mean(axis=-1)
    m_qp = nn.affine_activation_params(m.min(), m.max())
    got = nn.global_avg_pool_int8(eq, e_qp, m_qp)
    assert np.max(np.abs(got.astype(int) - m_qp.quantize(m).astype(int))) <= 1


def test_accumulator_overflow_detected():
    wq = np.full((1, 16384, 7), 127, dtype=np.int8)  # 16384*7*127*255 > 2**31
    with pytest.raises(ConfigError):
        nn.check_accumulator(wq, QuantParams(1.0, -128))
    nn.check_accumulator(wq[:, :8], QuantParams(1.0, -128))


def test_int8_rejects_float_input():
    with pytest.raises(DataError):
        nn.conv1d_int8(np.zeros((1, 4)), np.ones((1, 1, 1), dtype=np.int8), None, ConvSpec(1, 1, 1),
                       QuantParams(1.0), QuantParams(1.0), QuantParams(1.0))
