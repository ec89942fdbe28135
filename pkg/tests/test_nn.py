import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import numeric_grad, rel_error
from oracles import conv_naive, deconv_naive
from segkit import kernels, nn
from segkit.errors import ContractError
from segkit.losses import dice_loss

FD_TOL = 1e-5


def check_grads(forward, backward, inputs, seed=0):
    """FD check of L = sum(forward() * R) against backward(R) for every array in inputs."""
    y = forward()
    r = np.random.default_rng(seed).standard_normal(y.shape)
    analytic = backward(r)

    def loss():
        return float(np.sum(forward() * r))

    for arr, g in zip(inputs, analytic):
        num = numeric_grad(loss, arr)
        assert rel_error(g, num) <= FD_TOL, rel_error(g, num)


# -- convolution -------------------------------------------------------------

def test_conv_all_ones_example():
    y, _ = nn.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    np.testing.assert_array_equal(y[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_dilated_impulse_footprint(d):
    size = 2 * (2 * d + 1) + 1
    x = np.zeros((1, 1, size, size))
    x[0, 0, size // 2, size // 2] = 1
    y, _ = nn.conv2d_forward(x, np.ones((1, 1, 3, 3)), None, dilation=d)
    rows, cols = np.nonzero(y[0, 0])
    offsets = {-d, 0, d}
    assert len(rows) == 9
    assert set(rows - size // 2) == offsets and set(cols - size // 2) == offsets
    assert (rows.max() - rows.min() + 1) == 2 * d + 1


def test_conv_matches_oracle_example():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    y, _ = nn.conv2d_forward(x, w, b, stride=2)
    assert y.shape == (2, 4, 4, 4)
    assert rel_error(y, conv_naive(x, w, b, 2, 1)) <= 1e-6


@pytest.mark.parametrize("size,expect", [(256, 128), (128, 64), (7, 4), (1, 1)])
def test_stride2_output_size(size, expect):
    y, _ = nn.conv2d_forward(np.zeros((1, 1, size, size), np.float32),
                             np.zeros((1, 1, 3, 3), np.float32), None, stride=2)
    assert y.shape[2:] == (expect, expect)


def test_conv_shape_errors():
    with pytest.raises(ContractError):
        nn.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ContractError):
        nn.conv2d_backward(np.zeros((1, 1, 4, 4)), None)


def test_conv_backward_zero_and_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    y, cache = nn.conv2d_forward(x, w, np.zeros(3))
    gx, gw, gb = nn.conv2d_backward(np.zeros_like(y), cache)
    assert not gx.any() and not gw.any() and not gb.any()

    eye = np.eye(2).reshape(2, 2, 1, 1)
    y, cache = nn.conv2d_forward(x, eye, None)
    g = np.zeros_like(y)
    g[0, 1, 2, 3] = 1.0
    gx, _, _ = nn.conv2d_backward(g, cache)
    np.testing.assert_array_equal(gx, g)


@pytest.mark.parametrize("stride,dilation,size,k", [
    (1, 1, 6, 3), (2, 1, 8, 3), (2, 1, 7, 3), (1, 2, 8, 3), (1, 3, 6, 3),
    (1, 4, 8, 3), (2, 2, 7, 3), (1, 1, 5, 1),
])
def test_conv_gradients(stride, dilation, size, k):
    rng = np.random.default_rng(stride * 10 + dilation + size)
    x = rng.standard_normal((2, 3, size, size))
    w = rng.standard_normal((2, 3, k, k))
    b = rng.standard_normal(2)
    cache = {}

    def fwd():
        y, cache["c"] = nn.conv2d_forward(x, w, b, stride, dilation)
        return y

    check_grads(fwd, lambda r: nn.conv2d_backward(r, cache["c"]), [x, w, b])


# -- transposed convolution ----------------------------------------------------

def test_deconv_doubles_size():
    for h in (2, 64, 128):
        y, _ = nn.deconv2d_forward(np.zeros((1, 2, h, h)), np.zeros((2, 3, 3, 3)))
        assert y.shape == (1, 3, 2 * h, 2 * h)


def test_deconv_zero_weights_bias():
    y, _ = nn.deconv2d_forward(np.ones((1, 1, 2, 2)), np.zeros((1, 3, 3, 3)),
                               np.array([1.0, 2.0, 3.0]))
    assert y.shape == (1, 3, 4, 4)
    for c in range(3):
        assert np.all(y[0, c] == c + 1)


@pytest.mark.parametrize("k", [2, 3])
def test_deconv_matches_scatter_oracle(k):
    rng = np.random.default_rng(k)
    for _ in range(5):
        n, ci, co, h = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 6)
        x = rng.standard_normal((n, ci, h, h + 1))
        w = rng.standard_normal((ci, co, k, k))
        b = rng.standard_normal(co)
        y, _ = nn.deconv2d_forward(x, w, b)
        assert rel_error(y, deconv_naive(x, w, b)) <= 1e-6


def test_deconv_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((4, 3, 3, 3))  # conv 3->4 channels, deconv 4->3
    x = rng.standard_normal((2, 3, 16, 16))
    v = rng.standard_normal((2, 4, 8, 8))
    y, cache = nn.conv2d_forward(x, w, None, stride=2)
    lhs = np.sum(y * v)
    d, _ = nn.deconv2d_forward(v, w, None)
    rhs = np.sum(x * d)
    assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)
    gx, _, _ = nn.conv2d_backward(v, cache)
    np.testing.assert_allclose(d, gx, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k", [2, 3])
def test_deconv_gradients(k):
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3, 3, 4))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(2)
    cache = {}

    def fwd():
        y, cache["c"] = nn.deconv2d_forward(x, w, b)
        return y

    check_grads(fwd, lambda r: nn.deconv2d_backward(r, cache["c"]), [x, w, b])


# -- batch norm ----------------------------------------------------------------

def _bn_state(c):
    return np.ones(c), np.zeros(c), np.zeros(c), np.ones(c)


def test_bn_constant_input_gives_zero():
    g, b, mm, mv = _bn_state(2)
    y, _ = nn.batchnorm_forward(np.full((2, 2, 3, 3), 4.0), g, b, mm, mv, True)
    np.testing.assert_allclose(y, 0.0, atol=1e-12)


def test_bn_infer_identity():
    g, b, mm, mv = _bn_state(3)
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    y, _ = nn.batchnorm_forward(x, g, b, mm, mv, False)
    np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-3), rtol=1e-12)


def test_bn_train_statistics():
    g, b, mm, mv = _bn_state(3)
    x = np.random.default_rng(1).standard_normal((4, 3, 8, 8)) * 3 + 2
    y, _ = nn.batchnorm_forward(x, g, b, mm, mv, True)
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) <= 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) <= 1e-3)


def test_bn_moving_update():
    g, b, mm, mv = _bn_state(1)
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    nn.batchnorm_forward(x, g, b, mm, mv, True, momentum=0.9)
    np.testing.assert_allclose(mm, [0.1 * 3.5])
    np.testing.assert_allclose(mv, [0.9 + 0.1 * np.var(np.arange(8.0))])
    assert np.all(mv >= 0)


def test_bn_infer_requires_stats():
    g, b, mm, _ = _bn_state(1)
    with pytest.raises(ContractError):
        nn.batchnorm_forward(np.ones((1, 1, 2, 2)), g, b, mm, None, False)
    with pytest.raises(ContractError):
        nn.batchnorm_forward(np.ones((1, 1, 2, 2)), g, b, mm, np.array([np.nan]), False)


def test_bn_infer_order_independent():
    rng = np.random.default_rng(3)
    g, b = rng.random(2) + 0.5, rng.standard_normal(2)
    mm, mv = rng.standard_normal(2), rng.random(2) + 0.1
    x = rng.standard_normal((5, 2, 3, 3))
    y, _ = nn.batchnorm_forward(x, g, b, mm, mv, False)
    yp, _ = nn.batchnorm_forward(x[::-1].copy(), g, b, mm, mv, False)
    np.testing.assert_array_equal(y, yp[::-1])
    y1, _ = nn.batchnorm_forward(x[2:3], g, b, mm, mv, False)
    np.testing.assert_array_equal(y[2:3], y1)


@pytest.mark.parametrize("training", [True, False])
def test_bn_gradients(training):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4, 4))
    g = rng.random(3) + 0.5
    b = rng.standard_normal(3)
    mm, mv = rng.standard_normal(3), rng.random(3) + 0.5
    cache = {}

    def fwd():
        y, cache["c"] = nn.batchnorm_forward(x, g, b, mm.copy(), mv.copy(), training)
        return y

    check_grads(fwd, lambda r: nn.batchnorm_backward(r, cache["c"]), [x, g, b])


# -- activations -----------------------------------------------------------------

def test_elu_values():
    y, _ = nn.elu_forward(np.array([0.0, 2.0, -1.0]))
    np.testing.assert_allclose(y, [0.0, 2.0, math.exp(-1) - 1], rtol=1e-15)
    assert abs(y[2] - (-0.6321206)) < 1e-7


def _unary_check(fwd_fn, bwd_fn, x):
    cache = {}

    def fwd():
        y, cache["c"] = fwd_fn(x)
        return y

    check_grads(fwd, lambda r: [bwd_fn(r, cache["c"])], [x])


def test_elu_gradient():
    x = np.random.default_rng(6).standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    _unary_check(nn.elu_forward, nn.elu_backward, x)


def test_sigmoid_values_and_gradient():
    y, _ = nn.sigmoid_forward(np.array([0.0, 800.0, -800.0]))
    np.testing.assert_array_equal(y, [0.5, 1.0, 0.0])
    x = np.random.default_rng(7).standard_normal((2, 2, 3, 3)) * 3
    _unary_check(nn.sigmoid_forward, nn.sigmoid_backward, x)


def test_maxpool_gradient():
    x = np.random.default_rng(8).standard_normal((2, 2, 4, 6))
    _unary_check(nn.maxpool2x2_forward, nn.maxpool2x2_backward, x)


def test_relu_gradient():
    x = np.random.default_rng(10).standard_normal((1, 2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    _unary_check(nn.relu_forward, nn.relu_backward, x)


# -- dropout -------------------------------------------------------------------

def test_dropout_identity_cases():
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3))
    rng = np.random.default_rng(1)
    for training in (True, False):
        y, _ = nn.spatial_dropout_forward(x, 0.0, rng, training)
        np.testing.assert_array_equal(y, x)
    y, _ = nn.spatial_dropout_forward(x, 0.7, rng, False)
    np.testing.assert_array_equal(y, x)


def test_dropout_rate_bounds():
    with pytest.raises(ValueError):
        nn.spatial_dropout_forward(np.ones((1, 1, 1, 1)), 1.0, np.random.default_rng(0), True)
    with pytest.raises(ValueError):
        nn.SpatialDropout2d(1.5, None)


def test_dropout_drops_whole_channels():
    rng = np.random.default_rng(2)
    y, mask = nn.spatial_dropout_forward(np.ones((4, 16, 3, 3)), 0.5, rng, True)
    for i in range(4):
        for c in range(16):
            vals = np.unique(y[i, c])
            assert len(vals) == 1 and vals[0] in (0.0, 2.0)


def test_dropout_expectation_monte_carlo():
    rng = np.random.default_rng(3)
    x = np.ones((1, 8, 2, 2))
    acc = np.zeros_like(x)
    trials = 10_000
    for _ in range(trials):
        acc += nn.spatial_dropout_forward(x, 0.5, rng, True)[0]
    assert np.all(np.abs(acc / trials - 1.0) <= 0.05)


def test_dropout_frozen_mask_gradient():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4, 4))
    _, mask = nn.spatial_dropout_forward(x, 0.4, rng, True)
    check_grads(lambda: nn.spatial_dropout_forward(x, 0.4, rng, True, mask)[0],
                lambda r: [nn.spatial_dropout_backward(r, mask)], [x])


# -- merges --------------------------------------------------------------------

def test_concat_add_examples():
    a = np.zeros((1, 2, 3, 3))
    b = np.ones((1, 3, 3, 3))
    c = nn.concat_channels(a, b)
    assert c.shape == (1, 5, 3, 3)
    assert not c[:, :2].any() and c[:, 2:].all()
    ga, gb = nn.split_channels(c, 2)
    assert ga.shape == a.shape and gb.shape == b.shape
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
    np.testing.assert_array_equal(nn.add_residual(x, np.zeros_like(x)), x)
    with pytest.raises(ContractError):
        nn.add_residual(a, b)
    with pytest.raises(ContractError):
        nn.concat_channels(a, np.ones((1, 1, 4, 4)))


def test_dice_loss_gradient():
    rng = np.random.default_rng(11)
    p = rng.random((2, 1, 5, 5))
    t = (rng.random((2, 1, 5, 5)) > 0.5).astype(np.float64)
    _, g = dice_loss(p, t)
    num = numeric_grad(lambda: dice_loss(p, t)[0], p)
    assert rel_error(g, num) <= FD_TOL


# -- modules ---------------------------------------------------------------------

def test_module_parameter_bookkeeping():
    seq = nn.Sequential(nn.Conv2d(1, 2, dtype=np.float64), nn.BatchNorm2d(2, dtype=np.float64),
                        nn.ELU())
    names = [n for n, _ in seq.named_parameters()]
    assert names == ["0.bias", "0.weight", "1.beta", "1.gamma", "1.moving_mean", "1.moving_var"]
    assert len(seq.trainable_parameters()) == 4
    for _, p in seq.named_parameters():
        if p.trainable:
            assert p.grad.shape == p.data.shape
        else:
            assert p.grad is None
    seq.eval()
    assert not any(m.training for m in seq.modules())


def test_module_backward_needs_forward():
    with pytest.raises(ContractError):
        nn.Conv2d(1, 1).backward(np.zeros((1, 1, 2, 2), np.float32))


def test_module_caches_nothing_under_no_grad():
    conv = nn.Conv2d(1, 1, dtype=np.float64)
    with nn.no_grad():
        conv.forward(np.ones((1, 1, 4, 4)))
    with pytest.raises(ContractError):
        conv.backward(np.zeros((1, 1, 4, 4)))


# -- backends ----------------------------------------------------------------------

@pytest.mark.skipif(len(kernels.available_backends()) < 2, reason="extension not built")
@settings(max_examples=60, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 9), st.integers(1, 9),
       st.sampled_from([1, 2]), st.integers(1, 4), st.sampled_from([1, 2, 3]),
       st.sampled_from([np.float32, np.float64]))
def test_backends_bitwise_equal(n, c, h, w, stride, dilation, k, dtype):
    x = np.random.default_rng(h * 31 + w).standard_normal((n, c, h, w)).astype(dtype)
    oh, pt, _ = nn.same_padding(h, k, stride, dilation)
    ow, pl, _ = nn.same_padding(w, k, stride, dilation)
    comp, py = kernels.get_backend("compiled"), kernels.get_backend("python")
    a = comp.im2col(x, k, stride, dilation, pt, pl, oh, ow)
    b = py.im2col(x, k, stride, dilation, pt, pl, oh, ow)
    np.testing.assert_array_equal(a, b)
    cols = np.random.default_rng(1).standard_normal(a.shape).astype(dtype)
    np.testing.assert_array_equal(
        comp.col2im(cols, c, h, w, k, stride, dilation, pt, pl, oh, ow),
        py.col2im(cols, c, h, w, k, stride, dilation, pt, pl, oh, ow))


def test_backend_switch_round_trip():
    saved = kernels.BACKEND
    x = np.random.default_rng(0).standard_normal((1, 2, 6, 6))
    w = np.random.default_rng(1).standard_normal((3, 2, 3, 3))
    outs = []
    try:
        for name in kernels.available_backends():
            kernels.set_backend(name)
            outs.append(nn.conv2d_forward(x, w, None, 2, 2)[0])
    finally:
        kernels.set_backend(saved)
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])
    assert kernels.BACKEND == saved
