import math

import numpy as np
import pytest

from conftest import jitter, param_fd
from dsebm.conv import (
    ConvEnergyParams, ConvLayer, DenseLayer, MaxPoolLayer, conv_energy, conv_layer_forward,
    conv_param_grad, conv_reconstruct, conv_score, init_conv, maxpool_forward,
)
from dsebm.dense import DenseEnergyParams, dense_forward
from dsebm.numerics import RngStream, finite_diff_grad, rel_error

SMALL = [{"type": "conv", "filters": 2, "size": 3}, {"type": "pool", "size": 2},
         {"type": "dense", "outputs": 3}]


def sp(z):
    return math.log1p(math.exp(-abs(z))) + max(z, 0.0)


def loop_conv(W, b, h):
    """Quadruple loop over (filter, row, col, tap) with explicitly flipped taps."""
    F, C, k, _ = W.shape
    _, H, Wd = h.shape
    out = np.zeros((F, H - k + 1, Wd - k + 1))
    for f in range(F):
        for p in range(H - k + 1):
            for q in range(Wd - k + 1):
                z = b[f]
                for c in range(C):
                    for i in range(k):
                        for j in range(k):
                            z += h[c, p + i, q + j] * W[f, c, k - 1 - i, k - 1 - j]
                out[f, p, q] = sp(z)
    return out


def loop_pool(h, p):
    C, H, W = h.shape
    out = np.zeros((C, H // p, W // p))
    for c in range(C):
        for r in range(H // p):
            for s in range(W // p):
                out[c, r, s] = max(h[c, r * p + i, s * p + j] for i in range(p) for j in range(p))
    return out


def small_model(rng, shape=(1, 6, 6), layout=SMALL, scale=0.5):
    return jitter(init_conv(shape, layout, rng), rng, scale)


def test_identity_filter():
    layer = ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1))
    h = np.arange(9.0).reshape(1, 3, 3) - 4
    np.testing.assert_allclose(conv_layer_forward(layer, h), np.logaddexp(0, h), rtol=1e-15)


def test_zero_filters_give_log2():
    layer = ConvLayer(np.zeros((3, 2, 2, 2)), np.zeros(3))
    out = conv_layer_forward(layer, np.random.default_rng(0).normal(size=(2, 5, 4)))
    assert out.shape == (3, 4, 3)
    np.testing.assert_allclose(out, math.log(2), rtol=1e-15)


@pytest.mark.parametrize("C,F,k,H,W", [(1, 1, 2, 4, 4), (2, 3, 3, 5, 6), (3, 2, 1, 3, 3), (1, 2, 4, 4, 7)])
def test_conv_layer_matches_loop(rng, C, F, k, H, W):
    layer = ConvLayer(rng.normal(size=(F, C, k, k)), rng.normal(size=F))
    h = rng.normal(size=(C, H, W))
    assert np.max(np.abs(conv_layer_forward(layer, h) - loop_conv(layer.W, layer.b, h))) < 1e-12


def test_asymmetric_filter_is_flipped():
    # a single tap at the bottom-right of W reads the top-left pixel of each window
    W = np.zeros((1, 1, 2, 2))
    W[0, 0, 1, 1] = 1.0
    h = np.arange(9.0).reshape(1, 3, 3)
    z = np.log(np.expm1(conv_layer_forward(ConvLayer(W, np.zeros(1)), h)))
    np.testing.assert_allclose(z[0], h[0, :2, :2], atol=1e-12)


def test_maxpool_example():
    h = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    values, (rows, cols) = maxpool_forward(2, h)
    assert values.shape == (1, 1, 1)
    assert values[0, 0, 0] == 4.0
    assert (rows[0, 0, 0], cols[0, 0, 0]) == (1, 1)


def test_maxpool_tie_takes_first():
    values, (rows, cols) = maxpool_forward(2, np.full((1, 4, 4), 7.0))
    np.testing.assert_array_equal(values, 7.0)
    np.testing.assert_array_equal(rows[0], [[0, 0], [2, 2]])
    np.testing.assert_array_equal(cols[0], [[0, 2], [0, 2]])


def test_maxpool_matches_loop(rng):
    h = rng.normal(size=(2, 6, 6))
    values, (rows, cols) = maxpool_forward(3, h)
    np.testing.assert_array_equal(values, loop_pool(h, 3))
    for c in range(2):
        np.testing.assert_array_equal(h[c][rows[c], cols[c]], values[c])


def test_pool_must_divide():
    with pytest.raises(ValueError, match="does not divide"):
        maxpool_forward(2, np.zeros((1, 5, 4)))
    with pytest.raises(ValueError):
        init_conv((1, 5, 5), [{"type": "pool", "size": 2}], RngStream(0))


def test_zero_model_energy():
    model = init_conv((1, 6, 6), SMALL, RngStream(0))
    for t in model.tensors().values():
        t[...] = 0
    e, hs = conv_energy(model, np.zeros((1, 6, 6)))
    assert e == pytest.approx(-3 * math.log(2), abs=1e-14)
    assert [h.shape for h in hs] == [(1, 6, 6), (2, 4, 4), (2, 2, 2), (3,)]


def test_dense_only_stack_reduces_to_dense(rng):
    W1, b1, W2, b2 = rng.normal(size=(12, 5)), rng.normal(size=5), rng.normal(size=(5, 2)), rng.normal(size=2)
    bp = rng.normal(size=(3, 2, 2))
    cm = ConvEnergyParams([DenseLayer(W1, b1), DenseLayer(W2, b2)], bp)
    dm = DenseEnergyParams([W1, W2], [b1, b2], bp.ravel())
    x = rng.normal(size=(3, 2, 2))
    assert abs(conv_energy(cm, x)[0] - dense_forward(dm, x.ravel())[0]) < 1e-12


def test_scalar_oracle_stack(rng):
    model = small_model(rng)
    x = rng.normal(size=(1, 6, 6))
    c, _, d = model.layers
    h1 = loop_conv(c.W, c.b, x)
    h2 = loop_pool(h1, 2).ravel()
    h3 = [sp(d.b[j] + sum(h2[i] * d.W[i, j] for i in range(len(h2)))) for j in range(3)]
    oracle = 0.5 * float(np.sum((x - model.b_prime) ** 2)) - sum(h3)
    assert abs(conv_energy(model, x)[0] - oracle) < 1e-12


def test_batch_matches_single(rng):
    model = small_model(rng)
    X = rng.normal(size=(4, 1, 6, 6))
    e, _ = conv_energy(model, X)
    for i in range(4):
        assert e[i] == pytest.approx(conv_energy(model, X[i])[0], abs=1e-12)
        np.testing.assert_allclose(conv_score(model, X)[i], conv_score(model, X[i]), rtol=0, atol=1e-13)


@pytest.mark.parametrize("shape,layout", [
    ((1, 6, 6), SMALL),
    ((2, 5, 5), [{"type": "conv", "filters": 2, "size": 2}, {"type": "conv", "filters": 1, "size": 2}]),
    ((1, 8, 8), [{"type": "conv", "filters": 2, "size": 3}, {"type": "pool", "size": 3},
                 {"type": "conv", "filters": 2, "size": 2}]),
    ((2, 4, 4), [{"type": "pool", "size": 2}, {"type": "dense", "outputs": 4}]),
])
def test_score_fd(rng, shape, layout):
    model = small_model(rng, shape, layout)
    x = rng.normal(size=shape)
    fd = finite_diff_grad(lambda v: conv_energy(model, v)[0], x)
    assert rel_error(conv_score(model, x), fd) < 1e-6


def test_pool_routing_mass_conservation(rng):
    pool = MaxPoolLayer(2)
    h = rng.normal(size=(3, 2, 6, 4))
    _, cache = pool.forward(h)
    u = rng.normal(size=(3, 2, 3, 2))
    routed = pool.route(u, cache)
    np.testing.assert_allclose(routed.sum(axis=(2, 3)), u.sum(axis=(2, 3)), rtol=1e-13)
    # one nonzero per window, at the argmax
    assert np.count_nonzero(routed) == u.size
    v = rng.normal(size=h.shape)
    assert abs(np.sum(routed * v) - np.sum(u * pool.gather(v, cache))) < 1e-12


def test_conv_adjoint(rng):
    layer = ConvLayer(rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
    x, y = rng.normal(size=(2, 2, 7, 6)), rng.normal(size=(2, 3, 5, 4))
    assert abs(np.sum(layer.linear(x) * y) - np.sum(x * layer.linear_t(y))) < 1e-10


def test_shape_chain_errors():
    with pytest.raises(ValueError, match="exceeds"):
        init_conv((1, 3, 3), [{"type": "conv", "filters": 1, "size": 4}], RngStream(0))
    with pytest.raises(ValueError):
        init_conv((1, 4, 4), [{"type": "dense", "outputs": 4}, {"type": "pool", "size": 2}], RngStream(0))
    model = init_conv((1, 4, 4), [{"type": "conv", "filters": 1, "size": 2}], RngStream(0))
    with pytest.raises(ValueError):
        conv_energy(model, np.zeros((2, 4, 4)))


def test_reconstruct_plus_score(rng):
    model = small_model(rng)
    x = rng.normal(size=(5, 1, 6, 6))
    f, s = conv_reconstruct(model, x), conv_score(model, x)
    tol = 4 * np.finfo(float).eps * (np.abs(f) + np.abs(s) + np.abs(x))
    assert np.all(np.abs(f + s - x) <= tol)


@pytest.mark.parametrize("shape,layout", [
    ((1, 6, 6), SMALL),
    ((2, 4, 4), [{"type": "conv", "filters": 2, "size": 2}, {"type": "conv", "filters": 2, "size": 2}]),
])
def test_param_grad_fd(shape, layout):
    r = RngStream(11)
    model = small_model(r, shape, layout)
    xc, xn = r.normal(size=(2,) + shape), r.normal(size=(2,) + shape)
    _, g = conv_param_grad(model, xc, xn)
    fd = param_fd(model, lambda: conv_param_grad(model, xc, xn)[0])
    for name, t in g.tensors().items():
        assert rel_error(t, fd[name]) < 1e-5, name


def test_param_grad_zero_at_perfect_reconstruction(rng):
    model = small_model(rng)
    xn = rng.normal(size=(3, 1, 6, 6))
    loss, g = conv_param_grad(model, conv_reconstruct(model, xn), xn)
    assert loss == 0.0
    assert all(np.all(t == 0) for t in g.tensors().values())


def test_descriptor_round_trip(rng):
    model = small_model(rng)
    again = ConvEnergyParams.from_tensors(model.descriptor(), model.tensors())
    x = rng.normal(size=(1, 6, 6))
    assert conv_energy(again, x)[0] == conv_energy(model, x)[0]
