import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyntube.neural import (
    AdamState, Mlp, StaleTapeError, Var, adam_step, check_loss, clip_grad_norm, huber,
    mlp_backward, mlp_forward, params_from_bytes, params_to_bytes, quantile_loss,
    quantile_loss_grad, stop_gradient,
)


def loop_forward(net, x):
    # straight-line recomputation, one scalar at a time
    h = list(map(float, x))
    for W, b in net.layers:
        out = []
        for j in range(W.shape[1]):
            s = b[j] + sum(h[i] * W[i, j] for i in range(len(h)))
            bs = net.beta * s
            out.append((max(bs, 0) + math.log1p(math.exp(-abs(bs)))) / net.beta)
        h = out
    return np.array(h)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def test_zero_net_outputs_ln2_over_beta():
    net = Mlp([4, 8, 8, 3], beta=5.0, zero=True)
    y, _ = mlp_forward(net, np.random.default_rng(0).normal(size=4))
    assert np.allclose(y, np.log(2) / 5) and y[0] == pytest.approx(0.138629, abs=1e-6)


def test_identity_like_single_layer():
    net = Mlp([2, 2], beta=5.0)
    net.set_params([np.eye(2), np.zeros(2)])
    y, _ = mlp_forward(net, np.zeros(2))
    assert np.allclose(y, np.log(2) / 5)


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for seed in range(5):
        net = Mlp([5, 7, 6, 3], seed=seed)
        for layer in net.layers:
            layer[1][:] = rng.normal(size=layer[1].shape)
        x = rng.normal(size=5)
        y, _ = mlp_forward(net, x)
        assert np.allclose(y, loop_forward(net, x), atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        mlp_forward(Mlp([3, 2]), np.zeros(4))


def test_linear_net_gradient_is_adjoint():
    net = Mlp([3, 2], linear=True, seed=3)
    W = net.layers[0][0]
    x, g = np.array([0.3, -1.0, 2.0]), np.array([1.5, -0.5])
    _, tape = mlp_forward(net, x)
    grads, gx = mlp_backward(net, tape, g)
    assert np.allclose(gx, W @ g)
    assert np.allclose(grads[0], np.outer(x, g)) and np.allclose(grads[1], g)


def test_zero_output_grad():
    net = Mlp([3, 5, 2], seed=4)
    _, tape = mlp_forward(net, np.ones(3))
    grads, gx = mlp_backward(net, tape, np.zeros(2))
    assert all(not g.any() for g in grads) and not gx.any()


def test_stale_tape():
    net = Mlp([3, 2], seed=0)
    _, tape = mlp_forward(net, np.ones(3))
    net.set_params(net.params)
    with pytest.raises(StaleTapeError):
        mlp_backward(net, tape, np.ones(2))


def _fd_param_grads(net, x, g, h=1e-5):
    params = net.params
    out = []
    for pi, p in enumerate(params):
        gp = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = float(np.sum(net(x) * g))
            p[idx] = old - h
            dn = float(np.sum(net(x) * g))
            p[idx] = old
            gp[idx] = (up - dn) / (2 * h)
        out.append(gp)
    return out


def test_backward_vs_finite_differences():
    rng = np.random.default_rng(5)
    for seed in range(10):
        net = Mlp([4, 6, 5, 2], seed=seed)
        x = rng.normal(size=(3, 4))
        g = rng.normal(size=(3, 2))
        _, tape = mlp_forward(net, x)
        grads, gx = mlp_backward(net, tape, g)
        for a, b in zip(grads, _fd_param_grads(net, x, g)):
            assert rel_err(a, b) < 1e-4
        fx = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += 1e-5
            xm[idx] -= 1e-5
            fx[idx] = (np.sum(net(xp) * g) - np.sum(net(xm) * g)) / 2e-5
        assert rel_err(gx, fx) < 1e-4


def test_check_loss_examples():
    assert check_loss([1.0], [0.5], 0.9)[0] == pytest.approx(0.45)
    assert check_loss([0.5], [1.0], 0.9)[0] == pytest.approx(0.05)
    assert check_loss([0.7], [0.7], 0.9)[0] == 0
    with pytest.raises(ValueError):
        check_loss([1, 2], [1], 0.9)
    with pytest.raises(ValueError):
        check_loss([1], [1], 1.0)


def test_huber_examples():
    assert huber(0.0) == 0
    d = 0.7
    assert huber(d, d) == pytest.approx(d * d / 2)
    assert d * (d - d / 2) == pytest.approx(d * d / 2)
    assert huber(2.0, 1.0) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        huber(1.0, 0.0)


def test_quantile_loss_examples():
    assert quantile_loss(np.array([0.3, 0.4]), np.array([0.3, 0.4]), 0.9) == 0
    assert quantile_loss(np.array([1, 0.5]), np.array([0.5, 1]), 0.9, 1.0) == pytest.approx(0.125)


def test_constant_predictor_recovers_quantile():
    e = np.arange(1, 11) / 10
    grid = np.arange(0, 1.0005, 1e-3)
    losses = [quantile_loss(np.full(10, w), e, 0.9) for w in grid]
    w_star = grid[int(np.argmin(losses))]
    assert abs(w_star - np.quantile(e, 0.9)) <= 0.1


def test_quantile_loss_grad_matches_fd():
    rng = np.random.default_rng(6)
    w, e = rng.uniform(0, 1, (4, 6)), rng.uniform(0, 1, (4, 6))
    loss, g = quantile_loss_grad(w, e, 0.9, 0.5)
    assert loss == pytest.approx(np.mean([quantile_loss(w[i], e[i], 0.9, 0.5) for i in range(4)]))
    fd = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += 1e-6
        wm[idx] -= 1e-6
        fd[idx] = (quantile_loss_grad(wp, e, 0.9, 0.5)[0] - quantile_loss_grad(wm, e, 0.9, 0.5)[0]) / 2e-6
    assert rel_err(g, fd) < 1e-4


def test_adam_zero_grads():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.zeros_like(p)
    st_.m[0][:] = 0.5
    st_.v[0][:] = 0.25
    adam_step(p, [np.zeros(2)], st_, lr=0.1)
    # fresh moments with zero gradients leave the parameters alone
    q = [np.array([1.0, -2.0])]
    adam_step(q, [np.zeros(2)], AdamState.zeros_like(q), lr=0.1)
    assert np.array_equal(q[0], [1.0, -2.0])
    assert np.allclose(st_.m[0], 0.45) and np.allclose(st_.v[0], 0.25 * 0.999)


def test_adam_descends_and_matches_scalar_oracle():
    x = [np.array([1.0])]
    state = AdamState.zeros_like(x)
    m = v = 0.0
    xs = 1.0
    for t in range(1, 11):
        adam_step(x, [2 * x[0]], state, lr=0.05)
        g = 2 * xs
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        xs -= 0.05 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        if t == 1:
            assert x[0][0] < 1.0
    assert x[0][0] == pytest.approx(xs, abs=1e-14)


def test_stop_gradient_var():
    x = Var(3.0)
    y = stop_gradient(x) * x
    y.backward()
    assert float(y.value) == 9 and float(x.grad) == 3


def test_stop_gradient_tape():
    net = Mlp([3, 4, 2], seed=1)
    _, tape = mlp_forward(net, np.ones(3))
    grads, gx = mlp_backward(net, stop_gradient(tape), np.ones(2))
    assert not gx.any()
    ref, _ = mlp_backward(net, tape, np.ones(2))
    assert all(np.array_equal(a, b) for a, b in zip(grads, ref))
    _, gx_part = mlp_backward(net, stop_gradient(tape, [True, False, False]), np.ones(2))
    _, gx_full = mlp_backward(net, tape, np.ones(2))
    assert gx_part[0] == 0 and np.array_equal(gx_part[1:], gx_full[1:])


def test_clip_grad_norm():
    g = [np.array([3.0, 4.0])]
    assert clip_grad_norm(g, 1.0) == 5.0
    assert np.allclose(g[0], [0.6, 0.8])


def test_param_bytes_round_trip():
    net = Mlp([3, 4, 2], seed=2)
    blob = params_to_bytes(net)
    other = Mlp([3, 4, 2], seed=9)
    params_from_bytes(other, blob)
    assert all(np.array_equal(a.astype(np.float32), b) for a, b in zip(net.params, other.params))
    with pytest.raises(ValueError):
        params_from_bytes(Mlp([3, 5, 2]), blob)


# ---------------------------------------------------------------- properties

pos = st.floats(0, 10, allow_nan=False)


@settings(max_examples=200)
@given(pos, pos, st.floats(0.01, 0.99))
def test_check_loss_nonnegative_and_zero_iff_equal(w, e, alpha):
    r = check_loss([w], [e], alpha)[0]
    assert r >= 0
    assert (r == 0) == (w == e)


@settings(max_examples=200)
@given(pos, st.floats(1e-3, 5), st.floats(0.01, 0.99))
def test_check_loss_asymmetry(e, gap, alpha):
    over = check_loss([e + gap], [e], alpha)[0]
    under = check_loss([e], [e + gap], alpha)[0]
    assert over / under == pytest.approx(alpha / (1 - alpha), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 0.9]))
def test_quantile_recovery_property(seed, alpha):
    e = np.random.default_rng(seed).exponential(size=200)
    grid = np.linspace(0, e.max(), 2001)
    s = [check_loss(np.full(200, w), e, 1 - alpha).sum() for w in grid]
    w_star = grid[int(np.argmin(s))]
    lo, hi = np.quantile(e, alpha - 0.01), np.quantile(e, alpha + 0.01)
    assert lo - grid[1] <= w_star <= hi + grid[1]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_outputs_strictly_positive(seed):
    net = Mlp([3, 8, 2], seed=seed)
    x = np.random.default_rng(seed).normal(scale=3, size=(10, 3))
    assert np.all(net(x) > 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 3), st.floats(0.1, 2))
def test_huber_continuous_derivative(s, delta):
    h = 1e-7
    d = (huber(s + h, delta) - huber(max(s - h, 0), delta)) / (s + h - max(s - h, 0))
    assert d == pytest.approx(min(s, delta), abs=1e-5)
