import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vaeconv.activations import Celu, Identity, Relu, Sigmoid, SoftClip, Softplus, Tanh, act, act_d1
from vaeconv.mlp import (
    MlpParams, backprop_input, backprop_params, backprop_params_per_sample, certified_bounds, flatten_grads,
    forward, init, lipschitz_bound, project_norm, smoothness_bound,
)
from vaeconv.numerics import RngKey, finite_diff_grad, spectral_norm

from conftest import rel_err

SMOOTH = [Sigmoid(), Tanh(), Softplus(), Celu(1.5), SoftClip(-1, 2, 4), Identity()]


def random_net(seed, acts=None, max_layers=4, max_width=8, bound=None, spread=1.0):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, max_layers + 1))
    dims = [int(d) for d in r.integers(1, max_width + 1, n + 1)]
    if acts is None:
        acts = [SMOOTH[int(i)] for i in r.integers(0, len(SMOOTH), n)]
    elif not isinstance(acts, list):
        acts = [acts] * n
    ws = [r.normal(size=(dims[i + 1], dims[i])) * spread / np.sqrt(dims[i]) for i in range(n)]
    bs = [r.normal(size=dims[i + 1]) * spread for i in range(n)]
    p = MlpParams(ws, bs, acts, bound)
    return (project_norm(p) if bound else p), r


def straight_line(p, z):
    h = np.asarray(z, dtype=float)
    for w, b, f in zip(p.weights, p.biases, p.activations):
        h = act(f, w @ h + b)
    return h


def product_formula(p, z, up):
    """Gradients from the explicit chain of diag(f') W products, one layer at a time."""
    hs, us = [np.asarray(z, float)], []
    for w, b, f in zip(p.weights, p.biases, p.activations):
        us.append(w @ hs[-1] + b)
        hs.append(act(f, us[-1]))
    out = []
    for i in range(p.n_layers):
        chain = np.eye(p.d_out)
        for j in range(p.n_layers - 1, i, -1):
            chain = chain @ np.diag(act_d1(p.activations[j], us[j])) @ p.weights[j]
        row = up @ chain @ np.diag(act_d1(p.activations[i], us[i]))
        out.append((np.outer(row, hs[i]), row))
    return out


def test_forward_examples():
    p = MlpParams([np.eye(2)], [np.zeros(2)], [Identity()])
    assert np.array_equal(forward(p, [1.0, 2.0])[0], [1.0, 2.0])
    p = MlpParams([[[0.0]]], [[0.0]], [Sigmoid()])
    assert forward(p, [5.0])[0][0] == 0.5


@given(st.integers(0, 10**6))
def test_forward_matches_straight_line(seed):
    p, r = random_net(seed, acts=Tanh(), max_layers=2)
    z = r.normal(size=p.d_in)
    out, trace = forward(p, z)
    assert np.allclose(out, straight_line(p, z), rtol=1e-14, atol=1e-14)
    assert len(trace.pre) == len(trace.post) == p.n_layers
    out2, trace2 = forward(p, z)
    assert all(np.array_equal(a, b) for a, b in zip(trace.pre, trace2.pre))


def test_forward_dimension_error_names_layer():
    p = MlpParams([np.ones((2, 3))], [np.zeros(2)], [Tanh()])
    with pytest.raises(ValueError, match="layer 1"):
        forward(p, np.ones(2))
    with pytest.raises(ValueError, match="layer 2"):
        MlpParams([np.ones((2, 3)), np.ones((1, 3))], [np.zeros(2), np.zeros(1)], [Tanh(), Tanh()])


def test_backprop_examples():
    z = np.array([0.5, -2.0, 3.0])
    p = MlpParams([np.arange(6.0).reshape(2, 3)], [np.ones(2)], [Identity()])
    _, tr = forward(p, z)
    (gw, gb), = backprop_params(p, tr, [1.0, 0.0])
    assert np.array_equal(gw[0], z) and np.all(gw[1] == 0)
    assert np.array_equal(gb, [1.0, 0.0])
    q, r = random_net(3)
    _, tr = forward(q, r.normal(size=q.d_in))
    assert np.all(flatten_grads(backprop_params(q, tr, np.zeros(q.d_out))) == 0)
    p = MlpParams([np.eye(3)], [np.zeros(3)], [Identity()])
    _, tr = forward(p, z)
    assert np.array_equal(backprop_input(p, tr, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
    p = MlpParams([[[2.0]]], [[0.0]], [Tanh()])
    _, tr = forward(p, [0.0])
    assert backprop_input(p, tr, [1.0])[0] == 2.0


def test_stale_trace_rejected():
    p, r = random_net(5, max_layers=1)
    q = MlpParams([np.ones((p.d_out + 1, p.d_in))], [np.zeros(p.d_out + 1)], [Tanh()])
    _, tr = forward(q, np.ones(p.d_in))
    with pytest.raises(ValueError):
        backprop_params(p, tr, np.ones(p.d_out))


@pytest.mark.parametrize("seed", range(30))
def test_backprop_matches_product_formula(seed):
    p, r = random_net(seed)
    z, up = r.normal(size=p.d_in), r.normal(size=p.d_out)
    _, tr = forward(p, z)
    got = flatten_grads(backprop_params(p, tr, up))
    want = flatten_grads(product_formula(p, z, up))
    assert rel_err(got, want) < 1e-12


@pytest.mark.parametrize("f", [Softplus(), Tanh(), Sigmoid()], ids=lambda a: a.kind)
def test_three_layer_backprop_vs_finite_differences(f):
    r = np.random.default_rng(0)
    dims = [3, 5, 4, 2]
    p = MlpParams([r.normal(size=(dims[i + 1], dims[i])) for i in range(3)], [r.normal(size=d) for d in dims[1:]], [f] * 3)
    z, up = r.normal(size=3), r.normal(size=2)
    _, tr = forward(p, z)
    got = flatten_grads(backprop_params(p, tr, up))
    fd = finite_diff_grad(lambda th: up @ forward(p.with_flat(th), z)[0], p.flat())
    assert rel_err(got, fd) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_backprop_input_vs_finite_differences(seed):
    p, r = random_net(100 + seed)
    z, up = r.normal(size=p.d_in), r.normal(size=p.d_out)
    _, tr = forward(p, z)
    fd = finite_diff_grad(lambda v: up @ forward(p, v)[0], z)
    assert rel_err(backprop_input(p, tr, up), fd) < 1e-5


def test_batched_and_per_sample_consistent():
    p, r = random_net(7, max_layers=3)
    Z, U = r.normal(size=(6, p.d_in)), r.normal(size=(6, p.d_out))
    _, tr = forward(p, Z)
    per = backprop_params_per_sample(p, tr, U)
    total = flatten_grads(backprop_params(p, tr, U))
    assert np.allclose(per.sum(axis=0), total, rtol=1e-12, atol=1e-12)
    for i in range(6):
        _, t1 = forward(p, Z[i])
        assert np.allclose(per[i], flatten_grads(backprop_params(p, t1, U[i])), rtol=1e-12, atol=1e-12)
        assert np.allclose(backprop_input(p, tr, U)[i], backprop_input(p, t1, U[i]), rtol=1e-12, atol=1e-12)


def test_project_norm_examples():
    p = MlpParams([np.eye(2) * 0.5], [np.ones(2) * 0.1], [Tanh()], bound=1.0)
    q = project_norm(p)
    assert np.array_equal(q.flat(), p.flat())
    w = np.array([[2.0, 0.0], [0.0, 1.0]])
    q = project_norm(MlpParams([w], [np.zeros(2)], [Tanh()], bound=1.0))
    assert abs(spectral_norm(q.weights[0]) - 1.0) < 1e-12
    assert np.allclose(q.weights[0], w / 2)
    with pytest.raises(ValueError):
        project_norm(MlpParams([w], [np.zeros(2)], [Tanh()]))


@given(st.integers(0, 10**6), st.floats(0.1, 3.0))
def test_project_norm_invariant_and_idempotent(seed, a):
    p, _ = random_net(seed, spread=3.0)
    q = project_norm(MlpParams(p.weights, p.biases, p.activations, a))
    for w in q.weights:
        assert np.sqrt(np.max(np.linalg.eigvalsh(w.T @ w))) <= a * (1 + 1e-9)
    for b in q.biases:
        assert np.linalg.norm(b) <= a * (1 + 1e-12)
    assert np.allclose(project_norm(q).flat(), q.flat(), rtol=1e-12, atol=1e-14)


def test_coefficient_examples():
    p = MlpParams([[[1.0]]], [[0.0]], [Sigmoid()], bound=1.0)
    assert lipschitz_bound(p) == 0.25
    p = MlpParams([np.eye(2), np.eye(2)], [np.zeros(2)] * 2, [Tanh(), Tanh()], bound=2.0)
    assert lipschitz_bound(p) == 2.0
    with pytest.raises(ValueError, match="no smoothness constant"):
        smoothness_bound(MlpParams([[[1.0]]], [[0.0]], [Relu()], bound=1.0))
    with pytest.raises(ValueError):
        lipschitz_bound(MlpParams([[[1.0]]], [[0.0]], [Tanh()]))


def _gradient_pairs(n_pairs, seed, max_layers, acts=None):
    r = np.random.default_rng(seed)
    for t in range(n_pairs):
        a = float(r.choice([0.5, 1.0, 2.0]))
        p, _ = random_net(seed * 10_000 + t, acts=acts, max_layers=max_layers, bound=a, spread=3.0)
        q = project_norm(p.with_flat(p.flat() + r.normal(size=p.size) * r.choice([1e-3, 0.1, 1.0])))
        z = r.normal(size=p.d_in)
        z *= r.uniform(0, 5) / max(np.linalg.norm(z), 1e-12)
        up = r.normal(size=p.d_out)
        up /= np.linalg.norm(up)
        yield p, q, z, up


def _grad(p, z, up):
    return flatten_grads(backprop_params(p, forward(p, z)[1], up))


def test_product_coefficients_hold_for_single_layer():
    for p, q, z, up in _gradient_pairs(500, 1, max_layers=1):
        rz = np.linalg.norm(z)
        assert np.linalg.norm(_grad(p, z, up)) <= (rz + 1) * lipschitz_bound(p) * (1 + 1e-12)
        d = np.linalg.norm(p.flat() - q.flat())
        if d > 1e-8:
            ratio = np.linalg.norm(_grad(p, z, up) - _grad(q, z, up)) / d
            assert ratio <= smoothness_bound(p) * (rz * rz + 1) * (1 + 1e-9)


def test_product_coefficients_can_fail_with_depth():
    # documented deviation: the product coefficients drop bias and f(0) terms
    p = MlpParams([np.eye(3) * 0.5, np.eye(3) * 0.5], [np.zeros(3), np.ones(3) * 0.5 / np.sqrt(3)],
                  [Sigmoid(), Sigmoid()], bound=0.5)
    z = np.zeros(3)
    up = np.ones(3) / np.sqrt(3)
    assert np.linalg.norm(_grad(p, z, up)) > (0 + 1) * lipschitz_bound(p)


def test_certified_bounds_audit_1000_pairs():
    worst_g = worst_h = 0.0
    for p, q, z, up in _gradient_pairs(1000, 2, max_layers=4):
        gb, hb = certified_bounds(p, np.linalg.norm(z))
        worst_g = max(worst_g, np.linalg.norm(_grad(p, z, up)) / gb)
        d = np.linalg.norm(p.flat() - q.flat())
        if d > 1e-8:
            diff = np.linalg.norm(_grad(p, z, up) - _grad(q, z, up)) / d
            if hb == 0:
                assert diff < 1e-9
            else:
                worst_h = max(worst_h, diff / hb)
    assert worst_g <= 1 + 1e-9
    assert worst_h <= 1 + 1e-9


def test_init_scaling_and_projection():
    p = init([200, 300], Tanh(), RngKey(0))
    assert abs(p.weights[0].std() * np.sqrt(200) - 1.0) < 0.02
    assert np.all(p.biases[0] == 0)
    q = init([20, 30, 5], [Tanh(), Identity()], RngKey(0), bound=0.5)
    assert q.norm_inf() <= 0.5 * (1 + 1e-9)
    assert np.array_equal(init([3, 4], Tanh(), RngKey(9)).flat(), init([3, 4], Tanh(), RngKey(9)).flat())


def test_flat_roundtrip():
    p, r = random_net(11)
    v = r.normal(size=p.size)
    assert np.array_equal(p.with_flat(v).flat(), v)
    with pytest.raises(ValueError):
        p.with_flat(np.ones(p.size + 1))
