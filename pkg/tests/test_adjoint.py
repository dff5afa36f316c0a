import math

import numpy as np
import pytest

from nodessl.adjoint import grad_adjoint, grad_through_solver, odeint
from nodessl.diffcore import ContractError, Tape, Tensor, backward
from nodessl.odesolve import InstabilityError, SolverConfig, ode_solve
from nodessl.timehead import VectorField

TIGHT = SolverConfig(rtol=1e-8, atol=1e-10)


class ScaleField:
    """u(h) = theta * h with a single trainable scalar."""

    def __init__(self, theta):
        self.theta = Tensor(np.array([theta]), requires_grad=True)

    @property
    def params(self):
        return [self.theta]

    def __call__(self, h, t):
        return h * self.theta


def _rel(a, b):
    a, b = np.concatenate([np.ravel(x) for x in a]), np.concatenate([np.ravel(x) for x in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def triangle_instance(seed: int, n_rk4: int = 200, eps: float = 1e-5):
    """Adjoint, backprop-through-rk4 and central-difference gradients of
    L = |h(t1)|^2 for one random field; returns the three flattened vectors
    over (h0, theta, t0, t1)."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 9))
    field = VectorField.init(d, rng, hidden=(8,))
    h0 = rng.normal(size=d)
    t0, t1 = 0.0, float(rng.uniform(0.3, 1.0))
    rk4 = SolverConfig(method="rk4", fixed_step_count=n_rk4)

    h_end = ode_solve(h0, field.eval_numpy, t0, t1, TIGHT).h_end
    adj = grad_adjoint(h0, field, t0, t1, 2 * h_end, TIGHT)
    h_rk = ode_solve(h0, field.eval_numpy, t0, t1, rk4).h_end
    bp = grad_through_solver(h0, field, t0, t1, 2 * h_rk, rk4)

    def loss(h=h0, a=t0, b=t1):
        return float(np.sum(ode_solve(h, field.eval_numpy, a, b, rk4).h_end ** 2))

    def fd(arr):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = loss()
            arr[idx] = old - eps
            down = loss()
            arr[idx] = old
            g[idx] = (up - down) / (2 * eps)
        return g

    h_copy = h0.copy()
    fd_h = np.array([(loss(h=h_copy + eps * e) - loss(h=h_copy - eps * e)) / (2 * eps) for e in np.eye(d)])
    fd_theta = [fd(p.data) for p in field.params]
    fd_t0 = (loss(a=t0 + eps) - loss(a=t0 - eps)) / (2 * eps)
    fd_t1 = (loss(b=t1 + eps) - loss(b=t1 - eps)) / (2 * eps)

    def flat(g):
        return [g[0], *g[1], np.array([g[2]]), np.array([g[3]])]

    return flat(adj), flat(bp), [fd_h, *fd_theta, np.array([fd_t0]), np.array([fd_t1])]


@pytest.mark.parametrize("seed", range(20))
def test_gradient_triangle(seed):
    adj, bp, fd = triangle_instance(seed)
    assert _rel(adj, bp) < 1e-4
    assert _rel(adj, fd) < 1e-4
    assert _rel(bp, fd) < 1e-4


class ZeroField:
    """u == 0 for every theta."""

    def __init__(self, d):
        self.theta = Tensor(np.ones(d), requires_grad=True)

    @property
    def params(self):
        return [self.theta]

    def __call__(self, h, t):
        return h * self.theta * 0.0


def test_zero_field_identity_gradients():
    field = ZeroField(3)
    a1 = np.array([0.3, -1.0, 2.0])
    dh0, dth, dt0, dt1 = grad_adjoint(np.ones(3), field, 0.0, 2.0, a1)
    assert np.array_equal(dh0, a1)
    assert np.all(dth[0] == 0)
    assert dt0 == 0.0 and dt1 == 0.0
    bh0, bth, _, _ = grad_through_solver(np.ones(3), field, 0.0, 2.0, a1)
    assert np.array_equal(bh0, a1)
    assert np.all(bth[0] == 0)


def test_zero_weight_net_bias_gradient():
    # u = 0 at zero weights, but d u / d b_last = I, so dL/db_last = a1 * T
    rng = np.random.default_rng(0)
    field = VectorField.init(3, rng, hidden=(4,))
    for p in field.params:
        p.data[...] = 0.0
    a1 = np.array([0.3, -1.0, 2.0])
    dh0, dth, _, _ = grad_adjoint(np.ones(3), field, 0.0, 2.0, a1, TIGHT)
    assert np.allclose(dh0, a1)
    assert np.allclose(dth[-1], 2.0 * a1, rtol=1e-7)


def test_scalar_exponential_theta_gradient():
    field = ScaleField(1.0)
    _, dth, _, dt1 = grad_adjoint(np.array([1.0]), field, 0.0, 1.0, np.array([1.0]), TIGHT)
    assert dth[0][0] == pytest.approx(math.e, rel=1e-6)
    # dL/dt1 = a(t1) * u(h(t1)) = 1 * e
    assert dt1 == pytest.approx(math.e, rel=1e-6)


def test_linear_in_upstream_gradient():
    rng = np.random.default_rng(5)
    field = VectorField.init(3, rng, hidden=(6,))
    h0 = rng.normal(size=3)
    a, b = rng.normal(size=3), rng.normal(size=3)
    ga = grad_adjoint(h0, field, 0.0, 0.7, a, TIGHT)
    gb = grad_adjoint(h0, field, 0.0, 0.7, b, TIGHT)
    gab = grad_adjoint(h0, field, 0.0, 0.7, 2.0 * a - 3.0 * b, TIGHT)
    combo = [2.0 * x - 3.0 * y for x, y in zip([ga[0], *ga[1]], [gb[0], *gb[1]])]
    assert _rel([gab[0], *gab[1]], combo) < 1e-6


def test_zero_upstream_gives_exact_zeros():
    rng = np.random.default_rng(6)
    field = VectorField.init(4, rng, hidden=(6,))
    dh0, dth, dt0, dt1 = grad_adjoint(rng.normal(size=4), field, 0.0, 1.3, np.zeros(4))
    assert np.all(dh0 == 0) and all(np.all(g == 0) for g in dth)
    assert dt0 == 0.0 and dt1 == 0.0


def test_backprop_requires_rk4():
    field = ScaleField(1.0)
    with pytest.raises(ContractError):
        grad_through_solver(np.array([1.0]), field, 0.0, 1.0, np.array([1.0]), SolverConfig())


def test_backprop_converges_to_adjoint():
    rng = np.random.default_rng(8)
    field = VectorField.init(3, rng, hidden=(8,))
    h0 = rng.normal(size=3)
    a1 = rng.normal(size=3)
    adj = grad_adjoint(h0, field, 0.0, 2.0, a1, TIGHT)
    errs = []
    for n in (2, 4, 8, 16):
        bp = grad_through_solver(h0, field, 0.0, 2.0, a1, SolverConfig(method="rk4", fixed_step_count=n))
        errs.append(_rel([adj[0], *adj[1]], [bp[0], *bp[1]]))
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_linear_field_cross_oracle():
    field = ScaleField(-0.8)
    adj = grad_adjoint(np.array([1.5]), field, 0.0, 1.0, np.array([1.0]), TIGHT)
    bp = grad_through_solver(np.array([1.5]), field, 0.0, 1.0, np.array([1.0]),
                             SolverConfig(method="rk4", fixed_step_count=100))
    assert _rel([adj[0], *adj[1]], [bp[0], *bp[1]]) < 1e-5


def test_backward_failure_names_interval():
    field = ScaleField(50.0)
    with pytest.raises(InstabilityError, match=r"interval \[0, 3\]"):
        grad_adjoint(np.array([1.0]), field, 0.0, 3.0, np.array([1.0]), SolverConfig(max_steps=4),
                     h_end=np.array([1.0]))


def test_batched_rows_match_single():
    rng = np.random.default_rng(9)
    field = VectorField.init(3, rng, hidden=(6,))
    h0 = rng.normal(size=(3, 3))
    a1 = rng.normal(size=(3, 3))
    t0 = np.array([0.0, 1.0, 0.5])
    t1 = np.array([1.0, 0.2, 2.0])
    dh0, dth, dt0, dt1 = grad_adjoint(h0, field, t0, t1, a1, TIGHT)
    tot = [np.zeros_like(g) for g in dth]
    for b in range(3):
        s = grad_adjoint(h0[b], field, t0[b], t1[b], a1[b], TIGHT)
        assert np.allclose(dh0[b], s[0], rtol=1e-5, atol=1e-8)
        assert dt0[b] == pytest.approx(s[2], rel=1e-5, abs=1e-8)
        assert dt1[b] == pytest.approx(s[3], rel=1e-5, abs=1e-8)
        tot = [x + y for x, y in zip(tot, s[1])]
    assert _rel(dth, tot) < 1e-5


@pytest.mark.parametrize("mode", ["adjoint", "backprop"])
def test_odeint_tape_node(mode):
    rng = np.random.default_rng(11)
    field = VectorField.init(3, rng, hidden=(6,))
    h0 = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    t0, t1 = np.array([0.0, 0.5]), np.array([1.0, 1.5])
    cfg = SolverConfig(rtol=1e-8, atol=1e-10, fixed_step_count=100)
    with Tape() as tape:
        out = odeint(h0, field, t0, t1, cfg, mode)
        loss = (out * out).sum()
    grads = backward(tape, loss, [h0] + field.params)
    ref = grad_adjoint(h0.data, field, t0, t1, 2 * out.data, TIGHT)
    assert _rel([grads[h0]] + [grads[p] for p in field.params], [ref[0], *ref[1]]) < 1e-5


def test_odeint_untracked_outside_tape():
    rng = np.random.default_rng(12)
    field = VectorField.init(2, rng, hidden=(4,))
    out = odeint(Tensor(np.ones((1, 2))), field, 0.0, 1.0)
    ref = ode_solve(np.ones(2), field.eval_numpy, 0.0, 1.0).h_end
    assert np.allclose(out.data[0], ref, atol=1e-12)
