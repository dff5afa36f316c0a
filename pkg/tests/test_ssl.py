import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kstest, special_ortho_group

from nodessl.diffcore import ContractError, DenseNet, Tape, Tensor, backward
from nodessl.odesolve import SolverConfig
from nodessl.ssl import (
    DEFAULT_DELTA,
    ByolTarget,
    DeltaAug,
    EmaPair,
    PretrainConfig,
    batch_order,
    byol_losses,
    compute_delta,
    dpa_views,
    ema_update,
    normalized_mse,
    nt_xent_loss,
    pretrain,
    split_interval,
    ssl_step_loss,
)
from nodessl.synthdata import CohortConfig, build_pairs, generate_cohort
from nodessl.timehead import TimeAwareModel, VectorField

FINE = SolverConfig(method="rk4", fixed_step_count=1000)


def brute_nt_xent(z, tau):
    """Direct enumeration of the SimCLR objective over 2N rows."""
    n2 = len(z)
    n = n2 // 2
    u = z / np.linalg.norm(z, axis=1, keepdims=True)
    total = 0.0
    for i in range(n2):
        j = (i + n) % n2
        num = math.exp(float(u[i] @ u[j]) / tau)
        den = sum(math.exp(float(u[i] @ u[k]) / tau) for k in range(n2) if k != i)
        total += -math.log(num / den)
    return total / n2


# delta augmentation


def test_delta_stable_grade_gets_default():
    aug = compute_delta(2, 2, 0.0, 1.0, "aligned", np.random.default_rng(0))
    assert float(aug.r) == 0.0
    assert float(aug.delta) == DEFAULT_DELTA == 0.25


def test_delta_literal_rate_formula():
    aug = compute_delta(2, 3, 0.0, 1.0, "aligned", np.random.default_rng(0))
    assert float(aug.r) == 1.0
    assert float(aug.delta) == pytest.approx(12 / 365, abs=1e-15)
    assert float(aug.delta) == pytest.approx(0.032877, abs=1e-6)


def test_delta_fixed_and_unaligned_modes():
    rng = np.random.default_rng(1)
    S0 = rng.integers(0, 5, 500)
    S1 = rng.integers(0, 5, 500)
    t0 = np.zeros(500)
    t1 = rng.uniform(0.2, 3, 500)
    assert np.all(compute_delta(S0, S1, t0, t1, "fixed", rng).delta == 0.25)
    un = compute_delta(S0, S1, t0, t1, "unaligned", rng).delta
    assert un.min() >= 0 and un.max() <= 0.5 and un.std() > 0.1


def test_delta_rejects_nonpositive_gap():
    with pytest.raises(ContractError):
        compute_delta(1, 2, 1.0, 1.0, "aligned")
    with pytest.raises(ContractError):
        compute_delta(1, 2, 0.0, 1.0, "sideways")


@pytest.mark.parametrize("mode", ["aligned", "fixed", "unaligned"])
def test_delta_split_exact_and_uniform(mode):
    rng = np.random.default_rng(2024)
    n = 10_000
    S0 = rng.integers(0, 5, n)
    S1 = np.clip(S0 + rng.integers(0, 3, n), 0, 4)
    t0 = rng.uniform(0, 5, n)
    t1 = t0 + rng.lognormal(0, 0.5, n)
    aug = compute_delta(S0, S1, t0, t1, mode, rng)
    assert np.max(np.abs(aug.delta_plus + aug.delta_minus - aug.delta)) == 0.0
    assert np.all((aug.delta_plus >= 0) & (aug.delta_plus <= aug.delta))
    assert np.all(aug.delta_minus >= 0)
    assert kstest(aug.delta_plus / aug.delta, "uniform").pvalue > 0.01


@settings(max_examples=200, deadline=None)
@given(delta=st.floats(0, 1e6, allow_subnormal=False), u=st.floats(0, 1))
def test_split_interval_exact(delta, u):
    plus, minus = split_interval(np.array([delta]), np.array([u * delta]))
    assert plus[0] + minus[0] == delta
    assert 0 <= plus[0] <= delta and minus[0] >= 0


# views


def _scalar_field(coef=1.0):
    # u(h, t) = coef * h through the generic VectorField
    return VectorField(DenseNet([Tensor([[coef], [0.0]])], [Tensor([0.0])], ["identity"]))


def test_views_identical_when_delta_zero(rng):
    f = VectorField.init(3, rng, hidden=(5,))
    aug = DeltaAug(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2))
    a, b, _ = dpa_views(Tensor(rng.normal(size=(2, 3))), np.zeros(2), np.ones(2), aug, f)
    assert np.array_equal(a.data, b.data)


def test_views_zero_field(rng):
    f = VectorField.init(3, rng, hidden=(5,))
    for p in f.params:
        p.data[...] = 0
    h = rng.normal(size=(2, 3))
    aug = compute_delta([0, 1], [1, 3], [0, 0], [1, 0.5], "aligned", rng)
    a, b, _ = dpa_views(Tensor(h), np.zeros(2), np.array([1.0, 0.5]), aug, f)
    assert np.array_equal(a.data, h) and np.array_equal(b.data, h)


def test_views_linear_field_analytic():
    f = _scalar_field()
    aug = DeltaAug(np.zeros(1), np.array([0.3]), np.array([0.1]), np.array([0.2]))
    a, b, clamped = dpa_views(Tensor([0.7]), 0.5, 1.0, aug, f, SolverConfig(rtol=1e-10, atol=1e-12))
    assert a.data[0] == pytest.approx(0.7 * math.exp(1.1), rel=1e-8)
    assert b.data[0] == pytest.approx(0.7 * math.exp(0.8), rel=1e-8)
    assert not clamped.any()


def test_views_clamp_short_gap():
    f = _scalar_field()
    aug = DeltaAug(np.zeros(1), np.array([0.3]), np.array([0.1]), np.array([0.2]))
    _, b, clamped = dpa_views(Tensor([1.0]), 0.0, 0.1, aug, f, SolverConfig(rtol=1e-10, atol=1e-12))
    assert clamped.all()
    assert b.data[0] == pytest.approx(math.exp(0.05), rel=1e-8)


# NT-Xent


def test_nt_xent_identical_is_ln3():
    z = np.ones((4, 3))
    for tau in (0.1, 0.5, 2.0):
        assert float(nt_xent_loss(Tensor(z), tau).data) == pytest.approx(math.log(3), abs=1e-10)
    assert math.log(3) == pytest.approx(1.0986, abs=1e-4)


def test_nt_xent_orthogonal_negatives():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    val = float(nt_xent_loss((Tensor(np.stack([e1, e2])), Tensor(np.stack([e1, e2]))), 0.5).data)
    expect = -math.log(math.exp(2) / (math.exp(2) + 2))
    assert val == pytest.approx(expect, abs=1e-10)
    assert val == pytest.approx(0.2395, abs=1e-4)


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("seed", range(5))
def test_nt_xent_brute_force(n, seed):
    z = np.random.default_rng(seed).normal(size=(2 * n, 4))
    for tau in (0.2, 0.5, 1.0):
        assert float(nt_xent_loss(Tensor(z), tau).data) == pytest.approx(brute_nt_xent(z, tau), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_nt_xent_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(6, 4))
    R = special_ortho_group.rvs(4, random_state=seed)
    a = float(nt_xent_loss(Tensor(z)).data)
    b = float(nt_xent_loss(Tensor(z @ R)).data)
    assert a == pytest.approx(b, abs=1e-12)


def test_nt_xent_monotone_in_positive_cosine():
    # anchors e1/e2 fixed, positives rotate toward their anchors
    def loss(angle):
        c, s = math.cos(angle), math.sin(angle)
        a = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        b = np.array([[c, 0, s], [0, c, s]])
        return float(nt_xent_loss((Tensor(a), Tensor(b))).data)

    vals = [loss(x) for x in (1.2, 0.8, 0.4, 0.0)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_nt_xent_contracts():
    with pytest.raises(ContractError):
        nt_xent_loss(Tensor(np.ones((2, 3))))
    with pytest.raises(ContractError):
        nt_xent_loss(Tensor(np.ones((4, 3))), 0.0)
    with pytest.raises(ContractError):
        nt_xent_loss(Tensor(np.vstack([np.zeros(3), np.ones((3, 3))])))


def test_nt_xent_gradient_matches_fd(rng):
    from conftest import central_difference

    z = rng.normal(size=(6, 3))
    t = Tensor(z, requires_grad=True)
    with Tape() as tape:
        loss = nt_xent_loss(t)
    g = backward(tape, loss)[t]
    fd = central_difference(lambda: brute_nt_xent(z, 0.5), z)
    assert np.allclose(g, fd, atol=1e-7)


# BYOL


def _linear_model(P_on, rot=0.0):
    """2-dim model: identity encoder, linear projector, rotation field."""
    enc = DenseNet([Tensor(np.eye(2), requires_grad=True)], [Tensor(np.zeros(2), requires_grad=True)], ["identity"])
    proj = DenseNet([Tensor(P_on, requires_grad=True)], [Tensor(np.zeros(2), requires_grad=True)], ["identity"])
    W = np.array([[0.0, rot], [-rot, 0.0], [0.0, 0.0]])
    field = VectorField(DenseNet([Tensor(W, requires_grad=True)], [Tensor(np.zeros(2), requires_grad=True)],
                                 ["identity"]))
    return TimeAwareModel(enc, proj, field)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_byol_perfect_prediction_is_zero(rng):
    m = _linear_model(np.array([[1.0, 0.5], [-0.3, 2.0]]))
    tgt = ByolTarget.from_online(m)
    x = rng.normal(size=(3, 2))
    lf, lb = byol_losses(x, x, np.zeros(3), np.ones(3), m, tgt)
    assert float(lf.data) == pytest.approx(0.0, abs=1e-20)
    assert float(lb.data) == pytest.approx(0.0, abs=1e-20)


def test_normalized_mse_orthogonal_is_two():
    val = normalized_mse(Tensor([[3.0, 0.0]]), np.array([[0.0, 0.5]]))
    assert float(val.data) == pytest.approx(2.0, abs=1e-15)
    val = normalized_mse(Tensor([[3.0, 4.0]]), np.array([[1.0, 0.0]]))
    assert float(val.data) == pytest.approx(2 - 2 * 0.6, abs=1e-15)


def test_byol_two_dim_direct_arithmetic():
    P_on = np.array([[1.0, 0.2], [0.0, 1.0]])
    P_tg = np.array([[0.5, -1.0], [1.0, 0.3]])
    w = 0.7
    m = _linear_model(P_on, w)
    tgt = ByolTarget.from_online(m)
    tgt.projector.weights[0].data = P_tg.copy()
    x_i = np.array([[1.0, 2.0], [-0.5, 0.3]])
    x_i1 = np.array([[0.4, -1.0], [2.0, 1.0]])
    t_i, t_i1 = np.array([0.0, 1.0]), np.array([0.5, 2.5])

    def R(theta):
        # flow of dh/dt = h @ [[0, w], [-w, 0]] as row vectors
        c, s = math.cos(theta), math.sin(theta)
        return np.array([[c, s], [-s, c]])

    pred_f = np.stack([(x_i[b] @ P_on) @ R(w * (t_i1[b] - t_i[b])) for b in range(2)])
    pred_b = np.stack([(x_i1[b] @ P_on) @ R(-w * (t_i1[b] - t_i[b])) for b in range(2)])
    lf_ref = np.mean(np.sum((_unit(pred_f) - _unit(x_i1 @ P_tg)) ** 2, axis=1))
    lb_ref = np.mean(np.sum((_unit(pred_b) - _unit(x_i @ P_tg)) ** 2, axis=1))
    lf, lb = byol_losses(x_i, x_i1, t_i, t_i1, m, tgt, FINE)
    assert float(lf.data) == pytest.approx(lf_ref, abs=1e-10)
    assert float(lb.data) == pytest.approx(lb_ref, abs=1e-10)
    lf2, lb2 = byol_losses(x_i, x_i1, t_i, t_i1, m, tgt, FINE, with_tc=False)
    assert lb2 is None and float(lf2.data) == pytest.approx(lf_ref, abs=1e-10)


def test_byol_loss_bounded(rng):
    m = TimeAwareModel.init(5, rng, "node", (6,), (4,), (6,), with_head=False)
    tgt = ByolTarget.from_online(m)
    for p in tgt.params():
        p.data = rng.normal(size=p.shape)
    x = rng.normal(size=(8, 5))
    lf, lb = byol_losses(x, rng.normal(size=(8, 5)), np.zeros(8), np.ones(8), m, tgt)
    assert 0 <= float(lf.data) <= 4 and 0 <= float(lb.data) <= 4


def test_no_gradient_reaches_target(rng):
    m = TimeAwareModel.init(5, rng, "node", (6,), (4,), (6,), with_head=False)
    tgt = ByolTarget.from_online(m, shared_encoder=False)
    x_i, x_i1 = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    t_i, t_i1 = np.zeros(4), np.full(4, 0.8)
    with Tape() as tape:
        lf, lb = byol_losses(x_i, x_i1, t_i, t_i1, m, tgt)
        loss = lf + lb
    grads = backward(tape, loss)
    target_ids = {id(p) for p in tgt.params()}
    assert not target_ids & {id(k) for k in grads}
    assert all(id(p) in {id(k) for k in grads} for p in m.projector.params)
    # ... yet the loss does depend on the target weights
    tgt.projector.weights[-1].data = tgt.projector.weights[-1].data + 1e-3
    lf2, lb2 = byol_losses(x_i, x_i1, t_i, t_i1, m, tgt)
    assert float((lf2 + lb2).data) != float(loss.data)


# EMA


def test_ema_scalar():
    mu, xi = Tensor([0.0]), Tensor([1.0])
    ema_update(EmaPair([mu], [xi], 0.9))
    assert xi.data[0] == pytest.approx(0.9, abs=1e-15)
    assert mu.data[0] == 0.0


def test_ema_fixed_point(rng):
    v = rng.normal(size=(3, 2))
    mu, xi = Tensor(v.copy()), Tensor(v.copy())
    ema_update(EmaPair([mu], [xi], 0.7))
    assert np.allclose(xi.data, v, rtol=0, atol=1e-15)


def test_ema_geometric_convergence(rng):
    mu0, xi0 = rng.normal(size=4), rng.normal(size=4)
    mu, xi = Tensor(mu0.copy()), Tensor(xi0.copy())
    pair = EmaPair([mu], [xi], 0.95)
    for k in range(1, 101):
        ema_update(pair)
        assert np.allclose(xi.data, mu0 + 0.95 ** k * (xi0 - mu0), atol=1e-12)


def test_ema_contracts():
    with pytest.raises(ContractError):
        EmaPair([Tensor([1.0])], [Tensor([1.0])], 0.0)
    with pytest.raises(ContractError):
        EmaPair([Tensor([1.0])], [Tensor([1.0, 2.0])], 0.5)


# pretraining loop


@pytest.fixture(scope="module")
def small_pairs():
    return build_pairs(generate_cohort(CohortConfig(n_patients=12, obs_dim=6), seed=3))


def _small_model(seed=0):
    return TimeAwareModel.init(6, np.random.default_rng(seed), "node", (8,), (4,), (8,), with_head=False)


def _weights(m):
    return [p.data.copy() for p in m.encoder.params + m.projector.params + m.field.params]


@pytest.mark.parametrize("scheme", ["simclr_dpa", "byol_tetc"])
def test_pretrain_lr_zero_keeps_weights(scheme, small_pairs):
    m = _small_model()
    before = _weights(m)
    res = pretrain(small_pairs, m, PretrainConfig(scheme=scheme, epochs=1, lr=0.0, batch_size=16), seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(before, _weights(m)))
    assert len(res.curve) == len(batch_order(len(small_pairs), 16, np.random.default_rng(0)))


@pytest.mark.parametrize("scheme", ["simclr_dpa", "byol_tetc"])
def test_pretrain_replay_oracle(scheme, small_pairs):
    hp = PretrainConfig(scheme=scheme, epochs=1, lr=0.0, batch_size=16)
    res = pretrain(small_pairs, _small_model(), hp, seed=5)
    m = _small_model()
    order_rng, aug_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(5).spawn(2))
    target = ByolTarget.from_online(m) if scheme == "byol_tetc" else None
    replay = []
    for idx in batch_order(len(small_pairs), 16, order_rng):
        loss, _, _ = ssl_step_loss(small_pairs.subset(idx), m, hp, SolverConfig(), aug_rng, target)
        replay.append(float(loss.data))
    assert [r["loss"] for r in res.curve] == replay


def test_pretrain_first_step_matches_replay_with_training(small_pairs):
    hp = PretrainConfig(scheme="byol_tetc", epochs=2, lr=1e-2, batch_size=16)
    res = pretrain(small_pairs, _small_model(), hp, seed=9)
    m = _small_model()
    order_rng, aug_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(9).spawn(2))
    idx = batch_order(len(small_pairs), 16, order_rng)[0]
    loss, _, _ = ssl_step_loss(small_pairs.subset(idx), m, hp, SolverConfig(), aug_rng, ByolTarget.from_online(m))
    assert res.curve[0]["loss"] == float(loss.data)
    assert res.curve[-1]["loss"] != res.curve[0]["loss"]


def test_pretrain_alpha_one_freezes_target(small_pairs):
    m = _small_model()
    init_proj = [p.data.copy() for p in m.projector.params]
    res = pretrain(small_pairs, m, PretrainConfig(epochs=2, lr=1e-2, alpha=1.0, batch_size=16), seed=2)
    assert all(np.array_equal(a, p.data) for a, p in zip(init_proj, res.target.projector.params))
    assert not all(np.array_equal(a, p.data) for a, p in zip(init_proj, m.projector.params))


def test_pretrain_deterministic(small_pairs):
    hp = PretrainConfig(scheme="simclr_dpa", epochs=2, lr=1e-2, batch_size=16)
    a, b = _small_model(), _small_model()
    ra = pretrain(small_pairs, a, hp, seed=4)
    rb = pretrain(small_pairs, b, hp, seed=4)
    assert ra.curve == rb.curve
    assert all(np.array_equal(x, y) for x, y in zip(_weights(a), _weights(b)))


def test_pretrain_without_tc_logs_forward_only(small_pairs):
    res = pretrain(small_pairs, _small_model(), PretrainConfig(epochs=1, with_tc=False, batch_size=16), seed=0)
    assert all(set(r["terms"]) == {"forward"} for r in res.curve)
    res = pretrain(small_pairs, _small_model(), PretrainConfig(epochs=1, batch_size=16), seed=0)
    assert all(set(r["terms"]) == {"forward", "backward"} for r in res.curve)


def test_pretrain_trace_records_delta_mode(small_pairs):
    hp = PretrainConfig(scheme="simclr_dpa", epochs=1, delta_mode="aligned", batch_size=16)
    res = pretrain(small_pairs, _small_model(), hp, seed=0)
    assert set(res.delta_trace) == {"aligned"}


def test_pretrain_config_validation():
    for bad in ({"scheme": "moco"}, {"delta_mode": "x"}, {"alpha": 0.0}, {"tau": 0.0}, {"batch_size": 1}):
        with pytest.raises(ContractError):
            PretrainConfig(**bad).validate()


def test_batch_order_merges_singleton():
    batches = batch_order(9, 4, np.random.default_rng(0))
    assert [len(b) for b in batches] == [4, 5]
    assert sorted(np.concatenate(batches).tolist()) == list(range(9))
