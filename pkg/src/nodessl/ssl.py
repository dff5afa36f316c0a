"""Self-supervised pre-training of the time-aware head.

Two schemes over consecutive visit pairs:

``simclr_dpa``
    Disease progression alignment. The first visit's latent is solved to two
    horizons ``dt + delta_plus`` and ``dt - delta_minus``; the two endpoints
    are a positive pair under NT-Xent, all other batch endpoints negatives.
``byol_tetc``
    Temporal evolution (IVP from ``t_i`` to ``t_i1``) and temporal
    consistency (FVP from ``t_i1`` back to ``t_i``), each an MSE between
    L2-normalised prediction and an EMA-target projection.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field as dc_field

import numpy as np

from .adjoint import odeint
from .diffcore import (
    ContractError,
    DenseNet,
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    concat,
    l2_normalize,
    logsumexp,
    matmul,
)
from .odesolve import SolverConfig, SolverError
from .optim import AdamW, global_norm, one_cycle_lr
from .synthdata import PairSet
from .timehead import TimeAwareModel

SCHEMES = ("simclr_dpa", "byol_tetc")
DELTA_MODES = ("aligned", "fixed", "unaligned")
DEFAULT_DELTA = 0.25  # three months, in years
MONTHLY_SCALE = 12.0 / 365.0


class DivergenceError(RuntimeError):
    """Training hit a NaN/Inf or a solver failure; carries the step index."""

    def __init__(self, message: str, epoch: int, step: int, curve: list | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.curve = curve or []


# delta augmentation


@dataclass
class DeltaAug:
    r: np.ndarray
    delta: np.ndarray
    delta_plus: np.ndarray
    delta_minus: np.ndarray


def split_interval(delta: np.ndarray, draw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``delta`` at ``draw`` so that ``plus + minus == delta`` in floating point.

    The larger piece is formed by a subtraction that Sterbenz's lemma makes
    exact, so the floating-point sum of the two pieces reproduces ``delta``.
    """
    delta = np.asarray(delta, dtype=float)
    draw = np.asarray(draw, dtype=float)
    upper = draw >= 0.5 * delta
    rest = delta - draw
    plus = np.where(upper, draw, delta - rest)
    return plus, rest


def compute_delta(S_ti, S_ti1, t_i, t_i1, mode: str = "aligned", rng: np.random.Generator | None = None,
                  delta_scale: float = MONTHLY_SCALE, default_delta: float = DEFAULT_DELTA,
                  unaligned_max: float = 2 * DEFAULT_DELTA) -> DeltaAug:
    """Per-pair augmentation interval and its random two-way split.

    ``aligned``: ``delta = |rate| * delta_scale`` with the 3-month default
    when the grade is stable; ``fixed``: the default for every pair;
    ``unaligned``: uniform on ``[0, unaligned_max]`` regardless of grades.
    """
    if mode not in DELTA_MODES:
        raise ContractError(f"unknown delta mode {mode!r}")
    rng = np.random.default_rng() if rng is None else rng
    S_ti, S_ti1 = np.asarray(S_ti, dtype=float), np.asarray(S_ti1, dtype=float)
    t_i, t_i1 = np.asarray(t_i, dtype=float), np.asarray(t_i1, dtype=float)
    if np.any(t_i1 - t_i <= 0):
        raise ContractError("pairs need t_i1 > t_i")
    r = (S_ti1 - S_ti) / (t_i1 - t_i)
    shape = np.broadcast(r, t_i).shape
    if mode == "aligned":
        delta = np.abs(r) * delta_scale
        delta = np.where(delta == 0, default_delta, delta)
    elif mode == "fixed":
        delta = np.full(shape, default_delta)
    else:
        delta = rng.uniform(0.0, unaligned_max, size=shape)
    delta = np.broadcast_to(delta, shape).astype(float)
    plus, minus = split_interval(delta, rng.uniform(0.0, 1.0, size=shape) * delta)
    return DeltaAug(r, delta, plus, minus)


def clamp_minus(dt: np.ndarray, delta_minus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shrink ``delta_minus`` to ``dt / 2`` where it would reach the source time."""
    bad = dt - delta_minus <= 0
    return np.where(bad, 0.5 * dt, delta_minus), bad


def dpa_views(h_ti: Tensor, t_i, dt, aug: DeltaAug, field, cfg: SolverConfig = SolverConfig(),
              grad_mode: str = "adjoint"):
    """Endpoints at ``t_i + dt + delta_plus`` and ``t_i + dt - delta_minus``.

    Accepts a single latent (dim,) or a batch (B, dim). Returns
    ``(view_a, view_b, clamped)``.
    """
    single = h_ti.ndim == 1
    h = h_ti.reshape((1, -1)) if single else h_ti
    B = h.shape[0]
    t_i = np.broadcast_to(np.asarray(t_i, dtype=float), (B,))
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (B,))
    plus = np.broadcast_to(aug.delta_plus, (B,))
    minus, clamped = clamp_minus(dt, np.broadcast_to(aug.delta_minus, (B,)))
    t_end = np.concatenate([t_i + dt + plus, t_i + dt - minus])
    both = odeint(concat([h, h], axis=0), field, np.concatenate([t_i, t_i]), t_end, cfg, grad_mode)
    view_a, view_b = both[:B], both[B:]
    if single:
        return view_a.reshape((-1,)), view_b.reshape((-1,)), clamped
    return view_a, view_b, clamped


def nt_xent_loss(views, temperature: float = 0.5) -> Tensor:
    """Normalised temperature-scaled cross entropy over 2N embeddings.

    ``views`` is (2N, dim) with row ``i`` and row ``i + N`` a positive pair,
    or a tuple ``(view_a, view_b)`` of (N, dim) each.
    """
    if isinstance(views, (tuple, list)):
        views = concat(list(views), axis=0)
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    n2 = views.shape[0]
    if n2 % 2 or n2 < 4:
        raise ContractError("nt_xent_loss needs 2N embeddings with N >= 2")
    n = n2 // 2
    z = l2_normalize(views, axis=-1)
    sim = matmul(z, z.T) * (1.0 / temperature)
    # self-similarity masked out of the denominator
    masked = sim + np.eye(n2) * -1e9
    pos = np.concatenate([np.arange(n, n2), np.arange(n)])
    positive = sim[np.arange(n2), pos]
    return (logsumexp(masked, axis=-1) - positive).mean()


# BYOL


@dataclass
class EmaPair:
    """Online parameters and their EMA target copies."""

    online: list[Tensor]
    target: list[Tensor]
    alpha: float = 0.99

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ContractError("EMA alpha must lie in (0, 1]")
        if len(self.online) != len(self.target):
            raise ContractError("online/target parameter lists differ in length")
        for a, b in zip(self.online, self.target):
            if a.shape != b.shape:
                raise ContractError(f"EMA shape mismatch {a.shape} vs {b.shape}")


def ema_update(pair: EmaPair) -> EmaPair:
    """``target <- alpha * target + (1 - alpha) * online``; online untouched."""
    a = pair.alpha
    for mu, xi in zip(pair.online, pair.target):
        if mu.shape != xi.shape:
            raise ContractError(f"EMA shape mismatch {mu.shape} vs {xi.shape}")
        xi.data = a * xi.data + (1.0 - a) * mu.data
    return pair


def _frozen_copy(net: DenseNet) -> DenseNet:
    out = copy.deepcopy(net)
    for p in out.params:
        p.requires_grad = False
    return out


@dataclass
class ByolTarget:
    """Target tower: projector copy, plus an encoder copy when towers are separate."""

    projector: DenseNet
    encoder: DenseNet | None = None

    @classmethod
    def from_online(cls, model: TimeAwareModel, shared_encoder: bool = True) -> "ByolTarget":
        return cls(_frozen_copy(model.projector), None if shared_encoder else _frozen_copy(model.encoder))

    def params(self) -> list[Tensor]:
        return self.projector.params + ([] if self.encoder is None else self.encoder.params)

    def ema_pair(self, model: TimeAwareModel, alpha: float) -> EmaPair:
        online = model.projector.params + ([] if self.encoder is None else model.encoder.params)
        return EmaPair(online, self.params(), alpha)

    def project(self, x: np.ndarray, model: TimeAwareModel) -> np.ndarray:
        enc = model.encoder if self.encoder is None else self.encoder
        return self.projector.apply_numpy(enc.apply_numpy(np.asarray(x, dtype=float)))


def normalized_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over rows of ``||n(pred) - n(target)||^2`` with n the L2 normaliser."""
    tgt = target / np.linalg.norm(target, axis=-1, keepdims=True)
    diff = l2_normalize(pred, axis=-1) - tgt
    return (diff * diff).sum(axis=-1).mean()


def byol_losses(x_i, x_i1, t_i, t_i1, model: TimeAwareModel, target: ByolTarget,
                cfg: SolverConfig = SolverConfig(), with_tc: bool = True, grad_mode: str = "adjoint"):
    """``(L_forward, L_backward)`` for a batch of pairs; ``L_backward`` is None without TC.

    The online latent of ``x_i`` is solved forward to ``t_i1`` and compared
    with the target projection of ``x_i1``; with TC, the online latent of
    ``x_i1`` is solved back to ``t_i`` against the target projection of
    ``x_i``. No gradient reaches the target tower.
    """
    x_i, x_i1 = np.atleast_2d(x_i), np.atleast_2d(x_i1)
    B = x_i.shape[0]
    t_i = np.broadcast_to(np.asarray(t_i, dtype=float), (B,))
    t_i1 = np.broadcast_to(np.asarray(t_i1, dtype=float), (B,))
    if with_tc:
        h = model.embed(np.concatenate([x_i, x_i1], axis=0))
        pred = odeint(h, model.field, np.concatenate([t_i, t_i1]), np.concatenate([t_i1, t_i]), cfg, grad_mode)
        tgt = target.project(np.concatenate([x_i1, x_i], axis=0), model)
        return normalized_mse(pred[:B], tgt[:B]), normalized_mse(pred[B:], tgt[B:])
    h = model.embed(x_i)
    pred = odeint(h, model.field, t_i, t_i1, cfg, grad_mode)
    return normalized_mse(pred, target.project(x_i1, model)), None


# training loop


@dataclass
class PretrainConfig:
    scheme: str = "byol_tetc"
    epochs: int = 40
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    delta_mode: str = "aligned"
    delta_scale: float = MONTHLY_SCALE
    with_tc: bool = True
    tau: float = 0.5
    alpha: float = 0.99
    shared_encoder: bool = True
    grad_mode: str = "adjoint"

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {self.scheme!r}")
        if self.delta_mode not in DELTA_MODES:
            raise ContractError(f"unknown delta mode {self.delta_mode!r}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ContractError("epochs must be >= 0 and batch_size >= 2")
        if self.lr < 0 or self.weight_decay < 0 or self.tau <= 0 or not 0 < self.alpha <= 1:
            raise ContractError("invalid optimiser/loss hyperparameters")
        if self.grad_mode not in ("adjoint", "backprop"):
            raise ContractError(f"unknown grad_mode {self.grad_mode!r}")


@dataclass
class PretrainResult:
    model: TimeAwareModel
    curve: list[dict]
    target: ByolTarget | None = None
    delta_trace: list[str] = dc_field(default_factory=list)
    clamps: int = 0


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing singleton cannot form NT-Xent negatives
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def ssl_step_loss(batch: PairSet, model: TimeAwareModel, hp: PretrainConfig, cfg: SolverConfig,
                  rng: np.random.Generator, target: ByolTarget | None = None):
    """Loss tensor and named scalar terms for one batch (records on the active tape)."""
    if hp.scheme == "simclr_dpa":
        aug = compute_delta(batch.S_i, batch.S_i1, batch.t_i, batch.t_i1, hp.delta_mode, rng, hp.delta_scale)
        h = model.embed(batch.x_i)
        va, vb, clamped = dpa_views(h, batch.t_i, batch.dt, aug, model.field, cfg, hp.grad_mode)
        loss = nt_xent_loss((va, vb), hp.tau)
        return loss, {"nt_xent": float(loss.data)}, {"delta_mode": hp.delta_mode, "clamps": int(clamped.sum())}
    lf, lb = byol_losses(batch.x_i, batch.x_i1, batch.t_i, batch.t_i1, model, target, cfg, hp.with_tc,
                         hp.grad_mode)
    terms = {"forward": float(lf.data)}
    loss = lf
    if lb is not None:
        terms["backward"] = float(lb.data)
        loss = lf + lb
    return loss, terms, {}


def pretrain(pairs: PairSet, model: TimeAwareModel, hp: PretrainConfig, cfg: SolverConfig = SolverConfig(),
             seed: int = 0) -> PretrainResult:
    """Train encoder, projector and field with one SSL scheme.

    Deterministic for a fixed seed. A NaN/Inf or solver failure raises
    :class:`DivergenceError` naming the epoch and global step.
    """
    hp.validate()
    if len(pairs) < 2:
        raise ContractError("pretraining needs at least two pairs")
    order_rng, aug_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    params = model.encoder.params + model.projector.params + model.field.params
    opt = AdamW(params, hp.lr, hp.weight_decay)
    target = ByolTarget.from_online(model, hp.shared_encoder) if hp.scheme == "byol_tetc" else None
    ema = target.ema_pair(model, hp.alpha) if target is not None else None
    n_batches = len(batch_order(len(pairs), hp.batch_size, np.random.default_rng(0)))
    total = max(1, hp.epochs * n_batches)
    curve: list[dict] = []
    trace: list[str] = []
    clamps = 0
    step = 0
    for epoch in range(hp.epochs):
        for idx in batch_order(len(pairs), hp.batch_size, order_rng):
            batch = pairs.subset(idx)
            lr = one_cycle_lr(step, total, hp.lr)
            try:
                with Tape() as tape:
                    loss, terms, info = ssl_step_loss(batch, model, hp, cfg, aug_rng, target)
                grads = backward(tape, loss, params)
                gnorm = global_norm(grads)
                if not np.isfinite(gnorm):
                    raise NonFiniteError("non-finite gradient norm")
            except (NonFiniteError, SolverError, FloatingPointError) as exc:
                curve.append(_row(epoch, step, hp.scheme, float("nan"), {}, float("nan"), True))
                raise DivergenceError(f"pretraining diverged at epoch {epoch}, step {step}: {exc}",
                                      epoch, step, curve) from exc
            if "delta_mode" in info:
                trace.append(info["delta_mode"])
                clamps += info["clamps"]
            opt.step(grads, lr)
            if ema is not None:
                ema_update(ema)
            curve.append(_row(epoch, step, hp.scheme, float(loss.data), terms, gnorm, False))
            step += 1
    return PretrainResult(model, curve, target, trace, clamps)


def _row(epoch, step, scheme, loss, terms, gnorm, nan_flag) -> dict:
    return {"epoch": epoch, "step": step, "scheme": scheme, "loss": loss, "terms": terms,
            "grad_norm": gnorm, "nan_flag": nan_flag}
