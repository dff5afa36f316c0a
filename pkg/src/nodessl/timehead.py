"""Time-aware heads: the NODE vector field, ODE-RNN cells, encoder, projector.

The latent of an observation is ``projector(encoder(x))``. A head carries it
forward in time by solving the field's IVP; the recurrent variants also fold
in each later observation with an RNN/GRU/LSTM cell (evolve, then update).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from .adjoint import odeint
from .diffcore import (
    ContractError,
    DenseNet,
    Tensor,
    as_tensor,
    concat,
    log_softmax,
    matmul,
    sigmoid,
    tanh,
    where,
)
from .odesolve import SolverConfig, ode_solve

N_GRADES = 5
HEAD_KINDS = ("node", "node_rnn", "node_gru", "node_lstm")
CELL_FOR_HEAD = {"node": None, "node_rnn": "rnn", "node_gru": "gru", "node_lstm": "lstm"}


class VectorField:
    """``u(h, t)``: a tanh DenseNet applied to ``h`` with time appended as one feature."""

    def __init__(self, net: DenseNet):
        if net.in_dim != net.out_dim + 1:
            raise ContractError(f"field net must map dim+1 -> dim, got {net.in_dim} -> {net.out_dim}")
        self.net = net

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, hidden: Sequence[int] = (64, 64)) -> "VectorField":
        return cls(DenseNet.init([dim + 1, *hidden, dim], rng))

    @property
    def dim(self) -> int:
        return self.net.out_dim

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    @staticmethod
    def _time_column(t, rows: int):
        if isinstance(t, Tensor):
            if t.data.ndim == 0:
                return np.ones((rows, 1)) * t
            return t.reshape((rows, 1))
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(t.reshape(-1, 1) if t.ndim else t, (rows, 1))

    def __call__(self, h, t) -> Tensor:
        h = as_tensor(h)
        if h.ndim == 1:
            return self(h.reshape((1, -1)), t).reshape((-1,))
        return self.net(concat([h, self._time_column(t, h.shape[0])], axis=-1))

    def eval_numpy(self, h: np.ndarray, t) -> np.ndarray:
        if h.ndim == 1:
            return self.eval_numpy(h[None, :], t)[0]
        tcol = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (h.shape[0], 1))
        return self.net.apply_numpy(np.concatenate([h, tcol], axis=1))


class RecurrentCell:
    """Vanilla RNN, GRU or LSTM update ``(x, h, c) -> (h', c')``.

    GRU convention: ``h' = (1 - z) * h + z * n``, so an update gate of one
    replaces the state with the candidate.
    """

    _GATES = {"rnn": 1, "gru": 3, "lstm": 4}

    def __init__(self, kind: str, W: Tensor, U: Tensor, b: Tensor):
        if kind not in self._GATES:
            raise ContractError(f"unknown cell kind {kind!r}")
        n = self._GATES[kind]
        hidden = U.shape[0]
        if W.shape[1] != n * hidden or U.shape != (hidden, n * hidden) or b.shape != (n * hidden,):
            raise ContractError(f"{kind} weight shapes inconsistent with hidden size {hidden}")
        self.kind, self.W, self.U, self.b = kind, W, U, b

    @classmethod
    def init(cls, kind: str, input_dim: int, hidden: int, rng: np.random.Generator) -> "RecurrentCell":
        n = cls._GATES[kind]
        bound = 1.0 / np.sqrt(hidden)
        W = Tensor(rng.uniform(-bound, bound, (input_dim, n * hidden)), requires_grad=True)
        U = Tensor(rng.uniform(-bound, bound, (hidden, n * hidden)), requires_grad=True)
        b = Tensor(rng.uniform(-bound, bound, n * hidden), requires_grad=True)
        return cls(kind, W, U, b)

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @property
    def params(self) -> list[Tensor]:
        return [self.W, self.U, self.b]

    def __call__(self, x, h, c=None):
        x, h = as_tensor(x), as_tensor(h)
        H = self.hidden
        if self.kind == "rnn":
            return tanh(matmul(x, self.W) + matmul(h, self.U) + self.b), c
        if self.kind == "gru":
            xw = matmul(x, self.W) + self.b
            hu = matmul(h, self.U)
            z = sigmoid(xw[..., :H] + hu[..., :H])
            r = sigmoid(xw[..., H:2 * H] + hu[..., H:2 * H])
            n = tanh(xw[..., 2 * H:] + matmul(r * h, self.U[:, 2 * H:]))
            return (1.0 - z) * h + z * n, c
        gates = matmul(x, self.W) + matmul(h, self.U) + self.b
        i = sigmoid(gates[..., :H])
        f = sigmoid(gates[..., H:2 * H])
        o = sigmoid(gates[..., 2 * H:3 * H])
        g = tanh(gates[..., 3 * H:])
        c = np.zeros(h.shape) if c is None else c
        c_new = f * c + i * g
        return o * tanh(c_new), c_new


@dataclass
class TimeAwareModel:
    """Encoder, projector, field, optional cell and a 5-grade classifier head."""

    encoder: DenseNet
    projector: DenseNet
    field: VectorField
    head: DenseNet | None = None
    cell: RecurrentCell | None = None
    kind: str = "node"
    extras: dict = dc_field(default_factory=dict)

    @classmethod
    def init(
        cls,
        obs_dim: int,
        rng: np.random.Generator,
        kind: str = "node",
        encoder_widths: Sequence[int] = (128, 64),
        projector_widths: Sequence[int] = (64, 32),
        field_widths: Sequence[int] = (64, 64),
        with_head: bool = True,
    ) -> "TimeAwareModel":
        if kind not in HEAD_KINDS:
            raise ContractError(f"unknown head kind {kind!r}")
        encoder = DenseNet.init([obs_dim, *encoder_widths], rng, final_activation="tanh")
        projector = DenseNet.init([encoder_widths[-1], *projector_widths], rng)
        latent = projector_widths[-1]
        field = VectorField.init(latent, rng, field_widths)
        cell_kind = CELL_FOR_HEAD[kind]
        cell = RecurrentCell.init(cell_kind, latent, latent, rng) if cell_kind else None
        head = DenseNet.init([latent, N_GRADES], rng) if with_head else None
        return cls(encoder, projector, field, head, cell, kind)

    @property
    def latent_dim(self) -> int:
        return self.projector.out_dim

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, part in (("encoder", self.encoder), ("projector", self.projector), ("field", self.field.net)):
            for i, (w, b) in enumerate(zip(part.weights, part.biases)):
                out[f"{prefix}.{i}.weight"] = w
                out[f"{prefix}.{i}.bias"] = b
        if self.cell is not None:
            out.update({f"cell.{self.cell.kind}.W": self.cell.W, f"cell.{self.cell.kind}.U": self.cell.U,
                        f"cell.{self.cell.kind}.b": self.cell.b})
        if self.head is not None:
            for i, (w, b) in enumerate(zip(self.head.weights, self.head.biases)):
                out[f"head.{i}.weight"] = w
                out[f"head.{i}.bias"] = b
        return out

    @property
    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def embed(self, x) -> Tensor:
        return self.projector(self.encoder(x))


def predict_latent(h_ti, t_i: float, t_target: float, field, cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Carry a latent from ``t_i`` to ``t_target`` along the field's flow."""
    h = np.asarray(h_ti.data if isinstance(h_ti, Tensor) else h_ti, dtype=float)
    if t_target == t_i:
        return h.copy()
    fn = field.eval_numpy if hasattr(field, "eval_numpy") else field
    return ode_solve(h, fn, t_i, t_target, cfg).h_end


def rollout_batch(
    times: np.ndarray,
    xs: np.ndarray,
    mask: np.ndarray,
    model: TimeAwareModel,
    cfg: SolverConfig = SolverConfig(),
    grad_mode: str = "adjoint",
) -> Tensor:
    """ODE-RNN over right-aligned padded histories.

    ``times`` (B, L), ``xs`` (B, L, D), ``mask`` (B, L) true at real visits.
    Returns the latent at each row's last visit. Without a cell this is a
    plain NODE carried from the first visit's latent.
    """
    times = np.asarray(times, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    B, L = mask.shape
    if not mask.any(axis=1).all():
        raise ContractError("every history needs at least one visit")
    for b in range(B):
        tb = times[b, mask[b]]
        if np.any(np.diff(tb) <= 0):
            raise ContractError("visit times must be strictly increasing")
    flat = model.embed(np.asarray(xs).reshape(B * L, -1))
    proj = flat.reshape((B, L, model.latent_dim))
    h = Tensor(np.zeros((B, model.latent_dim)))
    c = None
    started = np.zeros(B, dtype=bool)
    last_t = times[:, 0].copy()
    for k in range(L):
        present = mask[:, k]
        if not present.any():
            continue
        t_k = times[:, k]
        moving = present & started
        if moving.any():
            t0 = np.where(moving, last_t, t_k)
            h = odeint(h, model.field, t0, np.where(moving, t_k, t0), cfg, grad_mode)
        x_k = proj[:, k, :]
        first = (present & ~started)[:, None]
        if model.cell is not None and moving.any():
            h_upd, c_upd = model.cell(x_k, h, c)
            upd = moving[:, None]
            h_next = where(first, x_k, where(upd, h_upd, h))
            if model.cell.kind == "lstm":
                c = where(upd, c_upd, np.zeros(h.shape) if c is None else c)
            h = h_next
        else:
            h = where(first, x_k, h)
        started |= present
        last_t = np.where(present, t_k, last_t)
    return h


def ode_rnn_rollout(visits, model: TimeAwareModel, cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Final latent after processing an ordered list of ``(t, x)`` visits."""
    if not visits:
        raise ContractError("need at least one visit")
    times = np.array([[float(t) for t, _ in visits]])
    xs = np.stack([np.asarray(x, dtype=float) for _, x in visits])[None]
    mask = np.ones(times.shape, dtype=bool)
    return rollout_batch(times, xs, mask, model, cfg).data[0]


def tail_scores(logits: np.ndarray) -> np.ndarray:
    """P(grade >= k) for k = 1, 2, 3 from 5-grade logits (rows)."""
    z = np.atleast_2d(logits)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    tails = np.cumsum(p[:, ::-1], axis=1)[:, ::-1]
    return tails[:, 1:4]


def classify(h, head: DenseNet) -> tuple[Tensor, np.ndarray]:
    """Severity logits and the binarised tail scores derived from them."""
    logits = head(h)
    return logits, tail_scores(logits.data).reshape(logits.data.shape[:-1] + (3,))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return -(logp * onehot).sum() * (1.0 / len(labels))
