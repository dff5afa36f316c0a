"""Gradients of ODE solve endpoints.

Two independent routes:

* :func:`grad_adjoint` integrates the augmented adjoint system backward in
  time (optimize-then-discretize).
* :func:`grad_through_solver` records every RK4 stage on a tape and
  backpropagates through it (discretize-then-optimize).

:func:`odeint` wraps a batched solve as a single tape node whose backward
pass is either route.

A differentiable field is a callable ``field(h, t) -> Tensor`` built from
diffcore ops, with a ``params`` list of leaf tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ContractError, Tape, Tensor, backward, custom_op, get_dtype
from .odesolve import (
    InstabilityError,
    SolverConfig,
    SolverError,
    integrate_dopri5,
    rms_rows,
    solve_batch,
)


def numpy_field(field):
    """Adapt a differentiable field to the plain-array solver interface."""
    fast = getattr(field, "eval_numpy", None)
    if fast is not None:
        return fast

    def f(h, t):
        out = field(h, t)
        return out.data if isinstance(out, Tensor) else np.asarray(out)

    return f


def field_vjp(field, h: np.ndarray, t, cotangent: np.ndarray):
    """Return ``(u, cotangent^T du/dh, [cotangent^T du/dtheta])`` at ``(h, t)``."""
    params = list(field.params)
    h_t = Tensor(h, requires_grad=True)
    with Tape() as tape:
        u = field(h_t, t)
        loss = (u * cotangent).sum()
    grads = backward(tape, loss, params + [h_t])
    return u.data, grads[h_t], [grads[p] for p in params]


@dataclass
class AdjointState:
    h: np.ndarray
    a: np.ndarray
    g_theta: np.ndarray


def _as_rows(h0, t0, t1):
    h0 = np.asarray(h0, dtype=float)
    single = h0.ndim == 1
    rows = h0[None, :] if single else h0
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (rows.shape[0],)).copy()
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (rows.shape[0],)).copy()
    return rows, t0, t1, single


def grad_adjoint(h0, field, t0, t1, dL_dh_end, cfg: SolverConfig = SolverConfig(), h_end=None):
    """Adjoint-method gradients of a loss through ``h(t1)``.

    Returns ``(dL_dh0, dL_dtheta, dL_dt0, dL_dt1)``; ``dL_dtheta`` is a list
    aligned with ``field.params``. Rows of a batched ``h0`` may carry their
    own intervals. The backward solve uses tolerances ten times tighter than
    ``cfg``.
    """
    rows, t0, t1, single = _as_rows(h0, t0, t1)
    a1 = np.asarray(dL_dh_end, dtype=float).reshape(rows.shape)
    params = list(field.params)
    sizes = [p.data.size for p in params]
    n_theta = int(sum(sizes))
    span = t1 - t0
    ufun = numpy_field(field)

    if h_end is None:
        h_end = solve_batch(rows, ufun, t0, t1, cfg).h_end
    h_end = np.asarray(h_end, dtype=float).reshape(rows.shape)

    def unpack_theta(flat):
        out, i = [], 0
        for p, n in zip(params, sizes):
            out.append(flat[i:i + n].reshape(p.data.shape).astype(get_dtype(), copy=False))
            i += n
        return out

    u1 = ufun(h_end, t1)
    dL_dt1 = np.einsum("bd,bd->b", a1, u1)

    if not np.any(span) or not np.any(a1):
        a0 = a1.copy()
        g0 = np.zeros(n_theta)
    else:
        B, d = rows.shape
        n_state = B * d
        col = span[:, None]

        def aug(s, y):
            h = y[:n_state].reshape(B, d)
            a = y[n_state:2 * n_state].reshape(B, d)
            t = t0 + s * span
            u, ah, at = field_vjp(field, h, t, a * col)
            dh = col * u
            flat = np.concatenate([g.ravel() for g in at]) if at else np.zeros(0)
            return np.concatenate([dh.ravel(), -ah.ravel(), -flat])

        def norm(y):
            ha = np.concatenate([y[:n_state].reshape(B, d), y[n_state:2 * n_state].reshape(B, d)], axis=1)
            g = y[2 * n_state:]
            gn = float(np.sqrt(np.mean(g * g))) if g.size else 0.0
            return max(rms_rows(ha), gn)

        y1 = np.concatenate([h_end.ravel(), a1.ravel(), np.zeros(n_theta)])
        try:
            res = integrate_dopri5(aug, y1, 1.0, 0.0, cfg.tightened(10.0), norm=norm)
        except SolverError as exc:
            raise InstabilityError(
                f"adjoint backward solve failed on interval [{t0.min():.6g}, {t1.max():.6g}]: {exc}"
            ) from exc
        a0 = res.h_end[n_state:2 * n_state].reshape(B, d)
        g0 = res.h_end[2 * n_state:]

    u0 = ufun(rows, t0)
    dL_dt0 = -np.einsum("bd,bd->b", a0, u0)
    dL_dtheta = unpack_theta(g0)
    if single:
        return a0[0], dL_dtheta, float(dL_dt0[0]), float(dL_dt1[0])
    return a0, dL_dtheta, dL_dt0, dL_dt1


def rk4_tape(h0: Tensor, field, t0, t1, n_steps: int) -> Tensor:
    """Fixed-step RK4 recorded op by op on the active tape.

    ``t0`` and ``t1`` may be scalar Tensors, in which case gradients flow
    to the integration times as well.
    """
    dt = (t1 - t0) * (1.0 / n_steps)
    h = h0
    for k in range(n_steps):
        t = t0 + dt * float(k)
        k1 = field(h, t)
        k2 = field(h + k1 * (dt * 0.5), t + dt * 0.5)
        k3 = field(h + k2 * (dt * 0.5), t + dt * 0.5)
        k4 = field(h + k3 * dt, t + dt)
        h = h + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt * (1.0 / 6.0))
    return h


def grad_through_solver(h0, field, t0: float, t1: float, dL_dh_end, cfg: SolverConfig = SolverConfig(method="rk4")):
    """Exact gradient of the discretised RK4 map; same return layout as :func:`grad_adjoint`."""
    if cfg.method != "rk4":
        raise ContractError("grad_through_solver is only defined for fixed-step rk4")
    params = list(field.params)
    h_t = Tensor(np.asarray(h0, dtype=float), requires_grad=True)
    t0_t = Tensor(float(t0), requires_grad=True)
    t1_t = Tensor(float(t1), requires_grad=True)
    cot = np.asarray(dL_dh_end, dtype=float).reshape(h_t.shape)
    with Tape() as tape:
        h_end = rk4_tape(h_t, field, t0_t, t1_t, cfg.fixed_step_count)
        loss = (h_end * cot).sum()
    grads = backward(tape, loss, params + [h_t, t0_t, t1_t])
    return grads[h_t], [grads[p] for p in params], float(grads[t0_t]), float(grads[t1_t])


def odeint(h0: Tensor, field, t0, t1, cfg: SolverConfig = SolverConfig(), grad_mode: str = "adjoint") -> Tensor:
    """Batched solve of ``h0`` (batch, dim) over per-row ``[t0, t1]`` as a tape node.

    ``grad_mode="adjoint"`` stores only the endpoint and runs the adjoint on
    backward; ``"backprop"`` records fixed-step RK4 in rescaled time.
    """
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (h0.shape[0],)).copy()
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (h0.shape[0],)).copy()
    if grad_mode == "backprop":
        span = t1 - t0
        col = span[:, None]

        def scaled(h, s):
            return field(h, t0 + s * span) * col

        return rk4_tape(h0, scaled, 0.0, 1.0, cfg.fixed_step_count)
    if grad_mode != "adjoint":
        raise ContractError(f"unknown grad_mode {grad_mode!r}")

    params = list(field.params)
    res = solve_batch(h0.data, numpy_field(field), t0, t1, cfg)
    h_end = res.h_end

    def vjp(g):
        dh0, dtheta, _, _ = grad_adjoint(h0.data, field, t0, t1, g, cfg, h_end=h_end)
        return [dh0] + dtheta

    out = custom_op(h_end, [h0] + params, vjp, "odeint")
    out.solve_stats = (res.steps_accepted, res.steps_rejected)
    return out
