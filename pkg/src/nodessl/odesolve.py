"""Explicit Runge-Kutta integration of dh/dt = u(h, t).

Two integrators: classical fixed-step RK4 and adaptive Dormand-Prince 5(4).
Both run in either time direction; a reversed interval (t1 < t0) solves the
final value problem by stepping with negative dt.

A field is any callable ``field(h, t) -> dh/dt`` on numpy arrays. Batched
solves (:func:`solve_batch`) let every row have its own interval by
rescaling time to s in [0, 1]: ``dh/ds = (t1 - t0) * u(h, t0 + s (t1 - t0))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .diffcore import ContractError

Field = Callable[[np.ndarray, object], np.ndarray]


class SolverError(RuntimeError):
    """Base class for integration failures."""


class DivergenceError(SolverError):
    """Step budget exhausted or step size collapsed."""


class InstabilityError(SolverError):
    """The field produced NaN/Inf."""


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-5
    atol: float = 1e-7
    max_steps: int = 10_000
    initial_step: float | None = None
    fixed_step_count: int = 20

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ContractError(f"unknown solver method {self.method!r}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ContractError("rtol and atol must be positive")
        if self.max_steps < 1 or self.fixed_step_count < 1:
            raise ContractError("max_steps and fixed_step_count must be >= 1")

    def tightened(self, factor: float = 10.0) -> "SolverConfig":
        return SolverConfig(
            self.method, self.rtol / factor, self.atol / factor, self.max_steps,
            None, self.fixed_step_count,
        )


@dataclass
class SolveResult:
    h_end: np.ndarray
    steps_accepted: int
    steps_rejected: int
    t_grid: np.ndarray
    n_evals: int = 0
    extras: dict = dc_field(default_factory=dict)


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


def _finite(value: np.ndarray, t) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise InstabilityError(f"field returned non-finite values at t={t!r}")
    return value


def rms_rows(x: np.ndarray) -> float:
    """Max over rows of the per-row RMS; a 1-D array is a single row."""
    if x.ndim <= 1:
        return float(np.sqrt(np.mean(x * x))) if x.size else 0.0
    flat = x.reshape(x.shape[0], -1)
    return float(np.sqrt(np.mean(flat * flat, axis=1)).max())


def rk4_step(h: np.ndarray, field: Field, t: float, dt: float) -> np.ndarray:
    """One classical RK4 step."""
    if dt == 0:
        raise ContractError("rk4_step needs dt != 0")
    k1 = _finite(field(h, t), t)
    k2 = _finite(field(h + 0.5 * dt * k1, t + 0.5 * dt), t)
    k3 = _finite(field(h + 0.5 * dt * k2, t + 0.5 * dt), t)
    k4 = _finite(field(h + dt * k3, t + dt), t)
    return h + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_fixed(h0, field, t0, t1, cfg: SolverConfig) -> SolveResult:
    n = cfg.fixed_step_count
    grid = np.linspace(t0, t1, n + 1)
    h = np.array(h0, dtype=float, copy=True)
    for a, b in zip(grid[:-1], grid[1:]):
        h = rk4_step(h, field, a, b - a)
    return SolveResult(h, n, 0, grid, 4 * n)


def _initial_step(func, t0, y0, f0, direction, norm, rtol, atol, span) -> float:
    # Hairer, Norsett & Wanner starting-step heuristic for a 5th-order method.
    scale = atol + rtol * np.abs(y0)
    d0 = norm(y0 / scale)
    d1 = norm(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + direction * h0 * f0
    f1 = _finite(func(t0 + direction * h0, y1), t0)
    d2 = norm((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1, span)


def integrate_dopri5(
    func: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    t0: float,
    t1: float,
    cfg: SolverConfig,
    norm: Callable[[np.ndarray], float] = rms_rows,
) -> SolveResult:
    """Adaptive Dormand-Prince on ``dy/dt = func(t, y)``; ``y`` any shape.

    The embedded error, scaled componentwise by ``atol + rtol * max(|y|)``,
    must have ``norm`` <= 1 for a step to be accepted.
    """
    y = np.array(y0, dtype=float, copy=True)
    if t0 == t1:
        return SolveResult(y, 0, 0, np.array([t0]))
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    rtol, atol = cfg.rtol, cfg.atol

    t = t0
    f = _finite(func(t, y), t)
    n_evals = 1
    if cfg.initial_step is not None:
        h = min(abs(cfg.initial_step), span)
    else:
        h = _initial_step(func, t0, y, f, direction, norm, rtol, atol, span)
        n_evals += 1

    grid = [t0]
    accepted = rejected = 0
    while direction * (t1 - t) > 0:
        if accepted + rejected >= cfg.max_steps:
            raise DivergenceError(
                f"step budget of {cfg.max_steps} exhausted at t={t:.6g} on [{t0:.6g}, {t1:.6g}]"
            )
        if h < 1e-12 * max(1.0, abs(t)):
            raise DivergenceError(f"step size underflow at t={t:.6g} on [{t0:.6g}, {t1:.6g}]")
        last = h >= direction * (t1 - t)
        if last:
            h = direction * (t1 - t)
        dt = direction * h
        ks = [f]
        for i in range(1, 7):
            yi = y.copy()
            for a, k in zip(_A[i], ks):
                if a:
                    yi += (dt * a) * k
            ks.append(_finite(func(t + _C[i] * dt, yi), t))
        n_evals += 6
        y_new = yi  # 7th stage input equals the 5th-order solution (FSAL)
        err = np.zeros_like(y)
        for e, k in zip(_E, ks):
            if e:
                err += (dt * e) * k
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = norm(err / scale)
        if err_norm <= 1.0:
            t = t1 if last else t + dt
            y = y_new
            f = ks[6]
            grid.append(t)
            accepted += 1
            factor = _MAX_FACTOR if err_norm == 0 else min(_MAX_FACTOR, _SAFETY * err_norm ** -0.2)
        else:
            rejected += 1
            factor = max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2)
        h = abs(h) * factor
    return SolveResult(y, accepted, rejected, np.array(grid), n_evals)


def dopri5_adaptive(h0, field: Field, t0: float, t1: float, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    return integrate_dopri5(lambda t, y: field(y, t), h0, t0, t1, cfg)


def ode_solve(h0, field: Field, t0: float, t1: float, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """Integrate from ``t0`` to ``t1`` (either order); ``t0 == t1`` returns ``h0``."""
    h0 = np.asarray(h0, dtype=float)
    if not np.all(np.isfinite(h0)):
        raise ContractError("initial state must be finite")
    if t0 == t1:
        return SolveResult(h0.copy(), 0, 0, np.array([t0]))
    if cfg.method == "rk4":
        return _rk4_fixed(h0, field, t0, t1, cfg)
    return dopri5_adaptive(h0, field, t0, t1, cfg)


def rescaled_field(field: Field, t0: np.ndarray, span: np.ndarray) -> Callable[[float, np.ndarray], np.ndarray]:
    """``func(s, h)`` for the unit-interval reparameterisation of row-wise intervals."""
    col = span[:, None]

    def func(s, h):
        return col * field(h, t0 + s * span)

    return func


def solve_batch(h0: np.ndarray, field: Field, t0, t1, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """Solve each row of ``h0`` over its own interval ``[t0[b], t1[b]]``.

    Steps are shared across rows in rescaled time s; rows with
    ``t0 == t1`` stay fixed. ``t_grid`` holds the accepted s values.
    """
    h0 = np.asarray(h0, dtype=float)
    if h0.ndim != 2:
        raise ContractError(f"solve_batch expects (batch, dim) state, got {h0.shape}")
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (h0.shape[0],))
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (h0.shape[0],))
    span = t1 - t0
    if not np.any(span):
        return SolveResult(h0.copy(), 0, 0, np.array([0.0]))
    func = rescaled_field(field, t0, span)
    if cfg.method == "rk4":
        return _rk4_fixed(h0, lambda y, s: func(s, y), 0.0, 1.0, cfg)
    return integrate_dopri5(func, h0, 0.0, 1.0, cfg)
