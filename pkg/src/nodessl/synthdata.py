"""Synthetic longitudinal cohort with irregular visits and 5-grade severity.

Each patient has a progression rate shared by both eyes. Per eye, latent
severity follows ``S*(t) = clamp(S0 + rate * t + sigma_w * W(t), 0, 4)`` with
W a Brownian path sampled at the visit times; the observed grade is
``round(S*)`` and the observation is a fixed linear map of a smooth feature
lift of ``(S*, t)`` plus Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .diffcore import ContractError


class EmptySplitError(ValueError):
    """A task produced no examples (e.g. no visit matches a horizon)."""


@dataclass(frozen=True)
class Visit:
    t: float
    S: int
    x: np.ndarray


@dataclass
class Trajectory:
    patient_id: int
    eye: str
    visits: list[Visit]
    progression_rate: float = 0.0

    def __post_init__(self):
        if self.eye not in ("L", "R"):
            raise ContractError(f"eye must be L or R, got {self.eye!r}")
        times = [v.t for v in self.visits]
        if len(times) < 2 or any(b <= a for a, b in zip(times, times[1:])):
            raise ContractError("need >= 2 visits with strictly increasing times")


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 1000
    visits_min: int = 3
    visits_max: int = 8
    gap_median: float = 1.0
    gap_sigma: float = 0.5
    s0_shape: float = 1.2
    s0_scale: float = 0.8
    eye_s0_sd: float = 0.3
    rate_zero_prob: float = 0.5
    rate_low: float = 0.2
    rate_high: float = 1.5
    sigma_w: float = 0.15
    obs_dim: int = 32
    sigma_x: float = 0.5
    obs_seed: int = 20240101
    # optional nuisance: per-eye and per-visit factors mixed with the lift
    # through a fixed random tanh layer (mixing="mlp")
    mixing: str = "linear"
    eye_factors: int = 0
    eye_factor_sd: float = 1.0
    visit_factors: int = 0
    visit_factor_sd: float = 1.0
    mix_hidden: int = 64

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ContractError("n_patients must be >= 1")
        if not (2 <= self.visits_min <= self.visits_max):
            raise ContractError("need 2 <= visits_min <= visits_max")
        for name in ("gap_median", "gap_sigma", "s0_shape", "s0_scale", "obs_dim"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        for name in ("eye_s0_sd", "sigma_w", "sigma_x", "rate_low", "rate_high"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if not 0 <= self.rate_zero_prob <= 1:
            raise ContractError("rate_zero_prob must lie in [0, 1]")
        if self.rate_high < self.rate_low:
            raise ContractError("rate_high < rate_low")
        if self.mixing not in ("linear", "mlp"):
            raise ContractError("mixing must be 'linear' or 'mlp'")
        for name in ("eye_factors", "visit_factors", "eye_factor_sd", "visit_factor_sd"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.mix_hidden < 1:
            raise ContractError("mix_hidden must be >= 1")
        if self.mixing == "linear" and (self.eye_factors or self.visit_factors):
            raise ContractError("nuisance factors need mixing='mlp'")


N_FEATURES = 8


def feature_lift(s_star: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Smooth nonlinear features of latent severity and time."""
    z = np.asarray(s_star, dtype=float) / 4.0
    t = np.asarray(t, dtype=float)
    return np.stack(
        [
            z,
            z * z,
            np.sin(np.pi * z),
            np.cos(np.pi * z),
            np.tanh(4.0 * (z - 0.5)),
            np.exp(-3.0 * z),
            z * z * z,
            t / 10.0,
        ],
        axis=-1,
    )


def observation_matrix(cfg: CohortConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.obs_seed)
    return rng.normal(size=(N_FEATURES, cfg.obs_dim)) * (2.0 / np.sqrt(N_FEATURES))


def observation_map(cfg: CohortConfig):
    """Noise-free map ``(lift, eye_factors, visit_factors) -> x`` fixed by obs_seed."""
    if cfg.mixing == "linear":
        A = observation_matrix(cfg)
        return lambda feats, e, v: feats @ A
    rng = np.random.default_rng(cfg.obs_seed)
    k = N_FEATURES + cfg.eye_factors + cfg.visit_factors
    W1 = rng.normal(size=(k, cfg.mix_hidden)) * (1.5 / np.sqrt(k))
    b1 = rng.normal(size=cfg.mix_hidden) * 0.5
    W2 = rng.normal(size=(cfg.mix_hidden, cfg.obs_dim)) * (2.0 / np.sqrt(cfg.mix_hidden))

    def mix(feats, e, v):
        z = np.concatenate([feats, e, v], axis=-1)
        return np.tanh(z @ W1 + b1) @ W2

    return mix


def _grade(s_star: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(s_star + 0.5), 0, 4).astype(int)


def generate_cohort(cfg: CohortConfig, seed: int) -> list[Trajectory]:
    """Two eyes per patient; each patient draws from its own child seed."""
    cfg.validate()
    obs = observation_map(cfg)
    children = np.random.SeedSequence(seed).spawn(cfg.n_patients)
    cohort = []
    for pid, child in enumerate(children):
        rng = np.random.default_rng(child)
        rate = 0.0 if rng.random() < cfg.rate_zero_prob else rng.uniform(cfg.rate_low, cfg.rate_high)
        base = rng.gamma(cfg.s0_shape, cfg.s0_scale)
        for eye in ("L", "R"):
            m = int(rng.integers(cfg.visits_min, cfg.visits_max + 1))
            gaps = cfg.gap_median * np.exp(cfg.gap_sigma * rng.normal(size=m - 1))
            t = np.concatenate([[0.0], np.cumsum(gaps)])
            s0 = base + cfg.eye_s0_sd * rng.normal()
            walk = np.concatenate([[0.0], np.cumsum(np.sqrt(gaps) * rng.normal(size=m - 1))])
            s_star = np.clip(s0 + rate * t + cfg.sigma_w * walk, 0.0, 4.0)
            grades = _grade(s_star)
            e = np.repeat(cfg.eye_factor_sd * rng.normal(size=(1, cfg.eye_factors)), m, axis=0)
            v = cfg.visit_factor_sd * rng.normal(size=(m, cfg.visit_factors))
            x = obs(feature_lift(s_star, t), e, v) + cfg.sigma_x * rng.normal(size=(m, cfg.obs_dim))
            visits = [Visit(float(ti), int(si), xi) for ti, si, xi in zip(t, grades, x)]
            cohort.append(Trajectory(pid, eye, visits, float(rate)))
    return cohort


# persistence


def save_cohort(cohort: Iterable[Trajectory], path) -> None:
    """One JSON record per trajectory; floats use shortest round-trip repr."""
    with open(path, "w") as fh:
        for tr in cohort:
            rec = {
                "patient_id": tr.patient_id,
                "eye": tr.eye,
                "progression_rate": tr.progression_rate,
                "visits": [{"t": v.t, "S": v.S, "x": [float(a) for a in v.x]} for v in tr.visits],
            }
            fh.write(json.dumps(rec) + "\n")


def load_cohort(path) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            visits = [Visit(float(v["t"]), int(v["S"]), np.array(v["x"], dtype=float)) for v in rec["visits"]]
            out.append(Trajectory(int(rec["patient_id"]), rec["eye"], visits, float(rec.get("progression_rate", 0.0))))
    return out


# pair set


@dataclass
class PairSet:
    """All consecutive same-eye visit pairs, stored column-wise."""

    x_i: np.ndarray
    x_i1: np.ndarray
    t_i: np.ndarray
    t_i1: np.ndarray
    S_i: np.ndarray
    S_i1: np.ndarray
    patient_id: np.ndarray
    eye: np.ndarray

    def __len__(self) -> int:
        return len(self.t_i)

    @property
    def dt(self) -> np.ndarray:
        return self.t_i1 - self.t_i

    def subset(self, idx) -> "PairSet":
        return PairSet(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def build_pairs(cohort: Iterable[Trajectory]) -> PairSet:
    cols = {k: [] for k in ("x_i", "x_i1", "t_i", "t_i1", "S_i", "S_i1", "patient_id", "eye")}
    dim = None
    for tr in cohort:
        for a, b in zip(tr.visits[:-1], tr.visits[1:]):
            cols["x_i"].append(a.x)
            cols["x_i1"].append(b.x)
            cols["t_i"].append(a.t)
            cols["t_i1"].append(b.t)
            cols["S_i"].append(a.S)
            cols["S_i1"].append(b.S)
            cols["patient_id"].append(tr.patient_id)
            cols["eye"].append(tr.eye)
            dim = len(a.x)
    if dim is None:
        return PairSet(np.zeros((0, 0)), np.zeros((0, 0)), *(np.zeros(0) for _ in range(6)))
    return PairSet(
        np.array(cols["x_i"]), np.array(cols["x_i1"]),
        np.array(cols["t_i"]), np.array(cols["t_i1"]),
        np.array(cols["S_i"], dtype=int), np.array(cols["S_i1"], dtype=int),
        np.array(cols["patient_id"], dtype=int), np.array(cols["eye"]),
    )


# downstream tasks


@dataclass
class TaskExamples:
    """Right-aligned padded visit histories with a target time and grade."""

    times: np.ndarray        # (n, L)
    xs: np.ndarray           # (n, L, D)
    mask: np.ndarray         # (n, L)
    target_time: np.ndarray  # (n,)
    target_grade: np.ndarray  # (n,)
    patient_id: np.ndarray
    target_visit: np.ndarray  # index of the target visit within its trajectory

    def __len__(self) -> int:
        return len(self.target_time)

    def subset(self, idx) -> "TaskExamples":
        return TaskExamples(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @property
    def last_time(self) -> np.ndarray:
        return self.times[:, -1]

    @property
    def last_x(self) -> np.ndarray:
        return self.xs[:, -1, :]

    def labels(self, k: int) -> np.ndarray:
        return (self.target_grade >= k).astype(int)


def split_patients(patient_ids: Iterable[int], seed: int, fractions=(0.7, 0.1, 0.2)) -> dict[str, set]:
    ids = np.array(sorted(set(int(p) for p in patient_ids)))
    rng = np.random.default_rng(seed)
    ids = ids[rng.permutation(len(ids))]
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    return {
        "train": set(ids[:n_train].tolist()),
        "val": set(ids[n_train:n_train + n_val].tolist()),
        "test": set(ids[n_train + n_val:].tolist()),
    }


def _examples(cohort, task: str, horizon: float | None, tol: float):
    rows = []
    for tr in cohort:
        ts = np.array([v.t for v in tr.visits])
        for i in range(len(tr.visits) - 1):
            if task == "variable_interval":
                j = i + 1
            else:
                future = np.arange(i + 1, len(ts))
                gap = np.abs(ts[future] - ts[i] - horizon)
                ok = future[gap <= tol]
                if not len(ok):
                    continue
                j = int(ok[np.argmin(np.abs(ts[ok] - ts[i] - horizon))])
            rows.append((tr, i, j))
    return rows


def _pack(rows) -> TaskExamples:
    L = max(i + 1 for _, i, _ in rows)
    D = len(rows[0][0].visits[0].x)
    n = len(rows)
    times = np.zeros((n, L))
    xs = np.zeros((n, L, D))
    mask = np.zeros((n, L), dtype=bool)
    target_time = np.zeros(n)
    target_grade = np.zeros(n, dtype=int)
    pids = np.zeros(n, dtype=int)
    tv = np.zeros(n, dtype=int)
    for r, (tr, i, j) in enumerate(rows):
        hist = tr.visits[: i + 1]
        off = L - len(hist)
        for k, v in enumerate(hist):
            times[r, off + k] = v.t
            xs[r, off + k] = v.x
            mask[r, off + k] = True
        # padded slots repeat the first visit time so time rows stay monotone
        times[r, :off] = hist[0].t
        target_time[r] = tr.visits[j].t
        target_grade[r] = tr.visits[j].S
        pids[r] = tr.patient_id
        tv[r] = j
    return TaskExamples(times, xs, mask, target_time, target_grade, pids, tv)


def task_splits(
    cohort: list[Trajectory],
    task: str = "variable_interval",
    horizon: float | None = None,
    tol_years: float = 0.25,
    seed: int = 0,
    fractions=(0.7, 0.1, 0.2),
) -> dict[str, TaskExamples]:
    """Patient-disjoint train/val/test examples for a downstream task.

    ``task="fixed_horizon"`` pairs each visit with the future visit closest
    to ``t + horizon`` within ``tol_years``; ``"variable_interval"`` uses
    every consecutive pair. Inputs are the history up to and including the
    source visit.
    """
    if not cohort:
        raise ContractError("empty cohort")
    if task == "fixed_horizon":
        if horizon not in (1, 2, 3, 1.0, 2.0, 3.0):
            raise ContractError("fixed_horizon needs horizon in {1, 2, 3} years")
    elif task != "variable_interval":
        raise ContractError(f"unknown task {task!r}")
    groups = split_patients((tr.patient_id for tr in cohort), seed, fractions)
    out = {}
    for name, ids in groups.items():
        rows = _examples([tr for tr in cohort if tr.patient_id in ids], task, horizon, tol_years)
        if not rows:
            raise EmptySplitError(f"{task} (horizon={horizon}) has no {name} examples at tol={tol_years}")
        out[name] = _pack(rows)
    return out


def cohort_config_dict(cfg: CohortConfig) -> dict:
    return asdict(cfg)
