"""AUC, quadratic-weighted kappa and result tables."""

from __future__ import annotations

import json
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_COLUMNS = ("kappa", "auc1", "auc2", "auc3")
METHOD_ORDER = ("node", "node_rnn", "node_lstm", "node_gru")
WEIGHT_ORDER = ("scratch", "simclr_dpa", "byol_tetc")


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. a single class)."""


def auc(scores, labels) -> float:
    """Normalised Mann-Whitney U: P(pos > neg) + 0.5 P(pos == neg)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks give ties half credit
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) at each distinct threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes")
    pts = [(0.0, 0.0)]
    for thr in np.unique(scores)[::-1]:
        pred = scores >= thr
        pts.append((float((pred & ~labels).sum() / n_neg), float((pred & labels).sum() / n_pos)))
    return pts


def quadratic_weighted_kappa(pred, true, K: int = 5) -> float:
    pred = np.asarray(pred, dtype=int)
    true = np.asarray(true, dtype=int)
    if len(pred) == 0 or len(pred) != len(true):
        raise UndefinedMetricError("kappa needs two equal-length non-empty grade lists")
    if pred.min() < 0 or true.min() < 0 or pred.max() >= K or true.max() >= K:
        raise ValueError(f"grades must lie in 0..{K - 1}")
    observed = np.zeros((K, K))
    np.add.at(observed, (true, pred), 1.0)
    n = len(pred)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    i, j = np.indices((K, K))
    w = (i - j) ** 2 / (K - 1) ** 2
    denom = (w * expected).sum()
    if denom == 0:
        # all mass on one grade in both lists: agreement is perfect or undefined
        if (w * observed).sum() == 0:
            return 1.0
        raise UndefinedMetricError("kappa undefined: zero expected disagreement")
    return float(1.0 - (w * observed).sum() / denom)


def score_metrics(tail_scores: np.ndarray, pred_grade, true_grade) -> dict:
    """kappa and AUC1..3; an undefined metric becomes None with a note."""
    out, notes = {}, {}
    true_grade = np.asarray(true_grade, dtype=int)
    try:
        out["kappa"] = quadratic_weighted_kappa(pred_grade, true_grade)
    except UndefinedMetricError as exc:
        out["kappa"], notes["kappa"] = None, str(exc)
    for k in (1, 2, 3):
        try:
            out[f"auc{k}"] = auc(tail_scores[:, k - 1], true_grade >= k)
        except UndefinedMetricError as exc:
            out[f"auc{k}"], notes[f"auc{k}"] = None, str(exc)
    if notes:
        out["undefined"] = notes
    return out


def metric_table(runs: Iterable[dict], methods: Sequence[str] = METHOD_ORDER,
                 weights: Sequence[str] = WEIGHT_ORDER) -> list[dict]:
    """One row per (method, weights, task) present in ``runs``, in grid order.

    Each run is ``{"method", "weights", "task", "metrics"}``; rows carry the
    metric columns in fixed order. Cells missing from a run stay None.
    """
    runs = list(runs)
    tasks = []
    for r in runs:
        if r["task"] not in tasks:
            tasks.append(r["task"])
    rows = []
    for w in weights:
        for m in methods:
            for task in tasks:
                for r in runs:
                    if (r["method"], r["weights"], r["task"]) == (m, w, task):
                        row = {"method": m, "weights": w, "task": task}
                        for col in METRIC_COLUMNS:
                            row[col] = r["metrics"].get(col)
                        rows.append(row)
    return rows


def table_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2)


def table_text(rows: list[dict], key_columns: Sequence[str] = ("method", "weights", "task")) -> str:
    """Aligned plain-text rendering; absent cells print as '-'."""
    cols = list(key_columns) + list(METRIC_COLUMNS)

    def cell(v):
        if v is None:
            return "-"
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    body = [[cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
