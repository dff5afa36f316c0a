"""Pretrain / finetune / evaluate / ablate pipelines and their run directories.

Every randomness source is derived from ``cfg.seed``: cohort, splits, model
init, batch order and augmentation each get their own child stream, so the
scratch and pretrained arms of one seed see identical data and order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import diffcore
from ..diffcore import NonFiniteError, Tape, backward
from ..adjoint import odeint
from ..evalmetrics import METRIC_COLUMNS, metric_table, score_metrics, table_json, table_text
from ..odesolve import SolverConfig, SolverError
from ..optim import AdamW, global_norm, one_cycle_lr
from ..ssl import DivergenceError, PretrainConfig, batch_order, pretrain
from ..synthdata import (
    TaskExamples,
    build_pairs,
    generate_cohort,
    load_cohort,
    save_cohort,
    split_patients,
    task_splits,
)
from ..timehead import TimeAwareModel, classify, cross_entropy, rollout_batch
from . import checkpoint as ckpt
from .config import ExperimentConfig, dump_config

log = logging.getLogger(__name__)

# child-stream indices under cfg.seed
_COHORT, _SPLIT, _INIT, _PRETRAIN, _FINETUNE, _LABELS = range(6)


def child_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


@dataclass
class RunRecord:
    config_hash: str
    run_dir: str
    checkpoint: str | None = None
    checkpoint_digest: str | None = None
    loss_curve: str | None = None
    metrics: dict = field(default_factory=dict)
    stability: dict = field(default_factory=dict)

    def write(self) -> None:
        Path(self.run_dir, "record.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


class RunDivergence(RuntimeError):
    """A pipeline stopped on a NaN/solver failure; ``record`` holds the stability report."""

    def __init__(self, message: str, record: RunRecord):
        super().__init__(message)
        self.record = record


def _prepare(cfg: ExperimentConfig, run_dir) -> Path:
    diffcore.set_precision(cfg.precision)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.yaml")
    return run_dir


def get_cohort(cfg: ExperimentConfig):
    if cfg.cohort_path:
        return load_cohort(cfg.cohort_path)
    return generate_cohort(cfg.cohort, child_seed(cfg.seed, _COHORT))


def gen_data(cfg: ExperimentConfig, path) -> int:
    cohort = generate_cohort(cfg.cohort, child_seed(cfg.seed, _COHORT))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_cohort(cohort, path)
    return len(cohort)


def train_pairs(cfg: ExperimentConfig, cohort):
    """Consecutive pairs from training-split patients only."""
    groups = split_patients((tr.patient_id for tr in cohort), child_seed(cfg.seed, _SPLIT))
    return build_pairs([tr for tr in cohort if tr.patient_id in groups["train"]])


def new_model(cfg: ExperimentConfig, head: str | None = None, with_head: bool = True) -> TimeAwareModel:
    m = cfg.model
    return TimeAwareModel.init(
        cfg.cohort.obs_dim,
        np.random.default_rng(child_seed(cfg.seed, _INIT)),
        head or m.head,
        m.encoder_widths,
        m.projector_widths,
        m.field_widths,
        with_head,
    )


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _stability(curve: list[dict], divergence_step=None, message=None) -> dict:
    nan_steps = [r["step"] for r in curve if r.get("nan_flag")]
    norms = [r["grad_norm"] for r in curve if r.get("grad_norm") is not None and np.isfinite(r["grad_norm"])]
    return {
        "nan_events": len(nan_steps),
        "first_nan_step": nan_steps[0] if nan_steps else None,
        "max_grad_norm": max(norms) if norms else None,
        "divergence_step": divergence_step,
        "message": message,
    }


# pretraining


def run_pretrain(cfg: ExperimentConfig, run_dir=None) -> RunRecord:
    run_dir = _prepare(cfg, run_dir or Path(cfg.output_dir) / "pretrain")
    pairs = train_pairs(cfg, get_cohort(cfg))
    model = new_model(cfg, with_head=False)
    record = RunRecord(cfg.hash(), str(run_dir), loss_curve=str(run_dir / "loss_curve.jsonl"))
    try:
        result = pretrain(pairs, model, cfg.pretrain, cfg.solver, child_seed(cfg.seed, _PRETRAIN))
    except DivergenceError as exc:
        _write_rows(run_dir / "loss_curve.jsonl", exc.curve)
        record.stability = _stability(exc.curve, exc.step, str(exc))
        _finish(record, run_dir)
        raise RunDivergence(str(exc), record) from exc
    _write_rows(run_dir / "loss_curve.jsonl", result.curve)
    named = {k: v.data for k, v in model.named_params().items()}
    meta = {"scheme": cfg.pretrain.scheme, "config_hash": cfg.hash(), "delta_trace": sorted(set(result.delta_trace)),
            "clamps": result.clamps}
    path = ckpt.save(run_dir / "checkpoint", named, meta)
    record.checkpoint = str(path)
    record.checkpoint_digest = ckpt.digest(path)
    record.metrics = {"final_loss": result.curve[-1]["loss"] if result.curve else None}
    record.stability = _stability(result.curve)
    _finish(record, run_dir)
    return record


def _finish(record: RunRecord, run_dir: Path) -> None:
    Path(run_dir, "stability.json").write_text(json.dumps(record.stability, indent=2, sort_keys=True) + "\n")
    record.write()


# supervised fine-tuning and evaluation


def model_logits(model: TimeAwareModel, ex: TaskExamples, solver: SolverConfig, grad_mode: str = "adjoint"):
    """Logits at each example's target time (records on the active tape, if any)."""
    if model.cell is None:
        h = model.embed(ex.last_x)
    else:
        h = rollout_batch(ex.times, ex.xs, ex.mask, model, solver, grad_mode)
    h = odeint(h, model.field, ex.last_time, ex.target_time, solver, grad_mode)
    return model.head(h)


def evaluate_model(model: TimeAwareModel, ex: TaskExamples, solver: SolverConfig, batch_size: int = 512) -> dict:
    logits = []
    for i in range(0, len(ex), batch_size):
        part = ex.subset(slice(i, i + batch_size))
        logits.append(model_logits(model, part, solver).data)
    logits = np.concatenate(logits)
    _, scores = classify(logits, _Identity())
    metrics = score_metrics(scores, logits.argmax(axis=1), ex.target_grade)
    for k, v in metrics.items():
        if isinstance(v, float) and not np.isfinite(v):
            raise NonFiniteError(f"metric {k} is not finite")
    return metrics


class _Identity:
    def __call__(self, x):
        return diffcore.as_tensor(x)


def selection_value(metrics: dict, key: str) -> float:
    if key == "auc_mean":
        vals = [metrics.get(f"auc{k}") for k in (1, 2, 3)]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else -np.inf
    v = metrics.get(key)
    return -np.inf if v is None else float(v)


def label_subset(train: TaskExamples, fraction: float, seed: int) -> TaskExamples:
    if fraction >= 1.0:
        return train
    ids = np.unique(train.patient_id)
    rng = np.random.default_rng(seed)
    keep = set(rng.choice(ids, size=max(1, int(round(fraction * len(ids)))), replace=False).tolist())
    return train.subset(np.array([p in keep for p in train.patient_id]))


def load_pretrained(model: TimeAwareModel, path) -> list[str]:
    params, _ = ckpt.load(path)
    return ckpt.assign(model.named_params(), params)


def task_name(ft) -> str:
    return ft.task if ft.task == "variable_interval" else f"fixed_horizon_{ft.horizon:g}y"


def run_finetune(cfg: ExperimentConfig, pretrained=None, run_dir=None) -> RunRecord:
    """Train head + field + encoder on the task; keep the best validation epoch.

    Epoch 0 in the validation curve is the untouched initial model.
    """
    ft = cfg.finetune
    run_dir = _prepare(cfg, run_dir or Path(cfg.output_dir) / "finetune")
    cohort = get_cohort(cfg)
    splits = task_splits(cohort, ft.task, ft.horizon, ft.tol_years, child_seed(cfg.seed, _SPLIT))
    train = label_subset(splits["train"], ft.label_fraction, child_seed(cfg.seed, _LABELS))
    model = new_model(cfg)
    loaded = load_pretrained(model, pretrained) if pretrained else []
    weights = ckpt.load(pretrained)[1].get("scheme", "pretrained") if pretrained else "scratch"
    params = model.params
    opt = AdamW(params, ft.lr, ft.weight_decay)
    rng = np.random.default_rng(child_seed(cfg.seed, _FINETUNE))
    n_batches = len(batch_order(len(train), ft.batch_size, np.random.default_rng(0)))
    total = max(1, ft.epochs * n_batches)

    record = RunRecord(cfg.hash(), str(run_dir), loss_curve=str(run_dir / "loss_curve.jsonl"))
    curve: list[dict] = []
    val_curve = []
    step = 0
    epoch = 0
    best = None
    try:
        val = evaluate_model(model, splits["val"], cfg.solver)
        val_curve.append({"epoch": 0, **val})
        best = (selection_value(val, ft.select_metric), 0, _snapshot(model))
        for epoch in range(1, ft.epochs + 1):
            for idx in batch_order(len(train), ft.batch_size, rng):
                batch = train.subset(idx)
                with Tape() as tape:
                    loss = cross_entropy(model_logits(model, batch, cfg.solver, ft.grad_mode), batch.target_grade)
                grads = backward(tape, loss, params)
                gnorm = global_norm(grads)
                if not np.isfinite(gnorm):
                    raise NonFiniteError("non-finite gradient norm")
                opt.step(grads, one_cycle_lr(step, total, ft.lr))
                curve.append({"epoch": epoch, "step": step, "scheme": "finetune", "loss": float(loss.data),
                              "terms": {"cross_entropy": float(loss.data)}, "grad_norm": gnorm, "nan_flag": False})
                step += 1
            val = evaluate_model(model, splits["val"], cfg.solver)
            val_curve.append({"epoch": epoch, **val})
            score = selection_value(val, ft.select_metric)
            if score > best[0]:
                best = (score, epoch, _snapshot(model))
    except (NonFiniteError, SolverError, FloatingPointError) as exc:
        curve.append({"epoch": epoch, "step": step, "scheme": "finetune", "loss": float("nan"), "terms": {},
                      "grad_norm": float("nan"), "nan_flag": True})
        _write_rows(run_dir / "loss_curve.jsonl", curve)
        _write_rows(run_dir / "val_curve.jsonl", val_curve)
        msg = f"fine-tuning diverged at epoch {epoch}, step {step}: {exc}"
        record.stability = _stability(curve, step, msg)
        _finish(record, run_dir)
        raise RunDivergence(msg, record) from exc

    _restore(model, best[2])
    named = {k: v.data for k, v in model.named_params().items()}
    path = ckpt.save(run_dir / "checkpoint", named, {"head": cfg.model.head, "best_epoch": best[1],
                                                      "pretrained_digest": ckpt.digest(pretrained) if pretrained else None})
    test = evaluate_model(model, splits["test"], cfg.solver)
    _write_rows(run_dir / "loss_curve.jsonl", curve)
    _write_rows(run_dir / "val_curve.jsonl", val_curve)
    record.checkpoint = str(path)
    record.checkpoint_digest = ckpt.digest(path)
    record.metrics = {"test": test, "best_epoch": best[1], "best_val": val_curve[best[1]],
                      "loaded": len(loaded), "n_train": len(train), "method": cfg.model.head,
                      "weights": weights, "task": task_name(ft)}
    record.stability = _stability(curve)
    Path(run_dir, "metrics.json").write_text(json.dumps(record.metrics, indent=2, sort_keys=True) + "\n")
    _finish(record, run_dir)
    return record


def _snapshot(model: TimeAwareModel) -> dict:
    return {k: v.data.copy() for k, v in model.named_params().items()}


def _restore(model: TimeAwareModel, snap: dict) -> None:
    for k, v in model.named_params().items():
        v.data = snap[k].copy()


def run_evaluate(cfg: ExperimentConfig, checkpoint_path, split: str = "test") -> dict:
    """Load a fine-tuned checkpoint and score it on ``split``."""
    diffcore.set_precision(cfg.precision)
    ft = cfg.finetune
    splits = task_splits(get_cohort(cfg), ft.task, ft.horizon, ft.tol_years, child_seed(cfg.seed, _SPLIT))
    model = new_model(cfg)
    params, _ = ckpt.load(checkpoint_path)
    ckpt.assign(model.named_params(), params, prefixes=("",))
    return evaluate_model(model, splits[split], cfg.solver)


# ablation grid

ABLATION_GRID = (
    ("simclr_dpa", {"delta_mode": "fixed"}),
    ("simclr_dpa", {"delta_mode": "unaligned"}),
    ("simclr_dpa", {"delta_mode": "aligned"}),
    ("byol_tetc", {"with_tc": False}),
    ("byol_tetc", {"with_tc": True}),
)


def arm_name(scheme: str, opts: dict) -> str:
    if scheme == "simclr_dpa":
        return f"simclr_dpa/delta={opts['delta_mode']}"
    return f"byol_tetc/tc={'yes' if opts['with_tc'] else 'no'}"


def run_ablate(cfg: ExperimentConfig, run_dir=None) -> list[dict]:
    """Pretrain + fine-tune every arm; failed arms are recorded and the grid continues."""
    run_dir = _prepare(cfg, run_dir or Path(cfg.output_dir) / "ablate")
    rows = []
    for i, (scheme, opts) in enumerate(ABLATION_GRID):
        name = arm_name(scheme, opts)
        arm_cfg = cfg.with_overrides(pretrain={"scheme": scheme, **opts})
        arm_dir = run_dir / f"arm{i}"
        row = {"arm": name, "scheme": scheme, **opts}
        try:
            pre = run_pretrain(arm_cfg, arm_dir / "pretrain")
            fin = run_finetune(arm_cfg, pre.checkpoint, arm_dir / "finetune")
            row.update({c: fin.metrics["test"].get(c) for c in METRIC_COLUMNS})
            meta = ckpt.load(pre.checkpoint)[1]
            row["delta_trace"] = meta.get("delta_trace", [])
        except (RunDivergence, SolverError, NonFiniteError) as exc:
            row.update({c: None for c in METRIC_COLUMNS})
            row["error"] = str(exc)
        rows.append(row)
    Path(run_dir, "ablation.json").write_text(table_json(rows) + "\n")
    Path(run_dir, "ablation.txt").write_text(table_text(rows, key_columns=("arm",)) + "\n")
    return rows


def grid_table(records: list[dict]) -> list[dict]:
    return metric_table(records)
