"""Command line entry point: ``nodessl <subcommand> [options]``.

Exit codes: 0 success, 2 config error, 3 divergence/instability,
4 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from ..diffcore import NonFiniteError
from ..evalmetrics import metric_table, table_json, table_text
from ..odesolve import SolverError
from ..synthdata import EmptySplitError
from . import pipelines
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, from_dict, load_config

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("nodessl")


def _override(spec: str) -> tuple[list[str], object]:
    if "=" not in spec:
        raise ConfigError(f"--set expects section.key=value, got {spec!r}")
    key, raw = spec.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {spec!r}") from exc
    return key.split("."), value


def resolve_config(args) -> ExperimentConfig:
    """Config file, then ``--set`` overrides, then the global flags."""
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data = cfg.to_dict()
    for spec in args.set or []:
        path, value = _override(spec)
        node = data
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section in {spec!r}")
            node = node[part]
        node[path[-1]] = value
    if args.seed is not None:
        data["seed"] = args.seed
    if args.precision is not None:
        data["precision"] = args.precision
    if args.output_dir is not None:
        data["output_dir"] = args.output_dir
    if getattr(args, "head", None):
        data["model"]["head"] = args.head
    if getattr(args, "scheme", None):
        data["pretrain"]["scheme"] = args.scheme
    return from_dict(data)


def _plan(cmd: str, cfg: ExperimentConfig, extra: dict) -> dict:
    return {"command": cmd, "config_hash": cfg.hash(), **extra, "config": cfg.to_dict()}


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_gen_data(args, cfg):
    out = args.out or str(Path(cfg.output_dir) / "cohort.jsonl")
    if args.dry_run:
        return _plan("gen-data", cfg, {"out": out})
    n = pipelines.gen_data(cfg, out)
    return {"trajectories": n, "path": out}


def cmd_pretrain(args, cfg):
    run_dir = args.run_dir or str(Path(cfg.output_dir) / "pretrain")
    if args.dry_run:
        return _plan("pretrain", cfg, {"run_dir": run_dir})
    rec = pipelines.run_pretrain(cfg, run_dir)
    return {"run_dir": rec.run_dir, "checkpoint": rec.checkpoint, "digest": rec.checkpoint_digest,
            "stability": rec.stability}


def cmd_finetune(args, cfg):
    run_dir = args.run_dir or str(Path(cfg.output_dir) / "finetune")
    if args.dry_run:
        return _plan("finetune", cfg, {"run_dir": run_dir, "pretrained": args.pretrained})
    rec = pipelines.run_finetune(cfg, args.pretrained, run_dir)
    return {"run_dir": rec.run_dir, "checkpoint": rec.checkpoint, "metrics": rec.metrics}


def cmd_evaluate(args, cfg):
    if args.dry_run:
        return _plan("evaluate", cfg, {"checkpoint": args.checkpoint, "split": args.split})
    return pipelines.run_evaluate(cfg, args.checkpoint, args.split)


def cmd_ablate(args, cfg):
    run_dir = args.run_dir or str(Path(cfg.output_dir) / "ablate")
    if args.dry_run:
        arms = [pipelines.arm_name(s, o) for s, o in pipelines.ABLATION_GRID]
        return _plan("ablate", cfg, {"run_dir": run_dir, "arms": arms})
    rows = pipelines.run_ablate(cfg, run_dir)
    print(table_text(rows, key_columns=("arm",)))
    return None


def collect_runs(roots) -> list[dict]:
    runs = []
    for root in roots:
        for path in sorted(Path(root).rglob("metrics.json")):
            m = json.loads(path.read_text())
            if "test" not in m or "method" not in m:
                continue
            runs.append({"method": m["method"], "weights": m["weights"], "task": m["task"], "metrics": m["test"]})
    return runs


def cmd_report(args, cfg):
    if args.dry_run:
        return _plan("report", cfg, {"runs": args.runs})
    rows = metric_table(collect_runs(args.runs))
    if args.format == "json":
        print(table_json(rows))
    else:
        print(table_text(rows))
    return None


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan, no compute")
    common.add_argument("--output-dir")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config field, e.g. --set pretrain.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nodessl", description="time-aware NODE heads with SSL pretraining")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate and save a synthetic cohort")
    s.add_argument("--out")
    s = sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    s.add_argument("--scheme", choices=("simclr_dpa", "byol_tetc"))
    s.add_argument("--run-dir")
    s = sub.add_parser("finetune", parents=[common], help="supervised fine-tuning")
    s.add_argument("--pretrained", help="pretraining checkpoint directory (omit for scratch)")
    s.add_argument("--head", choices=("node", "node_rnn", "node_gru", "node_lstm"))
    s.add_argument("--run-dir")
    s = sub.add_parser("evaluate", parents=[common], help="score a fine-tuned checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--head", choices=("node", "node_rnn", "node_gru", "node_lstm"))
    s = sub.add_parser("ablate", parents=[common], help="run the 5-arm pretraining ablation")
    s.add_argument("--run-dir")
    s = sub.add_parser("report", parents=[common], help="tabulate fine-tuning runs")
    s.add_argument("runs", nargs="+", help="directories searched for metrics.json")
    s.add_argument("--format", choices=("text", "json"), default="text")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except pipelines.RunDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        print(json.dumps(exc.record.stability, indent=2, sort_keys=True), file=sys.stderr)
        return EXIT_DIVERGED
    except (SolverError, NonFiniteError, FloatingPointError) as exc:
        print(f"instability: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except EmptySplitError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if out is not None:
        _emit(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
