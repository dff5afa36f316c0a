"""Experiment orchestration: configs, checkpoints, pipelines and the CLI."""
