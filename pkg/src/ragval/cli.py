"""Command-line entry points for the evaluation pipeline.

Every stage is a subcommand; `run` chains all eight. Exit code 0 means the
requested stages completed and no hard risk thresholds were violated; 1 is
an error, 2 means the pipeline ran but thresholds failed.
"""

from __future__ import annotations

import sys

import click

from .config import ConfigError, load_config
from .pipeline import STAGES, EvaluateOutcome, PipelineError, run_all, run_stage


def _load(config_path: str, out: str | None, seed: int | None):
    overrides = {}
    if out is not None:
        overrides["output_dir"] = out
    if seed is not None:
        overrides["seed"] = seed
    return load_config(config_path, overrides)


@click.group()
def main():
    """Offline testing and validation for RAG systems."""


def _stage_command(stage: str):
    @click.command(name=stage, help=f"Run the {stage} stage.")
    @click.option("--config", "config_path", required=True, type=click.Path(exists=True),
                  help="Run configuration file (YAML).")
    @click.option("--out", default=None, help="Override output directory.")
    @click.option("--seed", default=None, type=int, help="Override the global seed.")
    def cmd(config_path: str, out: str | None, seed: int | None):
        try:
            cfg = _load(config_path, out, seed)
            result = run_stage(stage, cfg)
        except (ConfigError, PipelineError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        if isinstance(result, EvaluateOutcome) and result.hard_failures:
            click.echo(f"{stage}: completed with {result.hard_failures} hard threshold "
                       f"violation(s); see risk.json", err=True)
            sys.exit(2)
        click.echo(f"{stage}: done ({cfg.output_dir})")

    return cmd


for _stage in STAGES:
    main.add_command(_stage_command(_stage))


@main.command(name="run", help="Run all stages in order.")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", default=None, help="Override output directory.")
@click.option("--seed", default=None, type=int, help="Override the global seed.")
def run_cmd(config_path: str, out: str | None, seed: int | None):
    try:
        cfg = _load(config_path, out, seed)
        store, hard_failures = run_all(cfg)
    except (ConfigError, PipelineError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"run {store.manifest['run_id']}: all stages done ({cfg.output_dir})")
    if hard_failures:
        click.echo(f"{hard_failures} hard threshold violation(s); see risk.json", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
