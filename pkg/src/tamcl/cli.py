"""Command-line entry point: ``tamcl run | report | gen | check``."""

from __future__ import annotations

import os
import sys
from dataclasses import fields
from pathlib import Path

import click
import yaml

from tamcl.errors import TamclError
from tamcl.experiment import ABLATIONS, RunConfig, render_report, run_experiment
from tamcl.tasks import default_sequence, generate_task, load_manifest, save_manifest, write_dataset

OUT_ROOT_ENV = "TAMCL_OUT_ROOT"


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


@click.group()
def main() -> None:
    """Task-attentive continual learning on synthetic multimodal task sequences."""


_RUN_FIELDS = {f.name for f in fields(RunConfig)}


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="YAML file of run settings; command-line flags override it.")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False),
              help="Task manifest (default: the built-in synthetic sequence).")
@click.option("--n-tasks", type=int, help="Length of the built-in sequence.")
@click.option("--data-seed", type=int, help="Base seed of the built-in sequence.")
@click.option("--depth", type=int)
@click.option("--hidden", type=int)
@click.option("--heads", type=int)
@click.option("--mlp-dim", type=int)
@click.option("--patch", type=int)
@click.option("--n-frozen", type=int, help="Encoder blocks to freeze (default round(6/11 * depth)).")
@click.option("--lr", type=float)
@click.option("--weight-decay", type=float)
@click.option("--epochs", type=int)
@click.option("--batch-size", type=int)
@click.option("--replay-fraction", type=float)
@click.option("--replay-freq", type=int)
@click.option("--alpha", type=float)
@click.option("--temperature", type=float)
@click.option("--div-mode", type=click.Choice(["repel", "literal"]))
@click.option("--ablate", "ablations", multiple=True, type=click.Choice(ABLATIONS),
              help="Repeatable: no_tab, no_ikd, no_replay.")
@click.option("--seed", type=int)
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              help=f"Run directory (default: ${OUT_ROOT_ENV}/<config hash>).")
@click.option("--quiet", is_flag=True)
def run(config_path, quiet, **flags) -> None:
    """Train a task sequence, evaluate after every task and write a report."""
    settings = {}
    if config_path:
        settings = yaml.safe_load(Path(config_path).read_text()) or {}
        if not isinstance(settings, dict):
            _fail(TamclError(f"{config_path}: run config must be a mapping"))
    for key, value in flags.items():
        if value is None or (key == "ablations" and not value):
            continue
        settings[key] = value
    try:
        cfg = RunConfig.from_dict({k: v for k, v in settings.items() if k in _RUN_FIELDS})
        unknown = set(settings) - _RUN_FIELDS
        if unknown:
            raise TamclError(f"unknown run setting(s) {sorted(unknown)}")
        if "out_dir" not in settings:
            cfg.out_dir = str(_out_root() / cfg.hash())
        result = run_experiment(cfg, log=None if quiet else click.echo)
    except (TamclError, KeyError, ValueError, OSError) as exc:
        _fail(exc)
    if not quiet:
        click.echo(result.report.to_text())
    click.echo(f"run directory: {result.out_dir}")


@main.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
def report(run_dir) -> None:
    """Re-render the tables of RUN_DIR from its raw artifacts."""
    try:
        rep = render_report(run_dir)
    except (TamclError, OSError) as exc:
        _fail(exc)
    click.echo(rep.to_text(), nl=False)


@main.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False),
              help="Task manifest (default: the built-in synthetic sequence).")
@click.option("--n-tasks", type=int, default=3, show_default=True)
@click.option("--data-seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def gen(manifest, n_tasks, data_seed, out_dir) -> None:
    """Materialise train/test dataset files (and the manifest) for a task sequence."""
    out = Path(out_dir)
    try:
        specs = load_manifest(manifest) if manifest else default_sequence(n_tasks, base_seed=data_seed)
        save_manifest(specs, out / "manifest.yaml")
        for spec in specs:
            train, test = generate_task(spec)
            write_dataset(train, out / f"task_{spec.task_id}_train.bin")
            write_dataset(test, out / f"task_{spec.task_id}_test.bin")
            click.echo(f"task {spec.label}: {len(train)} train / {len(test)} test, "
                       f"{spec.n_labels} labels, {spec.n_images} image(s)")
    except (TamclError, OSError) as exc:
        _fail(exc)


@main.command()
@click.option("--only", multiple=True, help="Run only the named check (repeatable).")
def check(only) -> None:
    """Run the finite-difference and invariant self-checks."""
    from tamcl.checks import run_checks

    def show(res) -> None:
        mark = "PASS" if res.passed else "FAIL"
        click.echo(f"{mark}  {res.name:<24} {res.detail} ({res.seconds:.1f}s)")

    try:
        results = run_checks(list(only), on_result=show)
    except KeyError as exc:
        _fail(exc)
    failed = [r.name for r in results if not r.passed]
    click.echo(f"{len(results) - len(failed)}/{len(results)} checks passed")
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
