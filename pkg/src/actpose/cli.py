"""Command-line entry point: ``actpose gen-data | compare | tpr-report | converge``."""

from __future__ import annotations

import logging
import sys

import click

from . import harness
from .budgeting import BudgetError
from .harness import CsvFormatError, ExperimentSpec
from .metrics import DEFAULT_DELTA, DEFAULT_K, convergence_epoch
from .synthmotion import (
    DatasetFormatError,
    GenConfig,
    action_name,
    export_csv,
    gen_dataset,
    save_dataset,
)

_EXPECTED = (BudgetError, CsvFormatError, DatasetFormatError, KeyError, ValueError, OSError, ArithmeticError)


def _fail(exc: Exception) -> None:
    msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
    raise click.ClickException(str(msg))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log budget and generation details.")
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@click.option("--actions", default=15, show_default=True, help="Number of actions n_ac.")
@click.option("--subjects", default=2, show_default=True)
@click.option("--clips", default=4, show_default=True, help="Clips per action.")
@click.option("--clip-frames", default=500, show_default=True, help="Frames per clip.")
@click.option("--noise", default=1.0, show_default=True, help="2D keypoint noise sigma in px.")
@click.option("--seed", default=0, show_default=True)
@click.option("-o", "--out", required=True, type=click.Path(dir_okay=False), help="Output .plb file.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Also export one row per frame.")
def gen_data(actions, subjects, clips, clip_frames, noise, seed, out, csv_path):
    """Generate a synthetic dataset and print per-action frame totals."""
    try:
        cfg = GenConfig(n_ac=actions, subjects=subjects, clips_per_action=clips,
                        frames_per_clip=clip_frames, noise_px=noise, seed=seed)
        ds = gen_dataset(cfg)
        save_dataset(ds, out)
        if csv_path:
            export_csv(ds, csv_path)
    except _EXPECTED as exc:
        _fail(exc)
    for a, f in ds.frame_totals().items():
        click.echo(f"{action_name(a)}\t{f}")
    click.echo(f"total\t{sum(ds.frame_totals().values())}")


@main.command()
@click.option("--mode", type=click.Choice(["common", "action-oriented"]), default="common", show_default=True)
@click.option("-F", "--frames", default=27, show_default=True, help="Receptive field, a power of 3.")
@click.option("--ue", "unit_epochs", default=15, show_default=True, help="Unit epochs.")
@click.option("-N", "--budget", type=int, help="Total training frames (default: all available, balanced).")
@click.option("--target", help="Target action for action-oriented mode (name or id).")
@click.option("--seed", default=0, show_default=True)
@click.option("--noise", default=1.0, show_default=True, help="2D noise in px when generating data.")
@click.option("--data", "dataset", type=click.Path(exists=True, dir_okay=False), help="Existing .plb dataset.")
@click.option("--actions", default=15, show_default=True, help="Actions when generating data.")
@click.option("--clips", default=4, show_default=True, help="Clips per action when generating data.")
@click.option("--clip-frames", default=500, show_default=True)
@click.option("--channels", default=64, show_default=True)
@click.option("--batch-size", default=64, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--workers", default=1, show_default=True, help="Processes for per-action rounds.")
@click.option("--k", default=DEFAULT_K, show_default=True, help="Augmenting constant for eps0.")
@click.option("--delta", default=DEFAULT_DELTA, show_default=True, help="Convergence tolerance in mm.")
@click.option("-o", "--out", default="out", show_default=True, type=click.Path(file_okay=False))
def compare(mode, **opts):
    """Train pooled and per-action models under equal budgets and report both."""
    try:
        spec = ExperimentSpec(mode=mode.replace("-", "_"), **opts)
        result = harness.run_compare(spec)
    except _EXPECTED as exc:
        _fail(exc)
    for m, p in result.plans.items():
        click.echo(f"[{m}]\n{p.manifest()}")
    click.echo(result.files["report"].read_text())


@main.command("tpr-report")
@click.argument("efficiency_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--k", default=DEFAULT_K, show_default=True)
def tpr_report(efficiency_csv, k):
    """Efficiency summary (eps0, TPR) for the two models in EFFICIENCY_CSV."""
    try:
        curves = harness.read_efficiency_csv(efficiency_csv)
        click.echo(harness.tpr_block(curves, k))
    except _EXPECTED as exc:
        _fail(exc)


@main.command()
@click.argument("curves_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--delta", default=DEFAULT_DELTA, show_default=True)
def converge(curves_csv, delta):
    """First epoch within DELTA mm of the final error, for every column."""
    try:
        columns = harness.read_curves_csv(curves_csv)
        results = {name: convergence_epoch(c, delta) for name, c in columns.items()}
    except _EXPECTED as exc:
        _fail(exc)
    click.echo(harness.format_convergence(results))


if __name__ == "__main__":
    main()
