"""Pooled vs. per-action comparison runs and their reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import budgeting
from .budgeting import BudgetError, Mode, TrainPlan, allocate, build_plan, pooled_budget
from .liftnet import blocks_for_receptive_field, save_checkpoint
from .metrics import (
    DEFAULT_DELTA,
    DEFAULT_K,
    Efficiency,
    ErrorCurve,
    MetricReport,
    convergence_epoch,
    efficiency_pair,
    mean_curve,
)
from .synthmotion import Dataset, GenConfig, action_id, action_name, gen_dataset, load_dataset, split
from .trainer import RunRecord, TrainConfig, available_windows, run_plan, write_curves_csv

log = logging.getLogger(__name__)

POOLED, PER_ACTION = "pooled", "per-action"
TEST_FRACTION = 0.25


class CsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    mode: Mode = Mode.COMMON
    frames: int = 27
    unit_epochs: int = 15
    budget: int | None = None
    target: str | None = None
    seed: int = 0
    out: str = "out"
    dataset: str | None = None
    # generation config, used when no dataset path is given
    actions: int = 15
    subjects: int = 2
    clips: int = 4
    clip_frames: int = 500
    noise: float = 1.0
    # training
    channels: int = 64
    batch_size: int = 64
    lr: float = 1e-3
    workers: int = 1
    k: float = DEFAULT_K
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        blocks_for_receptive_field(self.frames)
        if self.unit_epochs < 1:
            raise ValueError("unit epochs must be >= 1")
        if self.mode is Mode.ACTION_ORIENTED and self.target is None:
            raise ValueError("action-oriented mode needs --target")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class EfficiencyCurve:
    """Validation errors and cumulative training time of one model, per unit epoch."""

    model: str
    epochs: list[int]
    mpjpe: list[float]
    vmpjpe: list[float]
    seconds: list[float]

    def curve(self, metric: str) -> ErrorCurve:
        return ErrorCurve(tuple(self.epochs), tuple(self.mpjpe if metric == "mpjpe" else self.vmpjpe))

    def seconds_at(self, epoch: int) -> float:
        return self.seconds[self.epochs.index(epoch)]


@dataclass
class CompareResult:
    spec: ExperimentSpec
    report: MetricReport
    records: dict[str, RunRecord]
    plans: dict[str, TrainPlan]
    efficiency_curves: dict[str, EfficiencyCurve]
    convergence: dict[str, int | None]
    files: dict[str, Path] = field(default_factory=dict)


def _train_count(n_clips: int) -> int:
    return n_clips - min(max(1, math.floor(n_clips * TEST_FRACTION + 0.5)), n_clips - 1)


def resolve_dataset(spec: ExperimentSpec) -> Dataset:
    if spec.dataset:
        return load_dataset(spec.dataset)
    clips = spec.clips
    if spec.mode is Mode.ACTION_ORIENTED and spec.budget:
        # grow every action evenly until the target's training split holds N windows
        per_clip = spec.clip_frames - spec.frames + 1
        if per_clip < 1:
            raise BudgetError(f"clips of {spec.clip_frames} frames cannot hold a {spec.frames}-frame window")
        while _train_count(clips) * per_clip < spec.budget:
            clips += 1
        if clips != spec.clips:
            log.info("generating %d clips per action so the target can supply %d frames", clips, spec.budget)
    cfg = GenConfig(
        n_ac=spec.actions,
        subjects=spec.subjects,
        clips_per_action=clips,
        frames_per_clip=spec.clip_frames,
        noise_px=spec.noise,
        seed=spec.seed,
    )
    return gen_dataset(cfg)


def _efficiency_curve(model: str, record: RunRecord, action: int | None) -> EfficiencyCurve:
    rounds = record.rounds
    epochs = list(rounds[0].curve.epochs)
    seconds = [math.fsum(r.epoch_seconds[i] for r in rounds) for i in range(len(epochs))]
    if action is not None:
        (r,) = [r for r in rounds if action in r.action_mpjpe]
        return EfficiencyCurve(model, epochs, list(r.action_mpjpe[action]), list(r.action_vmpjpe[action]), seconds)
    mp = mean_curve([r.curve for r in rounds])
    vm = mean_curve([r.vcurve for r in rounds])
    return EfficiencyCurve(model, epochs, list(mp.errors), list(vm.errors), seconds)


def efficiencies(curves: Sequence[EfficiencyCurve], k: float) -> dict[str, list[Efficiency]]:
    a, b = curves
    if a.epochs != b.epochs:
        raise ValueError(f"epoch grids differ between {a.model} and {b.model}")
    out = {}
    for metric in ("mpjpe", "vmpjpe"):
        out[metric] = list(
            efficiency_pair((a.model, b.model), (a.curve(metric), b.curve(metric)),
                            (a.seconds[-1], b.seconds[-1]), k)
        )
    return out


def run_compare(spec: ExperimentSpec) -> CompareResult:
    dataset = resolve_dataset(spec)
    train, test = split(dataset, TEST_FRACTION, spec.seed)
    n_ac = dataset.n_ac
    available = available_windows(train, spec.frames)

    target = action_id(spec.target, n_ac) if spec.target is not None else None
    if spec.mode is Mode.COMMON:
        total = spec.budget if spec.budget else n_ac * min(available.values())
        budget = allocate(Mode.COMMON, total, n_ac)
    else:
        total = spec.budget if spec.budget else available[target]
        budget = allocate(Mode.ACTION_ORIENTED, total, n_ac, target)
    plans = {
        POOLED: build_plan(pooled_budget(budget), spec.unit_epochs, pooled=True),
        PER_ACTION: build_plan(budget, spec.unit_epochs),
    }
    for plan in plans.values():
        budgeting.check_plan(plan, available)
    budgeting.ratio_remainders(dataset.frame_totals())

    config = TrainConfig(batch_size=spec.batch_size, lr=spec.lr, channels=spec.channels, seed=spec.seed)
    records = {
        POOLED: run_plan(plans[POOLED], train, test, spec.frames, config),
        PER_ACTION: run_plan(plans[PER_ACTION], train, test, spec.frames, config, workers=spec.workers),
    }

    graded = list(range(n_ac)) if spec.mode is Mode.COMMON else [target]
    report = MetricReport(spec.mode.value, spec.frames, spec.unit_epochs, [action_name(a) for a in graded])
    for model, record in records.items():
        finals = [record.final_errors(a) for a in graded]
        report.add_model(model, [m for m, _ in finals], [v for _, v in finals], record.seconds)

    curves = {model: _efficiency_curve(model, rec, target if spec.mode is Mode.ACTION_ORIENTED else None)
              for model, rec in records.items()}
    report.efficiency = efficiencies([curves[POOLED], curves[PER_ACTION]], spec.k)

    columns = convergence_columns(records, target)
    convergence = {name: convergence_epoch(c, spec.delta) for name, c in columns.items()}
    result = CompareResult(spec, report, records, plans, curves, convergence)
    write_outputs(result, dataset, columns)
    return result


def convergence_columns(records: dict[str, RunRecord], target: int | None) -> dict[str, ErrorCurve]:
    cols = {f"{m}-Avg": mean_curve([r.curve for r in rec.rounds]) for m, rec in records.items()}
    if target is not None:
        for m, rec in records.items():
            (r,) = [r for r in rec.rounds if target in r.action_mpjpe]
            cols[f"{m}-{action_name(target)}"] = ErrorCurve(r.curve.epochs, tuple(r.action_mpjpe[target]))
    return cols


# -- tables -------------------------------------------------------------------

def markdown_table(title: str, actions: Sequence[str], rows: dict[str, Sequence[float]], decimals: int) -> str:
    """Per-action table with the lower error of each column in bold.

    Cells are rounded to ``decimals``; Avg is the mean of the rounded cells,
    printed to two decimals.
    """
    rounded = {m: [round(v, decimals) for v in vals] for m, vals in rows.items()}
    avgs = {m: round(math.fsum(v) / len(v), 2) for m, v in rounded.items()}
    header = "| Model | " + " | ".join(actions) + " | Avg |"
    sep = "|---" * (len(actions) + 2) + "|"
    lines = [f"**{title}**", "", header, sep]
    for m, vals in rounded.items():
        cells = []
        for i, v in enumerate(vals):
            text = f"{v:.{decimals}f}"
            best = min(r[i] for r in rounded.values())
            cells.append(f"**{text}**" if len(rounded) > 1 and v == best else text)
        best_avg = min(avgs.values())
        avg = f"{avgs[m]:.2f}"
        cells.append(f"**{avg}**" if len(rounded) > 1 and avgs[m] == best_avg else avg)
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def tpr_block(curves: Sequence[EfficiencyCurve], k: float = DEFAULT_K) -> str:
    """Two-model summary: times, errors at half and full training, eps0 and TPR."""
    a, b = curves
    eff = efficiencies(curves, k)
    half = _half_epoch(a.epochs)
    last = a.epochs[-1]
    mp_a, mp_b = eff["mpjpe"]
    vm_a, vm_b = eff["vmpjpe"]
    rows = [
        (f"TC ({half} E)", f"{a.seconds_at(half):.0f} sec.", f"{b.seconds_at(half):.0f} sec."),
        ("MPJPE", f"{mp_a.eps_half:.2f} mm", f"{mp_b.eps_half:.2f} mm"),
        ("Velocity-M", f"{vm_a.eps_half:.2f} mm", f"{vm_b.eps_half:.2f} mm"),
        (f"TC ({last} E)", f"{a.seconds[-1]:.0f} sec.", f"{b.seconds[-1]:.0f} sec."),
        ("MPJPE", f"{mp_a.eps_t:.2f} mm", f"{mp_b.eps_t:.2f} mm"),
        ("Velocity-M", f"{vm_a.eps_t:.2f} mm", f"{vm_b.eps_t:.2f} mm"),
        ("MPJPE eps0", f"{mp_a.eps0:.4g}", ""),
        ("Velo-M eps0", f"{vm_a.eps0:.4g}", ""),
        ("MPJPE TPR", f"{mp_a.theta:.4g}", f"{mp_b.theta:.4g}"),
        ("Velo-M TPR", f"{vm_a.theta:.4g}", f"{vm_b.theta:.4g}"),
    ]
    lines = [f"| Object | {a.model} | {b.model} |", "|---|---|---|"]
    lines += [f"| {r[0]} | {r[1]} | {r[2]} |" for r in rows]
    return "\n".join(lines)


def _half_epoch(epochs: Sequence[int]) -> int:
    half = epochs[-1] / 2
    return min(epochs, key=lambda e: (abs(e - half), e))


# -- csv i/o ------------------------------------------------------------------

def write_efficiency_csv(curves: Sequence[EfficiencyCurve], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "epoch", "mpjpe_mm", "vmpjpe_mm", "train_seconds"])
        for c in curves:
            for row in zip(c.epochs, c.mpjpe, c.vmpjpe, c.seconds):
                w.writerow([c.model, row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.3f}"])


def read_efficiency_csv(path: str | Path) -> list[EfficiencyCurve]:
    """Inverse of :func:`write_efficiency_csv`; models keep first-seen order."""
    curves: dict[str, EfficiencyCurve] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["model", "epoch", "mpjpe_mm", "vmpjpe_mm", "train_seconds"]
        if header != expected:
            raise CsvFormatError(f"{path}:1: expected header {','.join(expected)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise CsvFormatError(f"{path}:{line}: expected 5 fields, got {len(row)}")
            try:
                epoch, mp, vm, secs = int(row[1]), float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{line}: {exc}") from None
            c = curves.setdefault(row[0], EfficiencyCurve(row[0], [], [], [], []))
            c.epochs.append(epoch)
            c.mpjpe.append(mp)
            c.vmpjpe.append(vm)
            c.seconds.append(secs)
    if len(curves) != 2:
        raise CsvFormatError(f"{path}: expected exactly two models, found {len(curves)}")
    return list(curves.values())


def write_convergence_csv(columns: dict[str, ErrorCurve], path: str | Path) -> None:
    names = list(columns)
    epochs = columns[names[0]].epochs
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + names)
        for i, e in enumerate(epochs):
            w.writerow([e] + [f"{columns[n].errors[i]:.6f}" for n in names])


def read_curves_csv(path: str | Path) -> dict[str, ErrorCurve]:
    """Wide curves file: an ``epoch`` column, then one error column per series.

    Empty cells are allowed (a series not observed at that epoch).
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2 or rows[0][0].strip().lower() not in ("epoch", "epochs"):
        raise CsvFormatError(f"{path}:1: header must be 'epoch' followed by at least one series name")
    names = [n.strip() for n in rows[0][1:]]
    pairs: dict[str, list[tuple[int, float]]] = {n: [] for n in names}
    for line, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(names) + 1:
            raise CsvFormatError(f"{path}:{line}: expected {len(names) + 1} fields, got {len(row)}")
        try:
            epoch = int(row[0])
            for n, cell in zip(names, row[1:]):
                if cell.strip():
                    pairs[n].append((epoch, float(cell)))
        except ValueError as exc:
            raise CsvFormatError(f"{path}:{line}: {exc}") from None
    try:
        return {n: ErrorCurve.from_pairs(p) for n, p in pairs.items()}
    except ValueError as exc:
        raise CsvFormatError(f"{path}: {exc}") from None


def format_convergence(results: dict[str, int | None]) -> str:
    return "\n".join(f"{name}: {'no convergence' if e is None else e}" for name, e in results.items())


def write_outputs(result: CompareResult, dataset: Dataset, columns: dict[str, ErrorCurve]) -> None:
    spec = result.spec
    out = Path(spec.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    report = result.report
    files = {
        "results": out / "results.csv",
        "summary": out / "summary.csv",
        "curves": out / "curves.csv",
        "efficiency": out / "efficiency.csv",
        "convergence": out / "convergence.csv",
        "report": out / "report.md",
        "manifest": out / "manifest.json",
    }
    report.write_csv(files["results"])
    report.write_summary_csv(files["summary"])
    write_curves_csv(result.records, files["curves"])
    curves = [result.efficiency_curves[POOLED], result.efficiency_curves[PER_ACTION]]
    write_efficiency_csv(curves, files["efficiency"])
    write_convergence_csv(columns, files["convergence"])
    for model, record in result.records.items():
        for r in record.rounds:
            name = model if r.label == "pooled" else f"{model}-{r.label}"
            save_checkpoint(r.params, out / "checkpoints" / f"{name}.plm")

    manifest = {
        "experiment": spec.to_json(),
        "seed": spec.seed,
        "dataset": {"n_ac": dataset.n_ac, "joints": dataset.joints, "clips": len(dataset.clips),
                    "frame_totals": {action_name(a): f for a, f in dataset.frame_totals().items()}},
        "plans": {m: p.manifest().splitlines() for m, p in result.plans.items()},
        "equivalence": {"unit_epochs": spec.unit_epochs, "n_ac": dataset.n_ac,
                        "original_epochs": spec.unit_epochs / dataset.n_ac},
    }
    files["manifest"].write_text(json.dumps(manifest, indent=2) + "\n")

    md = [
        f"# {spec.mode.value} comparison, F={spec.frames}, UE={spec.unit_epochs}",
        "",
        "```json",
        json.dumps(spec.to_json(), indent=2),
        "```",
        "",
        "## Training budgets",
        "",
    ]
    for m, p in result.plans.items():
        md += [f"{m}:", "```", p.manifest(), "```", ""]
    md += [
        markdown_table(f"MPJPE (mm), F={spec.frames}, UE={spec.unit_epochs}", report.actions, report.mpjpe_mm, 1),
        "",
        markdown_table(f"V-MPJPE (mm), F={spec.frames}, UE={spec.unit_epochs}", report.actions, report.vmpjpe_mm, 2),
        "",
        "## Efficiency",
        "",
        tpr_block(curves, spec.k),
        "",
        f"## Convergence (delta = {spec.delta} mm)",
        "",
        "```",
        format_convergence(result.convergence),
        "```",
        "",
    ]
    files["report"].write_text("\n".join(md))
    result.files = files
