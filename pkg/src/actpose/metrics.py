"""Pose error protocols and training-efficiency measures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NO_CONVERGENCE = None
DEFAULT_K = 1.2
DEFAULT_DELTA = 0.5


class MetricShapeError(ValueError):
    pass


def _root_relative(poses: np.ndarray) -> np.ndarray:
    return poses - poses[..., :1, :]


def _joint_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...k,...k->...", pred - gt, pred - gt))


def _check_pair(pred, gt, min_frames: int) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    if pred.ndim != 3 or pred.shape[2] != 3:
        raise MetricShapeError(f"expected (T, J, 3) poses, got {pred.shape}")
    if pred.shape[0] < min_frames:
        raise MetricShapeError(f"need at least {min_frames} frame(s), got {pred.shape[0]}")
    return pred, gt


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error (mm) after per-frame root alignment."""
    pred, gt = _check_pair(pred, gt, 1)
    err = _joint_errors(_root_relative(pred), _root_relative(gt))
    return math.fsum(err.reshape(-1).tolist()) / err.size


def v_mpjpe(pred, gt) -> float:
    """Mean per-joint error of first-order temporal differences (mm per frame).

    The velocities are compared as they are, without root alignment.
    """
    pred, gt = _check_pair(pred, gt, 2)
    err = _joint_errors(np.diff(pred, axis=0), np.diff(gt, axis=0))
    return math.fsum(err.reshape(-1).tolist()) / err.size


def epsilon0(eps_half_1: float, eps_half_2: float, k: float = DEFAULT_K) -> float:
    """Regulated baseline error: mean of both models' half-way errors, times k."""
    if eps_half_1 < 0 or eps_half_2 < 0:
        raise ValueError("errors must be non-negative")
    if k <= 0:
        raise ValueError("k must be positive")
    return (eps_half_1 + eps_half_2) / 2 * k


def tpr(eps0: float, eps_t: float, seconds: float) -> float:
    """Time-precision rate: error reduction below ``eps0`` per training second."""
    if not seconds > 0:
        raise ValueError(f"training time must be positive, got {seconds}")
    return (eps0 - eps_t) / seconds


def improvement_percent(before: float, after: float) -> float:
    """``(before - after) / after * 100``."""
    if before <= 0 or after <= 0:
        raise ValueError("both errors must be positive")
    return (before - after) / after * 100.0


@dataclass(frozen=True)
class ErrorCurve:
    epochs: tuple[int, ...]
    errors: tuple[float, ...]

    def __post_init__(self):
        if len(self.epochs) != len(self.errors):
            raise ValueError("epochs and errors differ in length")
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ValueError("epochs must be strictly increasing")
        if not all(math.isfinite(e) for e in self.errors):
            raise ValueError("errors must be finite")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> ErrorCurve:
        pairs = list(pairs)
        return cls(tuple(int(p[0]) for p in pairs), tuple(float(p[1]) for p in pairs))

    def __len__(self) -> int:
        return len(self.epochs)

    def at_half(self) -> float:
        """Error at the observed epoch closest to half the final epoch (earlier wins ties)."""
        half = self.epochs[-1] / 2
        best = min(range(len(self.epochs)), key=lambda i: (abs(self.epochs[i] - half), i))
        return self.errors[best]

    @property
    def final(self) -> float:
        return self.errors[-1]


def convergence_epoch(curve: ErrorCurve, delta: float = DEFAULT_DELTA) -> int | None:
    """First epoch whose error is within ``delta`` of the final error.

    Returns ``None`` when only the final epoch qualifies.
    """
    if len(curve) == 0:
        raise ValueError("empty curve")
    if delta <= 0:
        raise ValueError("delta must be positive")
    final = curve.final
    for epoch, err in zip(curve.epochs[:-1], curve.errors[:-1]):
        if abs(err - final) <= delta:
            return epoch
    return NO_CONVERGENCE


def mean_curve(curves: Sequence[ErrorCurve]) -> ErrorCurve:
    """Epoch-wise mean of curves sharing one epoch grid."""
    grid = curves[0].epochs
    if any(c.epochs != grid for c in curves):
        raise ValueError("curves do not share an epoch grid")
    return ErrorCurve(grid, tuple(math.fsum(c.errors[i] for c in curves) / len(curves) for i in range(len(grid))))


@dataclass(frozen=True)
class Efficiency:
    """Half-way error, final error, training time and TPR of one model."""

    model: str
    eps_half: float
    eps_t: float
    seconds: float
    eps0: float
    k: float

    @property
    def theta(self) -> float:
        return tpr(self.eps0, self.eps_t, self.seconds)


def efficiency_pair(
    names: tuple[str, str],
    curves: tuple[ErrorCurve, ErrorCurve],
    seconds: tuple[float, float],
    k: float = DEFAULT_K,
) -> tuple[Efficiency, Efficiency]:
    if curves[0].epochs != curves[1].epochs:
        raise ValueError(f"epoch grids differ: {curves[0].epochs} vs {curves[1].epochs}")
    e0 = epsilon0(curves[0].at_half(), curves[1].at_half(), k)
    return tuple(
        Efficiency(n, c.at_half(), c.final, s, e0, k) for n, c, s in zip(names, curves, seconds)
    )


@dataclass
class MetricReport:
    """Per-action errors of every compared model, plus efficiency summaries."""

    mode: str
    frames: int
    unit_epochs: int
    actions: list[str]
    mpjpe_mm: dict[str, list[float]] = field(default_factory=dict)
    vmpjpe_mm: dict[str, list[float]] = field(default_factory=dict)
    train_seconds: dict[str, float] = field(default_factory=dict)
    efficiency: dict[str, list[Efficiency]] = field(default_factory=dict)  # keyed by metric

    def add_model(self, model: str, mpjpe_vals, vmpjpe_vals, seconds: float) -> None:
        if len(mpjpe_vals) != len(self.actions) or len(vmpjpe_vals) != len(self.actions):
            raise ValueError(f"{model}: expected {len(self.actions)} per-action values")
        self.mpjpe_mm[model] = [float(v) for v in mpjpe_vals]
        self.vmpjpe_mm[model] = [float(v) for v in vmpjpe_vals]
        self.train_seconds[model] = float(seconds)

    def average(self, metric: str, model: str) -> float:
        vals = getattr(self, metric)[model]
        return math.fsum(vals) / len(vals)

    @property
    def models(self) -> list[str]:
        return list(self.mpjpe_mm)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "mode", "F", "UE", "action", "mpjpe_mm", "vmpjpe_mm", "train_seconds"])
            for model in self.models:
                secs = round(self.train_seconds[model])
                for i, action in enumerate(self.actions):
                    w.writerow([model, self.mode, self.frames, self.unit_epochs, action,
                                f"{self.mpjpe_mm[model][i]:.6f}", f"{self.vmpjpe_mm[model][i]:.6f}", secs])
                w.writerow([model, self.mode, self.frames, self.unit_epochs, "Avg",
                            f"{self.average('mpjpe_mm', model):.6f}",
                            f"{self.average('vmpjpe_mm', model):.6f}", secs])

    def write_summary_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "model", "eps_half", "eps_t", "eps0", "k", "train_seconds", "tpr"])
            for metric, rows in self.efficiency.items():
                for e in rows:
                    w.writerow([metric, e.model, f"{e.eps_half:.6f}", f"{e.eps_t:.6f}", f"{e.eps0:.6f}",
                                e.k, f"{e.seconds:.3f}", f"{e.theta:.6e}"])
