"""Deterministic execution of a :class:`~actpose.budgeting.TrainPlan`.

Every round owns its model, optimiser state and random streams, all keyed
off ``(config.seed, round key)``; rounds therefore give identical results
whether they run one after another or in separate processes.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import AdamConfig, AdamState, GradTape, Tensor, adam_step
from .budgeting import BudgetError, Round, TrainPlan, check_plan
from .liftnet import (
    LiftNetParams,
    LiftNetSpec,
    blocks_for_receptive_field,
    build,
    clip_to_rows,
    forward_batch,
    loss_mpjpe,
    predict_sequence,
)
from .metrics import ErrorCurve
from .synthmotion import Dataset, PoseClip, action_name, stream

# stream namespaces, disjoint from the generator's
_WINDOWS, _INIT, _SHUFFLE = 10, 11, 12


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    channels: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based unit epoch ``epoch``."""
        return self.lr * self.lr_decay ** (epoch - 1)


@dataclass
class RoundResult:
    label: str
    actions: tuple[int, ...]
    initial: LiftNetParams
    params: LiftNetParams
    curve: ErrorCurve  # mean validation MPJPE over the round's actions
    vcurve: ErrorCurve  # same for V-MPJPE
    action_mpjpe: dict[int, list[float]]  # per action, one value per unit epoch
    action_vmpjpe: dict[int, list[float]]
    epoch_seconds: list[float]  # cumulative optimisation time after each unit epoch

    @property
    def seconds(self) -> float:
        return self.epoch_seconds[-1]


@dataclass
class RunRecord:
    manifest: str
    rounds: list[RoundResult]
    receptive_field: int
    config: TrainConfig
    spec: LiftNetSpec = field(repr=False, default=None)

    @property
    def seconds(self) -> float:
        return math.fsum(r.seconds for r in self.rounds)

    def final_errors(self, action: int) -> tuple[float, float]:
        """Final (MPJPE, V-MPJPE) of whichever round's model covers ``action``."""
        for r in self.rounds:
            if action in r.action_mpjpe:
                return r.action_mpjpe[action][-1], r.action_vmpjpe[action][-1]
        raise KeyError(f"no round trained a model for {action_name(action)}")


def available_windows(dataset: Dataset, frames: int) -> dict[int, int]:
    counts = {a: 0 for a in range(dataset.n_ac)}
    for clip in dataset.clips:
        counts[clip.action] += max(0, clip.frames - frames + 1)
    return counts


def sample_windows(clips: Sequence[PoseClip], frames: int, budget: int, seed: int, key: tuple[int, ...] = ()) -> np.ndarray:
    """``(budget, 2)`` array of ``(clip index, start frame)`` pairs.

    All valid windows are enumerated clip by clip, shuffled with the seeded
    stream, and the first ``budget`` kept.
    """
    short = [i for i, c in enumerate(clips) if c.frames < frames]
    if short:
        raise ValueError(f"clips {short} are shorter than the receptive field {frames}")
    candidates = np.array(
        [(i, s) for i, c in enumerate(clips) for s in range(c.frames - frames + 1)], dtype=np.int64
    ).reshape(-1, 2)
    if len(candidates) == 0:
        raise ValueError("no valid windows")
    if budget > len(candidates):
        raise BudgetError(f"budget of {budget} windows exceeds the {len(candidates)} available")
    order = stream(seed, _WINDOWS, *key).permutation(len(candidates))
    return candidates[order[:budget]]


def input_normalization(train: Dataset) -> tuple[tuple[float, float], float]:
    coords = np.concatenate([c.joints2d.reshape(-1, 2) for c in train.clips])
    center = coords.mean(axis=0)
    scale = float(np.sqrt(((coords - center) ** 2).mean()))
    return (float(center[0]), float(center[1])), scale if scale > 0 else 1.0


def _round_key(r: Round) -> tuple[int, ...]:
    return (1,) if r.pooled else (0, r.actions[0])


def _model_seed(seed: int, key: tuple[int, ...]) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(_INIT, *key)).generate_state(1, np.uint64)[0])


def _evaluate(params: LiftNetParams, clips: Sequence[PoseClip]) -> tuple[float, float]:
    """MPJPE over all predicted frames and frame-weighted V-MPJPE of ``clips``."""
    f = params.spec.receptive_field
    pad = (f - 1) // 2
    dist_sum, dist_n, vel_sum, vel_n = [], 0, [], 0
    for clip in clips:
        pred = predict_sequence(params, Tensor(clip_to_rows(clip.joints2d))).data
        gt = clip.joints3d[pad : pad + pred.shape[0]]
        gt = gt - gt[:, :1]
        d = np.linalg.norm(pred - gt, axis=-1)
        dist_sum.append(math.fsum(d.reshape(-1).tolist()))
        dist_n += d.size
        if pred.shape[0] > 1:
            v = np.linalg.norm(np.diff(pred, axis=0) - np.diff(gt, axis=0), axis=-1)
            vel_sum.append(math.fsum(v.reshape(-1).tolist()))
            vel_n += v.size
    mp = math.fsum(dist_sum) / dist_n
    vm = math.fsum(vel_sum) / vel_n if vel_n else math.nan
    return mp, vm


def train_round(
    rnd: Round,
    train: Dataset,
    test: Dataset,
    spec: LiftNetSpec,
    config: TrainConfig,
) -> RoundResult:
    """Train one model on ``rnd``'s windows for ``rnd.unit_epochs`` unit epochs.

    ``spec`` supplies the architecture; its seed is replaced by the round's.
    """
    key = _round_key(rnd)
    f = spec.receptive_field
    spec = replace(spec, seed=_model_seed(config.seed, key))
    params = build(spec)
    initial = params.copy()

    clip_rows = [clip_to_rows(c.joints2d) for c in train.clips]
    picks = []
    for a in rnd.actions:
        members = [i for i, c in enumerate(train.clips) if c.action == a]
        if rnd.frames[a] == 0:
            continue
        local = sample_windows([train.clips[i] for i in members], f, rnd.frames[a], config.seed, key + (a,))
        local[:, 0] = np.asarray(members)[local[:, 0]]
        picks.append(local)
    windows = np.concatenate(picks)
    n_windows = len(windows)
    pad = (f - 1) // 2

    test_clips = {a: test.clips_of(a) for a in rnd.actions}
    for a, clips in test_clips.items():
        if not clips:
            raise BudgetError(f"no held-out clips for {action_name(a)}")

    tensors = params.tensors()
    state = AdamState.fresh(tensors)
    shuffles: dict[int, np.ndarray] = {}
    action_mp = {a: [] for a in rnd.actions}
    action_vm = {a: [] for a in rnd.actions}
    curve, vcurve, epoch_seconds = [], [], []
    elapsed = 0.0

    for epoch in range(1, rnd.unit_epochs + 1):
        hyper = AdamConfig(config.lr_at(epoch), config.beta1, config.beta2, config.adam_eps)
        lo, hi = (epoch - 1) * rnd.unit_windows, epoch * rnd.unit_windows
        positions = np.arange(lo, hi)
        passes = positions // n_windows
        for p in np.unique(passes):
            if p not in shuffles:
                shuffles[p] = stream(config.seed, _SHUFFLE, *key, int(p)).permutation(n_windows)
        order = np.array([shuffles[p][i % n_windows] for p, i in zip(passes, positions)], dtype=np.int64)

        start = time.perf_counter()
        for batch_no, b0 in enumerate(range(0, len(order), config.batch_size)):
            sel = windows[order[b0 : b0 + config.batch_size]]
            x = np.stack([clip_rows[ci][:, s : s + f] for ci, s in sel])
            gt = np.stack([train.clips[ci].joints3d[s + pad] for ci, s in sel])
            with GradTape() as tape:
                loss = loss_mpjpe(forward_batch(params, x), gt)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(
                    f"round {rnd.label}: non-finite loss at unit epoch {epoch}, batch {batch_no + 1}"
                )
            grads = tape.gradient(loss, tensors)
            adam_step(tensors, grads, state, hyper)
        elapsed += time.perf_counter() - start
        epoch_seconds.append(elapsed)

        for a in rnd.actions:
            mp, vm = _evaluate(params, test_clips[a])
            action_mp[a].append(mp)
            action_vm[a].append(vm)
        curve.append(math.fsum(action_mp[a][-1] for a in rnd.actions) / len(rnd.actions))
        vcurve.append(math.fsum(action_vm[a][-1] for a in rnd.actions) / len(rnd.actions))
        if not all(math.isfinite(v) for v in (curve[-1], vcurve[-1])):
            raise TrainingDivergedError(f"round {rnd.label}: non-finite validation error after unit epoch {epoch}")

    epochs = tuple(range(1, rnd.unit_epochs + 1))
    return RoundResult(
        label=rnd.label,
        actions=rnd.actions,
        initial=initial,
        params=params,
        curve=ErrorCurve(epochs, tuple(curve)),
        vcurve=ErrorCurve(epochs, tuple(vcurve)),
        action_mpjpe=action_mp,
        action_vmpjpe=action_vm,
        epoch_seconds=epoch_seconds,
    )


def run_plan(
    plan: TrainPlan,
    train: Dataset,
    test: Dataset,
    frames: int,
    config: TrainConfig = TrainConfig(),
    workers: int = 1,
) -> RunRecord:
    """Execute every round of ``plan``; results are kept in plan order."""
    if not plan.rounds:
        raise BudgetError("plan has no rounds")
    check_plan(plan, available_windows(train, frames))
    center, scale = input_normalization(train)
    spec = LiftNetSpec(
        joints=train.joints,
        blocks=blocks_for_receptive_field(frames),
        channels=config.channels,
        input_center=center,
        input_scale=scale,
    )
    if workers > 1 and len(plan.rounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(train_round, r, train, test, spec, config) for r in plan.rounds]
            results = [fut.result() for fut in futures]
    else:
        results = [train_round(r, train, test, spec, config) for r in plan.rounds]
    return RunRecord(plan.manifest(), results, frames, config, spec)


def write_curves_csv(records: dict[str, RunRecord], path: str | Path) -> None:
    """One row per (model, round, unit epoch)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "round", "epoch", "mpjpe_mm", "vmpjpe_mm", "train_seconds"])
        for model, record in records.items():
            for r in record.rounds:
                for i, epoch in enumerate(r.curve.epochs):
                    w.writerow([model, r.label, epoch, f"{r.curve.errors[i]:.6f}",
                                f"{r.vcurve.errors[i]:.6f}", f"{r.epoch_seconds[i]:.3f}"])
