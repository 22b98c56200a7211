"""Training budgets and schedules for the pooled and per-action methods.

A *unit epoch* is one pass over a single action's allotted windows. With
``n_ac`` actions, ``n_ac`` unit epochs are worth one pooled epoch, so a
pooled run given ``UE`` unit epochs trains for ``UE / n_ac`` passes over
its (pooled) data. In the action-oriented setting the total number of
frames ``N`` is fixed: the pooled reference spends it across all actions,
the per-action method spends all of it on the target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

from .synthmotion import action_name

log = logging.getLogger(__name__)


class BudgetError(ValueError):
    pass


class Mode(str, Enum):
    COMMON = "common"
    ACTION_ORIENTED = "action_oriented"


def unit_epochs_for(original_epochs: int, n_ac: int) -> int:
    """Unit epochs equivalent to ``original_epochs`` pooled epochs."""
    if original_epochs < 1 or n_ac < 1:
        raise ValueError("original_epochs and n_ac must be >= 1")
    return original_epochs * n_ac


def epoch_ratio_unbalanced(frame_totals: Mapping[int, int], target: int) -> int:
    """``floor(sum_i f(i) / f(target))``: pooled-to-unit epoch ratio when
    actions have different frame counts."""
    if target not in frame_totals:
        raise KeyError(f"target action {target} absent from frame totals")
    if any(v < 1 for v in frame_totals.values()):
        raise ValueError("every frame total must be >= 1")
    return sum(frame_totals.values()) // frame_totals[target]


@dataclass(frozen=True)
class TrainBudget:
    mode: Mode
    total_frames: int
    n_ac: int
    per_action: dict[int, int]
    target: int | None = None
    dropped: int = 0
    # action-oriented only: the pooled method's share per action under the
    # same total, summing exactly to total_frames
    pooled_reference: dict[int, int] | None = None


def allocate(mode: Mode | str, total_frames: int, n_ac: int, target: int | None = None) -> TrainBudget:
    mode = Mode(mode)
    if n_ac < 1 or total_frames < 1:
        raise BudgetError("total_frames and n_ac must be >= 1")
    if mode is Mode.COMMON:
        if total_frames < n_ac:
            raise BudgetError(f"common mode needs N >= n_ac ({total_frames} < {n_ac})")
        share, dropped = divmod(total_frames, n_ac)
        if dropped:
            log.info("common budget: %d of %d frames dropped to keep actions balanced", dropped, total_frames)
        return TrainBudget(mode, total_frames, n_ac, {a: share for a in range(n_ac)}, dropped=dropped)

    if target is None or not 0 <= target < n_ac:
        raise BudgetError(f"action-oriented mode needs a target action in 0..{n_ac - 1}")
    share, extra = divmod(total_frames, n_ac)
    reference = {a: share + (1 if a < extra else 0) for a in range(n_ac)}
    per_action = {a: (total_frames if a == target else 0) for a in range(n_ac)}
    budget = TrainBudget(mode, total_frames, n_ac, per_action, target=target, pooled_reference=reference)
    assert sum(reference.values()) == per_action[target] == total_frames
    return budget


def pooled_budget(budget: TrainBudget) -> TrainBudget:
    """The budget the pooled method trains on when compared against ``budget``."""
    if budget.mode is Mode.COMMON:
        return budget
    return TrainBudget(Mode.COMMON, budget.total_frames, budget.n_ac, dict(budget.pooled_reference))


@dataclass(frozen=True)
class Round:
    actions: tuple[int, ...]
    frames: dict[int, int]  # windows drawn per action
    unit_epochs: int
    # windows consumed per unit epoch; the full budget for a single-action
    # round, 1/n_ac of it for the pooled round
    unit_windows: int

    @property
    def pooled(self) -> bool:
        return len(self.actions) > 1

    @property
    def total_frames(self) -> int:
        return sum(self.frames.values())

    @property
    def label(self) -> str:
        return "pooled" if self.pooled else action_name(self.actions[0])


@dataclass(frozen=True)
class Equivalence:
    unit_epochs: int
    n_ac: int

    @property
    def original_epochs(self) -> float:
        """t0 in pooled epochs for ``unit_epochs`` unit epochs."""
        return self.unit_epochs / self.n_ac


@dataclass(frozen=True)
class TrainPlan:
    rounds: tuple[Round, ...]
    equivalence: Equivalence
    pooled: bool

    def manifest(self) -> str:
        kind = "pooled" if self.pooled else "per-action"
        lines = [
            f"# schedule={kind} unit_epochs={self.equivalence.unit_epochs} "
            f"n_ac={self.equivalence.n_ac} t0={self.equivalence.original_epochs:g}"
        ]
        for r in self.rounds:
            share = ""
            if r.pooled:
                lo, hi = min(r.frames.values()), max(r.frames.values())
                share = f"\tper_action={lo}" if lo == hi else f"\tper_action={lo}..{hi}"
            lines.append(f"{r.label}\tframes={r.total_frames}{share}\tunit_epochs={r.unit_epochs}")
        return "\n".join(lines)


def build_plan(budget: TrainBudget, unit_epochs: int, pooled: bool = False) -> TrainPlan:
    """One round per funded action in label order, or a single pooled round."""
    if unit_epochs < 1:
        raise BudgetError("unit_epochs must be >= 1")
    funded = {a: n for a, n in sorted(budget.per_action.items()) if n > 0}
    if not funded:
        raise BudgetError("budget funds no action")
    if pooled:
        total = sum(funded.values())
        unit = max(1, total // budget.n_ac)
        rounds = (Round(tuple(funded), funded, unit_epochs, unit),)
    else:
        rounds = tuple(Round((a,), {a: n}, unit_epochs, n) for a, n in funded.items())
    return TrainPlan(rounds, Equivalence(unit_epochs, budget.n_ac), pooled)


def check_plan(plan: TrainPlan, available: Mapping[int, int]) -> None:
    """Raise if any round asks for more windows than an action can supply."""
    for r in plan.rounds:
        for a, n in r.frames.items():
            have = available.get(a, 0)
            if n > have:
                raise BudgetError(
                    f"round {r.label}: budget of {n} frames for {action_name(a)} exceeds the {have} available"
                )


def ratio_remainders(frame_totals: Mapping[int, int]) -> dict[int, tuple[int, float]]:
    """Per action, the floored epoch ratio and the fraction the floor discards."""
    total = sum(frame_totals.values())
    out = {}
    for a, f in sorted(frame_totals.items()):
        ratio = epoch_ratio_unbalanced(frame_totals, a)
        out[a] = (ratio, total / f - ratio)
        if not math.isclose(out[a][1], 0.0, abs_tol=1e-12):
            log.info("epoch ratio for %s floors %.4f to %d", action_name(a), total / f, ratio)
    return out
