import pytest
from hypothesis import given
from hypothesis import strategies as st

from actpose.budgeting import (
    BudgetError,
    Mode,
    allocate,
    build_plan,
    check_plan,
    epoch_ratio_unbalanced,
    pooled_budget,
    ratio_remainders,
    unit_epochs_for,
)

EAT = 2


@pytest.mark.parametrize("epochs, n_ac, expected", [(1, 15, 15), (80, 15, 1200), (7, 1, 7)])
def test_unit_epochs_for(epochs, n_ac, expected):
    assert unit_epochs_for(epochs, n_ac) == expected


class TestEpochRatio:
    def test_balanced(self):
        assert epoch_ratio_unbalanced({a: 100 for a in range(15)}, 4) == 15

    def test_unbalanced(self):
        assert epoch_ratio_unbalanced({0: 100, 1: 200, 2: 300}, 1) == 3

    def test_floors(self):
        assert epoch_ratio_unbalanced({0: 100, 1: 500}, 1) == 1

    def test_missing_target(self):
        with pytest.raises(KeyError):
            epoch_ratio_unbalanced({0: 100}, 3)

    @given(f=st.integers(1, 10_000), n_ac=st.integers(1, 40))
    def test_balanced_collapses_to_unit_rule(self, f, n_ac):
        totals = {a: f for a in range(n_ac)}
        assert epoch_ratio_unbalanced(totals, n_ac - 1) == unit_epochs_for(1, n_ac)

    def test_remainders(self):
        out = ratio_remainders({0: 100, 1: 500})
        assert out[1][0] == 1 and out[1][1] == pytest.approx(0.2)
        assert out[0] == (6, 0.0)


class TestAllocate:
    def test_action_oriented_400_vs_6000(self):
        b = allocate("action_oriented", 6000, 15, target=EAT)
        assert b.per_action[EAT] == 6000
        assert all(v == 0 for a, v in b.per_action.items() if a != EAT)
        assert set(b.pooled_reference.values()) == {400}
        assert sum(b.pooled_reference.values()) == b.per_action[EAT]

    def test_common_one_each(self):
        b = allocate(Mode.COMMON, 15, 15)
        assert b.per_action == {a: 1 for a in range(15)} and b.dropped == 0

    def test_common_remainder_recorded(self):
        b = allocate("common", 6007, 15)
        assert set(b.per_action.values()) == {400} and b.dropped == 7

    def test_common_too_small(self):
        with pytest.raises(BudgetError):
            allocate("common", 14, 15)

    def test_action_oriented_needs_target(self):
        with pytest.raises(BudgetError):
            allocate("action_oriented", 6000, 15)

    @given(n=st.integers(1, 10**6), n_ac=st.integers(1, 30), t=st.integers(0, 29))
    def test_equal_budget_invariant(self, n, n_ac, t):
        b = allocate("action_oriented", n, n_ac, target=t % n_ac)
        assert sum(b.per_action.values()) == n
        assert sum(b.pooled_reference.values()) == n
        assert max(b.pooled_reference.values()) - min(b.pooled_reference.values()) <= 1

    @given(n=st.integers(1, 10**6), n_ac=st.integers(1, 30))
    def test_common_conservation(self, n, n_ac):
        if n < n_ac:
            return
        b = allocate("common", n, n_ac)
        assert sum(b.per_action.values()) + b.dropped == n
        assert b.dropped < n_ac


class TestPlan:
    def test_per_action_rounds(self):
        plan = build_plan(allocate("common", 6000, 15), 15)
        assert len(plan.rounds) == 15
        assert {r.total_frames for r in plan.rounds} == {400}
        assert [r.actions[0] for r in plan.rounds] == list(range(15))
        assert plan.equivalence.original_epochs == 1.0

    def test_pooled_single_round(self):
        plan = build_plan(allocate("common", 6000, 15), 15, pooled=True)
        (r,) = plan.rounds
        assert r.pooled and r.total_frames == 6000 and r.unit_windows == 400

    def test_action_oriented_target_only(self):
        b = allocate("action_oriented", 6000, 15, target=EAT)
        plan = build_plan(b, 15)
        (r,) = plan.rounds
        assert r.actions == (EAT,) and r.total_frames == 6000
        pooled = build_plan(pooled_budget(b), 15, pooled=True)
        assert pooled.rounds[0].frames == {a: 400 for a in range(15)}

    def test_manifest(self):
        b = allocate("action_oriented", 6000, 15, target=EAT)
        assert "Eat\tframes=6000\tunit_epochs=15" in build_plan(b, 15).manifest()
        text = build_plan(pooled_budget(b), 15, pooled=True).manifest()
        assert text.startswith("# schedule=pooled unit_epochs=15 n_ac=15 t0=1")
        assert "pooled\tframes=6000\tper_action=400\tunit_epochs=15" in text

    def test_check_plan(self):
        plan = build_plan(allocate("common", 6000, 15), 15)
        check_plan(plan, {a: 400 for a in range(15)})
        with pytest.raises(BudgetError, match="Eat"):
            check_plan(plan, {a: (399 if a == EAT else 400) for a in range(15)})

    def test_zero_unit_epochs(self):
        with pytest.raises(BudgetError):
            build_plan(allocate("common", 15, 15), 0)
