import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rawip.augment import build_lattice
from rawip.models import ArmModel, BanditInstance, Family, UtilitySpec, machine_instance, machine_rewards
from rawip.policy import ActivationDecision, RandomPolicy, build_policy
from rawip.sim import (
    BudgetViolation,
    EvalSummary,
    evaluate,
    histogram,
    path_rng,
    relative_improvement,
    rollout,
    summarize,
)


def identity_instance(x0, T=4, n=3, u=UtilitySpec(Family.POWER_SHORTFALL, 0.5, 4)):
    arm = ArmModel(np.stack([np.eye(n)] * 2), machine_rewards(n, T), x0)
    return BanditInstance((arm,), (u,), T, 1)


def test_identity_transitions_are_deterministic():
    inst = identity_instance(1)
    pol = build_policy("rawip", inst)
    for k in range(5):
        tr = rollout(inst, pol, path_rng(k, k))
        assert [s.xs for s in tr.states] == [(1,)] * 4
        assert tr.totals[0] == pytest.approx(4 * 0.5 / 4)


def test_identity_evaluation_has_zero_variance():
    for x0 in range(3):
        inst = identity_instance(x0)
        s = evaluate(inst, build_policy("neutral", inst), 20, 9)
        expected = inst.utilities[0](inst.horizon * inst.arms[0].rewards[x0])
        assert s.mean_objective == pytest.approx(expected, abs=1e-12)
        assert s.se_objective == 0.0


def test_family4_never_moves_up_when_passive():
    inst = machine_instance(5, 6, 2, 5, UtilitySpec(1, 0.5))
    pol = build_policy("rawip", inst)
    for k in range(40):
        tr = rollout(inst, pol, path_rng(2, k))
        for t, st_ in enumerate(tr.states):
            for i, x in enumerate(st_.xs):
                if tr.actions[t, i] == 0:
                    assert tr.next_xs[t, i] <= x
        assert np.all((tr.totals >= -1e-12) & (tr.totals <= 1 + 1e-12))
        assert tr.actions.sum(axis=1).max() <= 2


def test_totals_equal_reward_sums_and_lattice_closure():
    inst = machine_instance(3, 4, 1, 4, UtilitySpec(3, 0.5, 8))
    lats = [build_lattice(a, 4) for a in inst.arms]
    pol = build_policy("random", inst)
    for k in range(30):
        tr = rollout(inst, pol, path_rng(5, k), lats)
        assert np.allclose(tr.totals, tr.rewards.sum(axis=0), atol=1e-12)
        for i in range(4):
            s = 0.0
            for t, st_ in enumerate(tr.states):
                assert st_.levels[i] < lats[i].n_levels(t)
                assert lats[i].values[t][st_.levels[i]] == pytest.approx(s, abs=1e-12)
                s += tr.rewards[t, i]


def test_transitions_record_matches_states():
    inst = machine_instance(3, 2, 1, 3, UtilitySpec(1, 0.5))
    tr = rollout(inst, build_policy("rawip", inst), path_rng(0, 0))
    obs = tr.transitions()
    assert len(obs) == 2 * 3
    for (i, x, a, y), k in zip(obs, range(len(obs))):
        t = k // 2
        assert tr.states[t].xs[i] == x
        if t + 1 < 3:
            assert tr.states[t + 1].xs[i] == y


class Greedy:
    name = "greedy"

    def decide(self, state, rng=None):
        return ActivationDecision(frozenset(range(len(state.xs))), ())


def test_budget_violation_detected():
    inst = machine_instance(3, 3, 1, 3, UtilitySpec(1, 0.5))
    with pytest.raises(BudgetViolation):
        rollout(inst, Greedy(), path_rng(0, 0))


def test_same_seed_bit_identical():
    inst = machine_instance(4, 5, 2, 4, UtilitySpec(2, 0.5, 8))
    pol = build_policy("rawip", inst)
    a, b = evaluate(inst, pol, 30, 17), evaluate(inst, pol, 30, 17)
    assert a.to_dict() == b.to_dict()
    assert np.array_equal(a.totals, b.totals)
    c = evaluate(inst, pol, 30, 18)
    assert not np.array_equal(a.totals, c.totals)


def test_policies_share_transition_randomness():
    # with identical decisions two policies see identical paths
    inst = machine_instance(3, 2, 2, 3, UtilitySpec(1, 0.5))
    a = evaluate(inst, build_policy("rawip", inst), 20, 4)
    b = evaluate(inst, build_policy("neutral", inst), 20, 4)
    assert np.array_equal(a.totals, b.totals)


def test_oracle_policy_value_within_mc_error():
    inst = machine_instance(2, 2, 1, 3, UtilitySpec(1, 0.5))
    pol = build_policy("oracle", inst)
    s = evaluate(inst, pol, 3000, 1)
    assert abs(s.mean_objective - pol.solution.value) <= 3 * s.se_objective


def test_positive_mass_definition():
    s = summarize([1.0, 0.0, 1.0], [[0.5, 0.1], [0.49, 0.9], [0.7, 0.4]], [0.5, 0.4], 0)
    assert s.positive_mass == [2 / 3, 2 / 3]
    assert s.mean_total_reward == pytest.approx((0.6 + 1.39 + 1.1) / 3)


def test_standard_error_formula():
    objs = [0.0, 1.0, 1.0, 0.0, 1.0]
    s = summarize(objs, np.zeros((5, 1)), [0.5], 0)
    assert s.se_objective == pytest.approx(np.std(objs, ddof=1) / math.sqrt(5), abs=1e-15)


def test_summary_order_invariant():
    rng = np.random.default_rng(0)
    objs = rng.random(1000) * 1e6 + rng.random(1000)
    a = summarize(objs, np.zeros((1000, 1)), [0.5], 0)
    b = summarize(objs[::-1], np.zeros((1000, 1)), [0.5], 0)
    assert abs(a.mean_objective - b.mean_objective) <= 1e-12 * max(1.0, abs(a.mean_objective))


def test_standard_error_shrinks_with_paths():
    inst = machine_instance(3, 3, 1, 4, UtilitySpec(1, 0.5))
    pol = RandomPolicy(3, 1)
    ratios = []
    for rep in range(8):
        s1 = evaluate(inst, pol, 400, 100 + rep)
        s2 = evaluate(inst, pol, 800, 200 + rep)
        ratios.append(s2.se_objective / s1.se_objective)
    assert 0.6 <= float(np.mean(ratios)) <= 0.85


def _summary(v):
    return EvalSummary(1, v, 0.0, 0.0, [], 0)


def test_relative_improvement():
    assert relative_improvement(_summary(0.5), _summary(0.6)) == pytest.approx(20.0)
    assert relative_improvement(_summary(0.5), _summary(0.5)) == 0.0
    assert relative_improvement(_summary(-0.5), _summary(-0.4)) == pytest.approx(20.0)
    with pytest.raises(ZeroDivisionError):
        relative_improvement(_summary(0.0), _summary(0.1))


def test_evaluate_needs_paths():
    inst = identity_instance(0)
    with pytest.raises(ValueError):
        evaluate(inst, build_policy("rawip", inst), 0, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.integers(1, 30))
def test_histogram_counts(values, bins):
    rows = histogram(values, bins)
    assert len(rows) == bins
    assert sum(c for _, _, c in rows) == len(values)
    assert rows[0][0] == 0.0 and rows[-1][1] == 1.0
