"""System-level activation rules built on per-arm index tables."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .augment import StagewiseArm, build_lattice
from .models import BanditInstance, apply_utility, linear_utility
from .whittle import WhittleTable, compute_whittle, whittle_indices

DEFAULT_ORACLE_BUDGET = 5_000_000


class IntegrityError(KeyError):
    pass


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class SystemState:
    """Time step plus, per arm, the state and the lattice level of its cumulative reward."""

    t: int
    xs: tuple
    levels: tuple


@dataclass(frozen=True)
class ActivationDecision:
    active_set: frozenset
    scores: tuple

    def actions(self, n_arms: int) -> np.ndarray:
        a = np.zeros(n_arms, dtype=np.int8)
        a[list(self.active_set)] = 1
        return a


# ---------------------------------------------------------------------------
# index tables


def rawip_tables(instance: BanditInstance, eps: float = 1e-4) -> list[WhittleTable]:
    return [
        compute_whittle(arm, u, instance.horizon, eps=eps, arm_id=i)
        for i, (arm, u) in enumerate(zip(instance.arms, instance.utilities))
    ]


def neutral_tables(instance: BanditInstance, eps: float = 1e-4) -> list[WhittleTable]:
    """Risk-neutral indices: the augmented arm with U(J) = J."""
    return [
        compute_whittle(arm, linear_utility, instance.horizon, eps=eps, arm_id=i)
        for i, arm in enumerate(instance.arms)
    ]


def ssup_stage_rewards(arm, utility, horizon: int) -> np.ndarray:
    """Per-step reward (1/T) U(T r(x)) of the stage-wise utility baseline."""
    return apply_utility(utility, horizon * arm.state_rewards()) / horizon


def ssup_tables(instance: BanditInstance, eps: float = 1e-4) -> list[WhittleTable]:
    T = instance.horizon
    return [
        whittle_indices(StagewiseArm(arm, ssup_stage_rewards(arm, u, T), T), eps=eps, arm_id=i)
        for i, (arm, u) in enumerate(zip(instance.arms, instance.utilities))
    ]


# ---------------------------------------------------------------------------
# decisions


def index_decide(tables, state: SystemState, budget: int, allow_idle: bool = False) -> ActivationDecision:
    """Activate the ``budget`` arms with the largest indices; ties go to the lower arm id."""
    if len(tables) != len(state.xs):
        raise IntegrityError(f"{len(tables)} tables for {len(state.xs)} arms")
    scores = []
    for i, tab in enumerate(tables):
        try:
            scores.append(tab.index(state.t, state.levels[i], state.xs[i]))
        except IndexError as e:
            raise IntegrityError(f"arm {i}: no index at t={state.t}, level={state.levels[i]}, "
                                 f"x={state.xs[i]}") from e
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    chosen = order[:min(budget, len(scores))]
    if allow_idle:
        chosen = [i for i in chosen if scores[i] >= 0]
    return ActivationDecision(frozenset(chosen), tuple(scores))


def rawip_decide(tables, state: SystemState, budget: int, allow_idle: bool = False) -> ActivationDecision:
    return index_decide(tables, state, budget, allow_idle)


def neutral_whittle_decide(tables, state: SystemState, budget: int,
                           allow_idle: bool = False) -> ActivationDecision:
    """Same ranking rule; expects tables from :func:`neutral_tables`."""
    return index_decide(tables, state, budget, allow_idle)


def ssup_decide(tables, state: SystemState, budget: int, allow_idle: bool = False) -> ActivationDecision:
    """Same ranking rule; expects tables from :func:`ssup_tables`."""
    return index_decide(tables, state, budget, allow_idle)


class IndexPolicy:
    def __init__(self, tables, budget: int, name: str = "index", allow_idle: bool = False):
        self.tables = list(tables)
        self.budget = budget
        self.name = name
        self.allow_idle = allow_idle

    def decide(self, state: SystemState, rng=None) -> ActivationDecision:
        return index_decide(self.tables, state, self.budget, self.allow_idle)


class RandomPolicy:
    name = "random"

    def __init__(self, n_arms: int, budget: int):
        self.n_arms = n_arms
        self.budget = budget

    def decide(self, state: SystemState, rng: np.random.Generator) -> ActivationDecision:
        chosen = rng.choice(self.n_arms, size=min(self.budget, self.n_arms), replace=False)
        return ActivationDecision(frozenset(int(i) for i in chosen), (0.0,) * self.n_arms)


# ---------------------------------------------------------------------------
# exact joint dynamic program


def _feasible_actions(n_arms: int, budget: int) -> list[tuple]:
    acts = [a for a in itertools.product((0, 1), repeat=n_arms) if sum(a) <= budget]
    # more activations first, then lexicographic: ties resolve toward activity
    return sorted(acts, key=lambda a: (-sum(a), [-v for v in a]))


def _arm_kernel(arm, lattice, t: int, a: int) -> np.ndarray:
    """Augmented transition matrix from (level, x) at t to (level', x') at t+1."""
    X = arm.n_states
    L0, L1 = lattice.n_levels(t), lattice.n_levels(t + 1)
    K = np.zeros((L0 * X, L1 * X))
    nxt = lattice.next_index[t]
    for j in range(L0):
        for x in range(X):
            k = nxt[j, x]
            K[j * X + x, k * X:(k + 1) * X] = arm.transitions[a, x]
    return K


@dataclass(frozen=True, eq=False)
class OracleSolution:
    value: float
    actions: tuple  # feasible action vectors
    policy: tuple  # policy[t]: joint array of indices into ``actions``
    lattices: tuple
    n_states: tuple

    def joint_index(self, state: SystemState) -> tuple:
        return tuple(j * X + x for j, x, X in zip(state.levels, state.xs, self.n_states))


def oracle_size(instance: BanditInstance) -> int:
    lats = [build_lattice(a, instance.horizon) for a in instance.arms]
    total = 0
    for t in range(instance.horizon):
        total += int(np.prod([lat.n_levels(t) * a.n_states for lat, a in zip(lats, instance.arms)],
                             dtype=float))
    return total


def exact_oracle(instance: BanditInstance, max_entries: int = DEFAULT_ORACLE_BUDGET) -> OracleSolution:
    """Optimal expected total utility under the hard budget, by joint backward induction."""
    size = oracle_size(instance)
    if size > max_entries:
        raise BudgetExceeded(f"joint state space needs {size} entries (budget {max_entries})")
    T, N = instance.horizon, instance.n_arms
    arms = instance.arms
    lats = tuple(build_lattice(a, T) for a in arms)
    actions = _feasible_actions(N, instance.budget)

    # last stage: no decision can change the utility
    term = 0.0
    for i, (arm, lat, u) in enumerate(zip(arms, lats, instance.utilities)):
        s = lat.values[T - 1][:, None] + arm.state_rewards()[None, :]
        ui = apply_utility(u, s).ravel()
        shape = [1] * N
        shape[i] = ui.size
        term = term + ui.reshape(shape)
    V = np.asarray(term, dtype=float)
    policy = [None] * T
    policy[T - 1] = np.zeros(V.shape, dtype=np.int32)

    for t in range(T - 2, -1, -1):
        kernels = [[_arm_kernel(arm, lat, t, a) for a in (0, 1)] for arm, lat in zip(arms, lats)]
        Q = []
        for act in actions:
            C = V
            for i, a in enumerate(act):
                C = np.moveaxis(np.tensordot(kernels[i][a], C, axes=([1], [i])), 0, i)
            Q.append(C)
        Q = np.stack(Q)
        best = np.argmax(Q, axis=0)
        V = np.take_along_axis(Q, best[None], axis=0)[0]
        policy[t] = best.astype(np.int32)

    x0 = tuple(a.initial_state for a in arms)
    value = float(V[x0])
    return OracleSolution(value, tuple(actions), tuple(policy), lats, tuple(a.n_states for a in arms))


class OraclePolicy:
    name = "oracle"

    def __init__(self, solution: OracleSolution):
        self.solution = solution

    def decide(self, state: SystemState, rng=None) -> ActivationDecision:
        sol = self.solution
        k = int(sol.policy[state.t][sol.joint_index(state)])
        act = sol.actions[k]
        return ActivationDecision(frozenset(i for i, a in enumerate(act) if a), (0.0,) * len(act))


def build_policy(kind: str, instance: BanditInstance, eps: float = 1e-4, allow_idle: bool = False):
    """Construct a policy by name: rawip, neutral, ssup, random or oracle."""
    M = instance.budget
    if kind == "rawip":
        return IndexPolicy(rawip_tables(instance, eps), M, "rawip", allow_idle)
    if kind == "neutral":
        return IndexPolicy(neutral_tables(instance, eps), M, "neutral", allow_idle)
    if kind == "ssup":
        return IndexPolicy(ssup_tables(instance, eps), M, "ssup", allow_idle)
    if kind == "random":
        return RandomPolicy(instance.n_arms, M)
    if kind == "oracle":
        return OraclePolicy(exact_oracle(instance))
    raise ValueError(f"unknown policy {kind!r}")


POLICY_KINDS = ("rawip", "neutral", "ssup", "random", "oracle")
