"""Seeded Monte Carlo rollouts and summary statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import build_lattice
from .models import ATOL, BanditInstance, apply_utility
from .policy import SystemState


class BudgetViolation(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: tuple  # SystemState per step
    actions: np.ndarray  # (T, N) 0/1
    rewards: np.ndarray  # (T, N)
    next_xs: np.ndarray  # (T, N) state after each step
    totals: np.ndarray  # J per arm
    utilities: np.ndarray  # U(J) per arm

    @property
    def objective(self) -> float:
        return math.fsum(self.utilities)

    def transitions(self):
        """Observed ``(arm, x, a, x')`` tuples in time order."""
        out = []
        for t, st in enumerate(self.states):
            for i, x in enumerate(st.xs):
                out.append((i, x, int(self.actions[t, i]), int(self.next_xs[t, i])))
        return out


def path_rng(seed: int, path: int) -> np.random.Generator:
    """Counter-based stream for one path; independent of evaluation order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path])))


def rollout(instance: BanditInstance, policy, rng: np.random.Generator, lattices=None) -> Trajectory:
    """Simulate one horizon. Transition uniforms are drawn up front so that
    different policies driven by the same stream share randomness."""
    T, N, M = instance.horizon, instance.n_arms, instance.budget
    arms = instance.arms
    if lattices is None:
        lattices = [build_lattice(a, T) for a in arms]
    u = rng.random((T, N))
    cdfs = [np.cumsum(a.transitions, axis=2) for a in arms]
    xs = [a.initial_state for a in arms]
    levels = [0] * N
    J = [0.0] * N
    states = []
    acts = np.zeros((T, N), dtype=np.int8)
    rews = np.zeros((T, N))
    nxt = np.zeros((T, N), dtype=np.int64)
    for t in range(T):
        st = SystemState(t, tuple(xs), tuple(levels))
        states.append(st)
        dec = policy.decide(st, rng)
        if len(dec.active_set) > M:
            raise BudgetViolation(f"t={t}: {len(dec.active_set)} arms active, budget {M}")
        for i in dec.active_set:
            acts[t, i] = 1
        for i, arm in enumerate(arms):
            x, a = xs[i], acts[t, i]
            r = float(arm.rewards[x] if arm.rewards.ndim == 1 else arm.rewards[x, a])
            rews[t, i] = r
            J[i] += r
            levels[i] = int(lattices[i].next_index[t][levels[i], x])
            row = cdfs[i][a, x]
            y = min(int(np.searchsorted(row, u[t, i], side="right")), arm.n_states - 1)
            nxt[t, i] = y
            xs[i] = y
    J = np.array(J)
    U = np.array([float(apply_utility(ut, j)) for ut, j in zip(instance.utilities, J)])
    return Trajectory(tuple(states), acts, rews, nxt, J, U)


@dataclass
class EvalSummary:
    n_paths: int
    mean_objective: float
    se_objective: float
    mean_total_reward: float
    positive_mass: list
    seed: int
    policy: str = ""
    totals: np.ndarray = field(default=None, repr=False)  # (n_paths, N)
    objectives: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "mean_objective": self.mean_objective,
            "se_objective": self.se_objective,
            "mean_total_reward": self.mean_total_reward,
            "positive_mass": list(self.positive_mass),
        }


def _mean(v) -> float:
    return math.fsum(v) / len(v)


def summarize(objectives, totals, taus, seed: int, policy: str = "") -> EvalSummary:
    objectives = np.asarray(objectives, dtype=float)
    totals = np.asarray(totals, dtype=float)
    n = len(objectives)
    mean = _mean(objectives)
    if n > 1:
        var = math.fsum((objectives - mean) ** 2) / (n - 1)
        se = math.sqrt(var) / math.sqrt(n)
    else:
        se = 0.0
    mean_J = _mean(totals.sum(axis=1))
    pos = [float(np.mean(totals[:, i] >= tau - ATOL)) for i, tau in enumerate(taus)]
    return EvalSummary(n, mean, se, mean_J, pos, seed, policy, totals, objectives)


def evaluate(instance: BanditInstance, policy, n_paths: int, seed: int) -> EvalSummary:
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    lattices = [build_lattice(a, instance.horizon) for a in instance.arms]
    objs = np.empty(n_paths)
    totals = np.empty((n_paths, instance.n_arms))
    for k in range(n_paths):
        tr = rollout(instance, policy, path_rng(seed, k), lattices)
        objs[k] = tr.objective
        totals[k] = tr.totals
    taus = [u.tau for u in instance.utilities]
    return summarize(objs, totals, taus, seed, getattr(policy, "name", ""))


def relative_improvement(base: EvalSummary, test: EvalSummary) -> float:
    """Percent change of the mean objective relative to ``base``."""
    if base.mean_objective == 0:
        raise ZeroDivisionError("baseline objective is zero; relative improvement undefined")
    return 100.0 * (test.mean_objective - base.mean_objective) / abs(base.mean_objective)


def histogram(totals, bins: int = 20, lo: float = 0.0, hi: float = 1.0):
    """``(bin_left, bin_right, count)`` rows for total rewards of one arm."""
    counts, edges = np.histogram(np.asarray(totals, dtype=float), bins=bins, range=(lo, hi))
    return [(float(edges[k]), float(edges[k + 1]), int(counts[k])) for k in range(bins)]
