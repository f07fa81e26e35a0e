"""Cumulative-reward augmentation and penalized finite-horizon solves.

An arm state ``x`` at time ``t`` is paired with the reward ``s`` collected in
steps ``0..t-1``. Rewards are action free, so ``s`` moves deterministically to
``s + r(x)`` and the risk-aware objective ``E[U(sum r)]`` becomes an ordinary
expected reward paid once, at the last stage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import reduce

import numpy as np

from .models import ArmModel, Utility, apply_utility

TIE_TOL = 1e-12
MAX_DENOMINATOR = 10**6


class NumericError(ArithmeticError):
    pass


def _common_quantum(rewards: np.ndarray, atol: float = 1e-9) -> float | None:
    """Largest q with every reward an integer multiple of q, or None."""
    fracs = []
    for r in rewards:
        f = Fraction(float(r)).limit_denominator(MAX_DENOMINATOR)
        if abs(float(f) - r) > atol:
            return None
        if f != 0:
            fracs.append(abs(f))
    if not fracs:
        return 1.0
    num = reduce(math.gcd, (f.numerator for f in fracs))
    den = reduce(lambda a, b: a * b // math.gcd(a, b), (f.denominator for f in fracs))
    q = num / den
    return q if q >= atol else None


@dataclass(frozen=True, eq=False)
class RewardLattice:
    """Reachable cumulative rewards per time step.

    ``codes[t]`` are sorted integer labels of the levels at time ``t`` (for an
    exact lattice the value is ``code * quantum``); ``values[t]`` holds the
    corresponding floats. ``next_index[t][j, x]`` is the level reached at
    ``t+1`` from level ``j`` in state ``x``.
    """

    quantum: float
    state_codes: np.ndarray
    codes: tuple
    values: tuple
    next_index: tuple
    approximate: bool = False

    @property
    def horizon(self) -> int:
        return len(self.codes) - 1

    def n_levels(self, t: int) -> int:
        return len(self.codes[t])

    def level_of(self, t: int, code: int) -> int:
        j = int(np.searchsorted(self.codes[t], code))
        if j >= len(self.codes[t]) or self.codes[t][j] != code:
            raise KeyError(f"code {code} is not a level at t={t}")
        return j


def build_lattice(arm: ArmModel, horizon: int, grid_levels: int = 200) -> RewardLattice:
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    r = arm.state_rewards()
    q = _common_quantum(r)
    if q is None:
        return _grid_lattice(r, horizon, grid_levels)
    k = np.rint(r / q).astype(np.int64)
    codes = [np.zeros(1, dtype=np.int64)]
    nxt = []
    for _ in range(horizon):
        sums = codes[-1][:, None] + k[None, :]
        new = np.unique(sums)
        nxt.append(np.searchsorted(new, sums))
        codes.append(new)
    values = tuple(c * q for c in codes)
    return RewardLattice(q, k, tuple(codes), values, tuple(nxt), False)


def _grid_lattice(r: np.ndarray, horizon: int, grid_levels: int) -> RewardLattice:
    lo, hi = horizon * r.min(), horizon * r.max()
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    grid = np.linspace(lo, hi, grid_levels)
    step = grid[1] - grid[0] if grid_levels > 1 else 1.0

    def snap(v):
        return np.clip(np.rint((v - lo) / step), 0, grid_levels - 1).astype(np.int64)

    all_codes = np.arange(grid_levels, dtype=np.int64)
    codes = [snap(np.zeros(1))]
    values = [grid[codes[0]]]
    nxt = []
    for t in range(horizon):
        target = snap(values[t][:, None] + r[None, :])
        nxt.append(target)  # grid codes double as positions
        codes.append(all_codes)
        values.append(grid)
    return RewardLattice(step, snap(r), tuple(codes), tuple(values), tuple(nxt), True)


@dataclass(frozen=True, eq=False)
class ArmSolution:
    """Backward-induction output; ``values[t]`` and ``policy[t]`` have shape (levels_t, n_states)."""

    lam: float
    values: tuple
    policy: tuple
    lattice: RewardLattice | None = None

    @property
    def approximate(self) -> bool:
        return self.lattice is not None and self.lattice.approximate

    def policy_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.policy])

    def initial_value(self, x0: int) -> float:
        return float(self.values[0][0, x0])

    def to_dict(self) -> dict:
        values, policy = {}, {}
        for t, (v, p) in enumerate(zip(self.values, self.policy)):
            for j in range(v.shape[0]):
                for x in range(v.shape[1]):
                    key = f"{t}/{x}/{j}"
                    values[key] = float(v[j, x])
                    policy[key] = int(p[j, x])
        return {"lambda": self.lam, "approximate": self.approximate, "values": values, "policy": policy}


class PenalizedArm:
    """Shared backward induction for a two-action arm with per-activation cost lam/T.

    Subclasses supply ``stage_shapes``, the level-to-level map and stage rewards.
    """

    horizon: int
    transitions: np.ndarray

    def stage_shapes(self) -> list[tuple[int, int]]:
        raise NotImplementedError

    def _terminal(self) -> np.ndarray:
        raise NotImplementedError

    def _stage_reward(self, t: int) -> np.ndarray | float:
        return 0.0

    def _next(self, t: int) -> np.ndarray | None:
        return None

    @property
    def lattice(self) -> RewardLattice | None:
        return None

    def solve(self, lam: float) -> ArmSolution:
        T = self.horizon
        P = self.transitions
        cost = lam / T
        values: list = [None] * T
        policy: list = [None] * T
        V_next = None
        for t in range(T - 1, -1, -1):
            base = np.asarray(self._stage_reward(t), dtype=float)
            if t == T - 1:
                q0 = base + self._terminal()
                q1 = q0.copy()
            else:
                idx = self._next(t)
                if idx is None:
                    q0 = base + (P[0] @ V_next[0])[None, :]
                    q1 = base + (P[1] @ V_next[0])[None, :]
                else:
                    W = V_next[idx]  # (levels_t, X, X')
                    q0 = base + np.einsum("jxy,xy->jx", W, P[0])
                    q1 = base + np.einsum("jxy,xy->jx", W, P[1])
            q0 = np.broadcast_to(q0, self.stage_shapes()[t])
            q1 = np.broadcast_to(q1, self.stage_shapes()[t]) - cost
            act = q1 >= q0 - TIE_TOL
            V = np.where(act, q1, q0)
            if not np.all(np.isfinite(V)):
                j, x = np.argwhere(~np.isfinite(V))[0]
                raise NumericError(f"non-finite value at t={t}, x={x}, level={j}")
            values[t] = V
            policy[t] = act.astype(np.int8)
            V_next = V
        return ArmSolution(lam, tuple(values), tuple(policy), self.lattice)

    def policy_vector(self, lam: float) -> np.ndarray:
        return self.solve(lam).policy_vector()

    def unflatten(self, flat: np.ndarray) -> tuple:
        out, pos = [], 0
        for shape in self.stage_shapes():
            n = shape[0] * shape[1]
            out.append(np.asarray(flat[pos:pos + n]).reshape(shape))
            pos += n
        return tuple(out)


class AugmentedArm(PenalizedArm):
    """The arm lifted to (state, cumulative reward), utility paid at the last stage."""

    def __init__(self, arm: ArmModel, utility: Utility, horizon: int, grid_levels: int = 200):
        self.base = arm
        self.utility = utility
        self.horizon = horizon
        self.transitions = arm.transitions
        self.rewards = arm.state_rewards()
        self._lattice = build_lattice(arm, horizon, grid_levels)
        lat = self._lattice
        last = lat.values[horizon - 1][:, None] + self.rewards[None, :]
        self._u_final = apply_utility(utility, last)
        self._shapes = [(lat.n_levels(t), arm.n_states) for t in range(horizon)]

    @property
    def lattice(self) -> RewardLattice:
        return self._lattice

    def stage_shapes(self):
        return self._shapes

    def _terminal(self):
        return self._u_final

    def _next(self, t):
        return self._lattice.next_index[t]


class StagewiseArm(PenalizedArm):
    """Additive objective ``sum_t g(x_t)``; no reward augmentation needed."""

    def __init__(self, arm: ArmModel, stage_rewards, horizon: int):
        self.base = arm
        self.horizon = horizon
        self.transitions = arm.transitions
        self.stage_rewards = np.asarray(stage_rewards, dtype=float)
        self._shapes = [(1, arm.n_states)] * horizon

    def stage_shapes(self):
        return self._shapes

    def _stage_reward(self, t):
        return self.stage_rewards[None, :]

    def _terminal(self):
        return np.zeros((1, self.base.n_states))


def solve_penalized(arm: ArmModel, utility: Utility, horizon: int, lam: float) -> ArmSolution:
    """Optimal policy and values of the augmented arm with activation cost lam/T."""
    return AugmentedArm(arm, utility, horizon).solve(lam)
