"""Whittle indices by bisection on the activation penalty."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentedArm, PenalizedArm, RewardLattice
from .models import ArmModel, Utility

MAX_DOUBLINGS = 60


class NonIndexableError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class WhittleTable:
    """Index ``w(x, s, t)`` stored as ``indices[t][level, x]``.

    Tables built from an additive (stage-wise) objective carry no lattice and
    a single level per time step; the cumulative reward is then ignored.
    """

    arm_id: int
    indices: tuple
    eps: float
    lb: float
    ub: float
    lattice: RewardLattice | None = None

    @property
    def horizon(self) -> int:
        return len(self.indices)

    def index(self, t: int, level: int, x: int) -> float:
        tab = self.indices[t]
        j = 0 if self.lattice is None else level
        return float(tab[j, x])

    def rows(self):
        """Yield ``(arm_id, t, x, s_level, index)`` in a fixed order."""
        for t, tab in enumerate(self.indices):
            for x in range(tab.shape[1]):
                for j in range(tab.shape[0]):
                    s = float(self.lattice.values[t][j]) if self.lattice is not None else 0.0
                    yield self.arm_id, t, x, s, float(tab[j, x])


class _PolicyCache:
    def __init__(self, problem: PenalizedArm):
        self.problem = problem
        self.store: dict[float, np.ndarray] = {}
        self.solves = 0

    def __call__(self, lam: float) -> np.ndarray:
        lam = float(lam)
        pol = self.store.get(lam)
        if pol is None:
            pol = self.problem.policy_vector(lam)
            self.store[lam] = pol
            self.solves += 1
        return pol


def critical_penalty(policy_at, lam_l: float, ub: float, eps: float, pol_l=None):
    """Smallest penalty above ``lam_l`` (to resolution ``eps``) where the policy changes.

    ``policy_at`` maps a penalty to a flat action vector. Returns
    ``(lam_c, policy at lam_c)``; ``ub`` is returned unchanged when the
    policies at both anchors already agree.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not lam_l < ub:
        raise ValueError(f"need lam_l < ub, got {lam_l} >= {ub}")
    if pol_l is None:
        pol_l = policy_at(lam_l)
    lo, hi = lam_l, ub
    pol_hi = policy_at(hi)
    if np.array_equal(pol_l, pol_hi):
        return hi, pol_hi
    while abs(hi - lo) >= eps:
        mid = 0.5 * (lo + hi)
        if np.array_equal(policy_at(mid), pol_l):
            lo = mid
        else:
            hi = mid
    return hi, policy_at(hi)


def auto_upper_bound(policy_at, eps: float) -> float:
    ub = 1.0 + eps
    for _ in range(MAX_DOUBLINGS):
        if not policy_at(ub).any():
            return ub
        ub *= 2.0
    raise NonIndexableError(f"no all-passive penalty found up to {ub:g}")


def whittle_indices(problem: PenalizedArm, lb: float = 0.0, ub: float | None = None,
                    eps: float = 1e-4, arm_id: int = 0) -> WhittleTable:
    """Sweep the penalty upward, assigning each state the penalty at which it turns passive."""
    policy_at = _PolicyCache(problem)
    if ub is None:
        ub = auto_upper_bound(policy_at, eps)
    elif policy_at(ub).any():
        raise NonIndexableError(f"upper bound {ub:g} does not make every state passive")

    lam_l = lb
    pol_l = policy_at(lam_l)
    w = np.full(pol_l.shape, np.nan)
    # states passive from the start get index lb
    w[pol_l == 0] = lb
    passive = pol_l == 0
    while not passive.all():
        if lam_l >= ub:
            raise NonIndexableError(
                f"arm {arm_id}: reached ub={ub:g} with {int((~passive).sum())} states still active"
            )
        lam_c, pol_c = critical_penalty(policy_at, lam_l, ub, eps, pol_l)
        back = (pol_l == 0) & (pol_c == 1)
        if back.any():
            raise NonIndexableError(
                f"arm {arm_id}: passive set shrinks between lambda={lam_l:.6g} and {lam_c:.6g} "
                f"({int(back.sum())} states become active again)"
            )
        moved = (pol_l == 1) & (pol_c == 0)
        w[moved] = lam_c
        passive |= moved
        lam_l, pol_l = lam_c, pol_c
    return WhittleTable(arm_id, problem.unflatten(w), eps, lb, ub, problem.lattice)


def compute_whittle(arm: ArmModel, utility: Utility, horizon: int, lb: float = 0.0,
                    ub: float | None = None, eps: float = 1e-4, arm_id: int = 0) -> WhittleTable:
    """Risk-aware Whittle indices on the reward-augmented arm."""
    return whittle_indices(AugmentedArm(arm, utility, horizon), lb, ub, eps, arm_id)


@dataclass
class IndexabilityReport:
    arm_id: int
    lambda_grid: list
    monotone: bool
    first_violation: dict | None = field(default=None)

    def to_dict(self) -> dict:
        return {
            "arm_id": self.arm_id,
            "lambda_grid": list(self.lambda_grid),
            "monotone": self.monotone,
            "first_violation": self.first_violation,
        }


def check_passive_monotone(problem: PenalizedArm, lambda_grid, arm_id: int = 0) -> IndexabilityReport:
    grid = [float(v) for v in lambda_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda_grid must be sorted ascending")
    prev = None
    for lam in grid:
        pol = problem.policy_vector(lam)
        if prev is not None:
            shrunk = np.flatnonzero((prev[1] == 0) & (pol == 1))
            if len(shrunk):
                t, j, x = _locate(problem, int(shrunk[0]))
                v = {"lambda_1": prev[0], "lambda_2": lam, "t": t, "level": j, "x": x}
                return IndexabilityReport(arm_id, grid, False, v)
        prev = (lam, pol)
    return IndexabilityReport(arm_id, grid, True, None)


def verify_indexability(arm: ArmModel, utility: Utility, horizon: int, lambda_grid,
                        arm_id: int = 0) -> IndexabilityReport:
    return check_passive_monotone(AugmentedArm(arm, utility, horizon), lambda_grid, arm_id)


def _locate(problem: PenalizedArm, flat: int):
    for t, (L, X) in enumerate(problem.stage_shapes()):
        if flat < L * X:
            return t, flat // X, flat % X
        flat -= L * X
    raise IndexError(flat)
