"""Arm MDPs, utility families, model generators and structural checks."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Union

import numpy as np

ATOL = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ArmModel:
    """One arm: two transition matrices, state rewards and an initial state.

    ``transitions[a, x, y]`` is the probability of moving from ``x`` to ``y``
    under action ``a``. ``rewards`` is either one value per state or an
    ``(n_states, 2)`` table of state-action rewards; the latter is only
    accepted so that :func:`check_assumption1` can flag it.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    initial_state: int = 0

    def __post_init__(self):
        P = _frozen(self.transitions)
        r = _frozen(self.rewards)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "initial_state", int(self.initial_state))
        if P.ndim != 3 or P.shape[0] != 2 or P.shape[1] != P.shape[2]:
            raise ValueError(f"transitions must have shape (2, n, n), got {P.shape}")
        n = P.shape[1]
        if n < 1:
            raise ValueError("an arm needs at least one state")
        if np.any(P < 0) or not np.all(np.isfinite(P)):
            raise ValueError("transition probabilities must be finite and nonnegative")
        if np.any(np.abs(P.sum(axis=2) - 1.0) > ATOL):
            raise ValueError("every transition row must sum to 1")
        if r.shape not in ((n,), (n, 2)):
            raise ValueError(f"rewards must have shape ({n},) or ({n}, 2), got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if not 0 <= self.initial_state < n:
            raise ValueError(f"initial_state {self.initial_state} outside [0, {n})")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def action_free(self) -> bool:
        return self.rewards.ndim == 1 or bool(
            np.all(np.abs(self.rewards[:, 0] - self.rewards[:, 1]) <= ATOL)
        )

    def state_rewards(self) -> np.ndarray:
        """Per-state reward vector; raises if rewards depend on the action."""
        if self.rewards.ndim == 1:
            return self.rewards
        if not self.action_free:
            raise ValueError("rewards depend on the action; only action-free rewards are supported")
        return self.rewards[:, 0]

    def reward_table(self) -> np.ndarray:
        """Rewards as an ``(n_states, 2)`` array."""
        if self.rewards.ndim == 2:
            return self.rewards
        return np.repeat(self.rewards[:, None], 2, axis=1)

    def with_transitions(self, transitions) -> "ArmModel":
        return ArmModel(transitions, self.rewards, self.initial_state)

    def to_dict(self) -> dict:
        return {
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "initial_state": self.initial_state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArmModel":
        return cls(d["transitions"], d["rewards"], d.get("initial_state", 0))


class Family(enum.IntEnum):
    INDICATOR = 1
    POWER_SHORTFALL = 2
    SIGMOID = 3


@dataclass(frozen=True)
class UtilitySpec:
    family: Family
    tau: float
    order: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.order > 0:
            raise ValueError(f"order must be positive, got {self.order}")

    def __call__(self, total_reward):
        return eval_utility(self, total_reward)

    @property
    def label(self) -> str:
        if self.family == Family.INDICATOR:
            return "alpha=1"
        return f"(alpha,o)=({int(self.family)},{self.order:g})"

    def to_dict(self) -> dict:
        return {"alpha": int(self.family), "tau": self.tau, "order": self.order}

    @classmethod
    def from_dict(cls, d: dict) -> "UtilitySpec":
        return cls(Family(d["alpha"]), d["tau"], d.get("order", 1.0))


Utility = Union[UtilitySpec, Callable[[np.ndarray], np.ndarray]]


def linear_utility(total_reward):
    """U(J) = J; turns the augmented arm into the risk-neutral one."""
    return np.asarray(total_reward, dtype=float)


def eval_utility(spec: UtilitySpec, total_reward):
    """Evaluate a utility at one or many total rewards.

    The indicator family counts ``J >= tau`` (up to ``ATOL``) as success; the
    shortfall family likewise ignores shortfalls below ``ATOL``.
    """
    J = np.asarray(total_reward, dtype=float)
    tau, o = spec.tau, spec.order
    if spec.family == Family.INDICATOR:
        out = (J >= tau - ATOL).astype(float)
    elif spec.family == Family.POWER_SHORTFALL:
        # shortfalls within ATOL count as zero: the 1/o power would blow
        # round-off of 1e-16 up to ~1e-2 at o=8
        d = tau - J
        d = np.where(d > ATOL, d, 0.0)
        # tau^(-1/o) * d^(1/o) written as (d/tau)^(1/o), exact at J = 0
        out = 1.0 - (d / tau) ** (1.0 / o)
    else:
        out = (1.0 + np.exp(-o * (1.0 - tau))) / (1.0 + np.exp(-o * (J - tau)))
    return out if out.ndim else float(out)


def apply_utility(utility: Utility, total_reward) -> np.ndarray:
    if isinstance(utility, UtilitySpec):
        return np.asarray(eval_utility(utility, total_reward), dtype=float)
    return np.asarray(utility(np.asarray(total_reward, dtype=float)), dtype=float)


@dataclass(frozen=True, eq=False)
class BanditInstance:
    arms: tuple
    utilities: tuple
    horizon: int
    budget: int

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "utilities", tuple(self.utilities))
        if len(self.utilities) != len(self.arms):
            raise ValueError("need exactly one utility per arm")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not 0 < self.budget <= len(self.arms):
            raise ValueError(f"budget must satisfy 0 < M <= N, got M={self.budget}, N={len(self.arms)}")

    @property
    def n_arms(self) -> int:
        return len(self.arms)

    def with_arms(self, arms) -> "BanditInstance":
        return BanditInstance(tuple(arms), self.utilities, self.horizon, self.budget)

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "budget": self.budget,
            "arms": [a.to_dict() for a in self.arms],
            "utilities": [u.to_dict() for u in self.utilities],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BanditInstance":
        return cls(
            tuple(ArmModel.from_dict(a) for a in d["arms"]),
            tuple(UtilitySpec.from_dict(u) for u in d["utilities"]),
            d["horizon"],
            d["budget"],
        )


# ---------------------------------------------------------------------------
# generators


def machine_rewards(n_states: int, horizon: int) -> np.ndarray:
    """Linear state rewards from 0 (worst) to 1/T (best)."""
    if n_states == 1:
        return np.zeros(1)
    return np.arange(n_states) / ((n_states - 1) * horizon)


def _check_prob(name, v):
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name}={v} is not a probability")


def machine_transitions(n: int, p: float, family: int, p2: float | None = None) -> np.ndarray:
    """Transition pair ``(P0, P1)`` for one of the four structured templates.

    States are ordered worst (0) to best (n-1).
    """
    P0 = np.zeros((n, n))
    P1 = np.zeros((n, n))
    P0[0, 0] = 1.0
    if family == 1:
        _check_prob("p", p)
        for x in range(1, n):
            P0[x, 0] += 1 - p
            P0[x, x] += p
        P1[:] = np.eye(n)
    elif family == 2:
        if p2 is None:
            raise ValueError("family 2 needs p2 with p > p2")
        _check_prob("p", p)
        _check_prob("p2", p2)
        if not p > p2:
            raise ValueError(f"family 2 requires p > p2, got p={p}, p2={p2}")
        P1[0, 0] = 1.0
        for x in range(1, n):
            P0[x, 0] += 1 - p2
            P0[x, x] += p2
            P1[x, 0] += 1 - p
            P1[x, x] += p
    elif family == 3:
        if not 0.0 <= p <= 0.5:
            raise ValueError(f"family 3 requires p in [0, 0.5], got {p}")
        P1[0, 0] = 1.0
        for x in range(1, n):
            P0[x, x - 1] = 1 - p
            P0[x, x] = p
            if x < n - 1:
                P1[x, x - 1] = p
                P1[x, x] = 1 - p
            else:
                P1[x, x - 1] = 1 - p
                P1[x, x] = p
    elif family == 4:
        hi = 1.0 / (n - 1) if n > 1 else 1.0
        if not 0.0 <= p <= hi + ATOL:
            raise ValueError(f"family 4 requires p in [0, 1/(n-1)] = [0, {hi:g}], got {p}")
        for x in range(1, n):
            P0[x, 0] = 1 - (n - 1) * p
            P0[x, 1:x] = p
            P0[x, x] = (n - x) * p
        for x in range(n - 1):
            P1[x, x] = (n - 1 - x) * p
            P1[x, n - 1] = 1 - (n - 1 - x) * p
        P1[n - 1, n - 1] = 1.0
    else:
        raise ValueError(f"unknown model family {family}; expected 1, 2, 3 or 4")
    # clip round-off like 1 - 5*0.2 = -5.55e-17
    P = np.stack([P0, P1])
    P[np.abs(P) < 1e-15] = 0.0
    return P


def make_machine_arm(
    n_states: int,
    p: float,
    family: int = 4,
    horizon: int = 1,
    p2: float | None = None,
    initial_state: int | None = None,
) -> ArmModel:
    if n_states < 1:
        raise ValueError("n_states must be positive")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    P = machine_transitions(n_states, p, family, p2)
    x0 = n_states - 1 if initial_state is None else initial_state
    return ArmModel(P, machine_rewards(n_states, horizon), x0)


def machine_instance(
    n_states: int,
    n_arms: int,
    budget: int,
    horizon: int,
    utility: UtilitySpec,
    p_range: tuple[float, float] | None = None,
    family: int = 4,
    p2: float | None = None,
) -> BanditInstance:
    """Fleet of structured arms with ``p`` linearly spaced over ``p_range``.

    The default range is ``[0.1/|X|, 1/|X|]``.
    """
    lo, hi = p_range if p_range is not None else (0.1 / n_states, 1.0 / n_states)
    ps = np.linspace(lo, hi, n_arms)
    arms = tuple(make_machine_arm(n_states, float(p), family, horizon, p2) for p in ps)
    return BanditInstance(arms, (utility,) * n_arms, horizon, budget)


DEAD, PROGRESSING, STABLE = 0, 1, 2


def patient_rewards(horizon: int) -> np.ndarray:
    return np.array([0.0, 1.0 / (2 * horizon), 1.0 / horizon])


def load_patient_ranges(path: str | Path | None = None) -> dict:
    """Per-entry probability intervals ``{"P0": [[[lo, hi], ...], ...], "P1": ...}``.

    Without a path, the bundled table is returned.
    """
    if path is None:
        text = resources.files("rawip.data").joinpath("patient_ranges.json").read_text()
    else:
        text = Path(path).read_text()
    d = json.loads(text)
    return {"P0": d["P0"], "P1": d["P1"]}


def make_patient_arm(horizon: int, rng: np.random.Generator, ranges: dict | None = None,
                     initial_state: int = STABLE) -> ArmModel:
    """Draw a three-state patient arm (DEAD, PROGRESSING, STABLE).

    Each free entry is drawn uniformly inside its interval and the row is then
    renormalised. DEAD is absorbing under both actions.
    """
    if ranges is None:
        ranges = load_patient_ranges()
    P = np.zeros((2, 3, 3))
    for a, key in enumerate(("P0", "P1")):
        bounds = np.asarray(ranges[key], dtype=float)
        if bounds.shape != (3, 3, 2):
            raise ValueError(f"{key} ranges must have shape (3, 3, 2), got {bounds.shape}")
        P[a, DEAD, DEAD] = 1.0
        for x in (PROGRESSING, STABLE):
            lo, hi = bounds[x, :, 0], bounds[x, :, 1]
            if np.any(lo > hi) or np.any(lo < 0) or np.any(hi > 1):
                raise ValueError(f"{key} row {x}: malformed intervals")
            if hi.sum() < 1 - ATOL or lo.sum() > 1 + ATOL:
                raise ValueError(f"{key} row {x}: intervals cannot produce a distribution")
            row = rng.uniform(lo, hi)
            P[a, x] = row / row.sum()
    return ArmModel(P, patient_rewards(horizon), initial_state)


def patient_instance(n_arms: int, budget: int, horizon: int, utility: UtilitySpec,
                     rng: np.random.Generator, ranges: dict | None = None) -> BanditInstance:
    arms = tuple(make_patient_arm(horizon, rng, ranges) for _ in range(n_arms))
    return BanditInstance(arms, (utility,) * n_arms, horizon, budget)


# ---------------------------------------------------------------------------
# structural checks


def tail_probabilities(arm: ArmModel) -> np.ndarray:
    """``q[a, x, k] = sum_{z >= k} P(z | x, a)``."""
    return np.cumsum(arm.transitions[:, :, ::-1], axis=2)[:, :, ::-1]


@dataclass
class Assumption1Report:
    reward_monotone: bool
    q_monotone_in_x: bool
    reward_superadditive: bool
    q_superadditive: bool
    q_monotone_in_a: bool
    reward_action_free: bool
    counterexamples: dict = field(default_factory=dict)

    FLAGS = (
        "reward_monotone",
        "q_monotone_in_x",
        "reward_superadditive",
        "q_superadditive",
        "q_monotone_in_a",
        "reward_action_free",
    )

    @property
    def all_true(self) -> bool:
        return all(getattr(self, f) for f in self.FLAGS)

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.FLAGS}
        d["counterexamples"] = self.counterexamples
        return d


def _superadditive_violation(f: np.ndarray):
    """First (x1, x2) with x1 > x2 where f(x1,1)-f(x1,0) < f(x2,1)-f(x2,0)."""
    gap = f[:, 1] - f[:, 0]
    n = len(gap)
    for x2 in range(n):
        for x1 in range(x2 + 1, n):
            if gap[x1] < gap[x2] - ATOL:
                return x1, x2
    return None


def check_assumption1(arm: ArmModel) -> Assumption1Report:
    """Check the sufficient conditions for monotone policies and indexability."""
    n = arm.n_states
    r = arm.reward_table()
    q = tail_probabilities(arm)
    cx: dict = {}

    def first_decrease(v):
        for x in range(n - 1):
            if v[x + 1] < v[x] - ATOL:
                return x
        return None

    ok_r = True
    for a in (0, 1):
        x = first_decrease(r[:, a])
        if x is not None:
            ok_r = False
            cx["reward_monotone"] = {"a": a, "x_high": x + 1, "x_low": x}
            break

    ok_qx = True
    for a in (0, 1):
        for k in range(n):
            x = first_decrease(q[a, :, k])
            if x is not None and ok_qx:
                ok_qx = False
                cx["q_monotone_in_x"] = {"a": a, "k": k, "x_high": x + 1, "x_low": x}

    ok_rs = True
    v = _superadditive_violation(r)
    if v is not None:
        ok_rs = False
        cx["reward_superadditive"] = {"x1": v[0], "x2": v[1]}

    ok_qs = True
    for k in range(n):
        v = _superadditive_violation(q[:, :, k].T)
        if v is not None:
            ok_qs = False
            cx["q_superadditive"] = {"k": k, "x1": v[0], "x2": v[1]}
            break

    ok_qa = True
    bad = np.argwhere(q[1] < q[0] - ATOL)
    if len(bad):
        ok_qa = False
        cx["q_monotone_in_a"] = {"x": int(bad[0][0]), "k": int(bad[0][1])}

    ok_af = arm.action_free
    if not ok_af:
        x = int(np.argmax(np.abs(r[:, 0] - r[:, 1])))
        cx["reward_action_free"] = {"x": x}

    return Assumption1Report(ok_r, ok_qx, ok_rs, ok_qs, ok_qa, ok_af, cx)
