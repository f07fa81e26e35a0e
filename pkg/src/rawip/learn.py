"""Thompson sampling over unknown transition rows, with Bayesian-regret tracking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import ArmModel, BanditInstance, machine_transitions
from .policy import IndexPolicy, IntegrityError, rawip_tables
from .sim import evaluate, rollout


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class PosteriorBank:
    """Dirichlet parameters ``counts[i][a, x, :]`` for every arm, action and state."""

    prior: tuple
    counts: tuple

    @classmethod
    def symmetric(cls, instance: BanditInstance, concentration: float = 1.0) -> "PosteriorBank":
        prior = tuple(np.full((2, a.n_states, a.n_states), float(concentration)) for a in instance.arms)
        return cls(prior, tuple(p.copy() for p in prior))

    @classmethod
    def point_mass(cls, instance: BanditInstance, strength: float = 1e9) -> "PosteriorBank":
        """A prior that is (numerically) certain of the true rows."""
        prior = tuple(strength * a.transitions for a in instance.arms)
        return cls(prior, tuple(p.copy() for p in prior))

    def posterior_mean(self, i: int) -> np.ndarray:
        c = self.counts[i]
        return c / c.sum(axis=2, keepdims=True)

    def sample_transitions(self, rng: np.random.Generator) -> list[np.ndarray]:
        out = []
        for c in self.counts:
            g = rng.gamma(c)
            s = g.sum(axis=2, keepdims=True)
            # all draws underflowing is only possible for vanishing parameters
            g = np.where(s > 0, g, c)
            out.append(g / g.sum(axis=2, keepdims=True))
        return out

    def sample_models(self, arms, rng: np.random.Generator) -> list[ArmModel]:
        return [arm.with_transitions(P) for arm, P in zip(arms, self.sample_transitions(rng))]

    def update(self, observations) -> "PosteriorBank":
        return update_posterior(self, observations)

    def to_dict(self) -> dict:
        return {"kind": "dirichlet",
                "prior": [p.tolist() for p in self.prior],
                "counts": [c.tolist() for c in self.counts]}

    @classmethod
    def from_dict(cls, d: dict) -> "PosteriorBank":
        return cls(tuple(np.array(p, dtype=float) for p in d["prior"]),
                   tuple(np.array(c, dtype=float) for c in d["counts"]))


def sample_models(bank, arms, rng: np.random.Generator) -> list[ArmModel]:
    return bank.sample_models(arms, rng)


def _check_obs(shapes, i, x, a, y):
    if not 0 <= i < len(shapes):
        raise IntegrityError(f"arm {i} out of range")
    n = shapes[i]
    if not (0 <= x < n and 0 <= y < n and a in (0, 1)):
        raise IntegrityError(f"observation {(i, x, a, y)} out of range for arm with {n} states")


def update_posterior(bank: PosteriorBank, observations) -> PosteriorBank:
    """Conjugate update: one count per observed ``(arm, x, a, x')``."""
    counts = [c.copy() for c in bank.counts]
    shapes = [c.shape[1] for c in counts]
    for i, x, a, y in observations:
        _check_obs(shapes, i, x, a, y)
        counts[i][a, x, y] += 1.0
    return PosteriorBank(bank.prior, tuple(counts))


@dataclass(frozen=True, eq=False)
class GridBank:
    """Posterior over the scalar parameter of a structured machine arm, on a grid.

    Each arm's transitions are ``machine_transitions(n, p, family)``; ``p`` has
    a uniform prior on ``p_grid`` and the posterior is proportional to the
    likelihood of the observed transitions.
    """

    p_grid: np.ndarray
    log_weights: tuple
    n_states: tuple
    family: int = 4

    @classmethod
    def uniform(cls, instance: BanditInstance, lo: float | None = None, hi: float | None = None,
                points: int = 50, family: int = 4) -> "GridBank":
        n = instance.arms[0].n_states
        lo = 0.1 / n if lo is None else lo
        hi = 1.0 / n if hi is None else hi
        grid = np.linspace(lo, hi, points)
        lw = tuple(np.zeros(points) for _ in instance.arms)
        return cls(grid, lw, tuple(a.n_states for a in instance.arms), family)

    def _log_kernel(self, n: int) -> np.ndarray:
        P = np.stack([machine_transitions(n, float(p), self.family) for p in self.p_grid])
        with np.errstate(divide="ignore"):
            return np.log(P)

    def weights(self, i: int) -> np.ndarray:
        lw = self.log_weights[i]
        w = np.exp(lw - lw.max())
        return w / w.sum()

    def sample_p(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([self.p_grid[rng.choice(len(self.p_grid), p=self.weights(i))]
                         for i in range(len(self.log_weights))])

    def sample_models(self, arms, rng: np.random.Generator) -> list[ArmModel]:
        ps = self.sample_p(rng)
        return [arm.with_transitions(machine_transitions(arm.n_states, float(p), self.family))
                for arm, p in zip(arms, ps)]

    def update(self, observations) -> "GridBank":
        lw = [w.copy() for w in self.log_weights]
        kernels = {n: self._log_kernel(n) for n in set(self.n_states)}
        for i, x, a, y in observations:
            _check_obs(self.n_states, i, x, a, y)
            lw[i] += kernels[self.n_states[i]][:, a, x, y]
        return GridBank(self.p_grid, tuple(lw), self.n_states, self.family)

    def to_dict(self) -> dict:
        return {"kind": "grid", "family": self.family, "p_grid": self.p_grid.tolist(),
                "log_weights": [w.tolist() for w in self.log_weights],
                "n_states": list(self.n_states)}


@dataclass
class RegretCurve:
    episodes: list = field(default_factory=list)
    model_seeds: list = field(default_factory=list)
    oracle: list = field(default_factory=list)
    learner: list = field(default_factory=list)
    regret: list = field(default_factory=list)
    batch_objectives: list = field(default_factory=list)
    final_bank: object = None

    @property
    def gaps(self) -> list:
        return [o - l for o, l in zip(self.oracle, self.learner)]

    @property
    def regret_over_k(self) -> list:
        return [r / k for r, k in zip(self.regret, self.episodes)]

    def __len__(self):
        return len(self.episodes)


def regret_bound(n_arms: int, horizon: int, episodes: int, r_max: float, max_states: int) -> float:
    """12 N^2 T R_max |X| sqrt(K T (1 + ln(K T)))."""
    if episodes == 0:
        return 0.0
    KT = episodes * horizon
    return 12.0 * n_arms**2 * horizon * r_max * max_states * math.sqrt(KT * (1.0 + math.log(KT)))


def run_lrap_ts(true_instance: BanditInstance, bank0, episodes: int, batches_per_episode: int = 10,
                n_eval_paths: int = 100, seed: int = 0, eps: float = 1e-4, log=None) -> RegretCurve:
    """Thompson sampling with index-policy planning on sampled models.

    The learner sees the true instance only through rollouts. Per episode the
    gap between the true-parameter index policy and the learner's policy is
    estimated on the same evaluation seed for both.
    """
    oracle = IndexPolicy(rawip_tables(true_instance, eps), true_instance.budget, "oracle-rawip")
    arms = true_instance.arms
    bank = bank0
    curve = RegretCurve()
    cum = 0.0
    for k in range(1, episodes + 1):
        rng = _stream(seed, 1, k)
        sampled = true_instance.with_arms(bank.sample_models(arms, rng))
        learner = IndexPolicy(rawip_tables(sampled, eps), true_instance.budget, "learner")
        obs, batch_obj = [], []
        for b in range(batches_per_episode):
            tr = rollout(true_instance, learner, _stream(seed, 2, k, b))
            obs.extend(tr.transitions())
            batch_obj.append(tr.objective)
        eval_seed = _derived_seed(seed, 3, k)
        o = evaluate(true_instance, oracle, n_eval_paths, eval_seed).mean_objective
        lr = evaluate(true_instance, learner, n_eval_paths, eval_seed).mean_objective
        cum += o - lr
        curve.episodes.append(k)
        curve.model_seeds.append(_derived_seed(seed, 1, k))
        curve.oracle.append(o)
        curve.learner.append(lr)
        curve.regret.append(cum)
        curve.batch_objectives.append(batch_obj)
        bank = bank.update(obs)
        if log is not None:
            log(k, curve)
    curve.final_bank = bank
    return curve
