"""Command-line harness: plan | sweep | learn | whittle | check."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import learn, policy, sim
from .augment import AugmentedArm, StagewiseArm, build_lattice
from .models import (BanditInstance, UtilitySpec, check_assumption1, load_patient_ranges,
                     machine_instance, patient_instance)
from .whittle import NonIndexableError, auto_upper_bound, check_passive_monotone

MODES = ("plan", "sweep", "learn", "whittle", "check")

DESK_GRID = {
    "horizon": [3, 5],
    "n_states": [2, 3],
    "n_mult": [3],
    "utilities": [
        {"alpha": 1},
        {"alpha": 2, "order": 4}, {"alpha": 2, "order": 8}, {"alpha": 2, "order": 16},
        {"alpha": 3, "order": 4}, {"alpha": 3, "order": 8}, {"alpha": 3, "order": 16},
    ],
    "tau": [0.3, 0.5, 0.7],
    "m_fraction": [0.3, 0.5],
}

GRID_AXES = {"horizon", "n_states", "n_mult", "utilities", "tau", "m_fraction"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str = "plan"
    model: str = "machine"
    family: int = 4
    n_states: int = 3
    n_arms: int = 4
    budget: int | None = None
    m_fraction: float | None = None
    horizon: int = 5
    utility: dict = field(default_factory=lambda: {"alpha": 1, "tau": 0.5, "order": 1.0})
    p_range: list | None = None
    p2: float | None = None
    patient_ranges: str | None = None
    initial_state: int | None = None
    eps: float = 1e-4
    n_paths: int = 100
    episodes: int = 200
    batches: int = 10
    prior: str = "dirichlet"
    seed: int = 0
    jobs: int = 1
    out: str = "results"
    policies: list = field(default_factory=lambda: ["rawip", "neutral", "ssup"])
    allow_idle: bool = False
    grid: dict | None = None
    lambda_points: int = 50
    hist_bins: int | None = None

    def validate(self) -> "ExperimentConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        need(self.mode in MODES, "mode", f"must be one of {MODES}")
        need(self.model in ("machine", "patient"), "model", "must be 'machine' or 'patient'")
        need(self.family in (1, 2, 3, 4), "family", "must be 1, 2, 3 or 4")
        need(self.model != "patient" or self.n_states == 3, "n_states", "patient arms have 3 states")
        need(self.n_states >= 1, "n_states", "must be positive")
        need(self.n_arms >= 1, "n_arms", "must be positive")
        need(self.horizon >= 1, "horizon", "must be at least 1")
        need(self.budget is None or 0 < self.budget <= self.n_arms, "budget", "need 0 < M <= N")
        need(self.m_fraction is None or 0 < self.m_fraction <= 1, "m_fraction", "must lie in (0, 1]")
        try:
            UtilitySpec.from_dict(self.utility)
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigError(f"utility: {e}") from e
        need(self.p_range is None or (len(self.p_range) == 2 and self.p_range[0] <= self.p_range[1]),
             "p_range", "must be [lo, hi] with lo <= hi")
        need(self.family != 2 or self.p2 is not None, "p2", "family 2 needs p2 below every p")
        need(self.eps > 0, "eps", "must be positive")
        need(self.n_paths >= 1, "n_paths", "must be at least 1")
        need(self.episodes >= 0, "episodes", "must be nonnegative")
        need(self.batches >= 1, "batches", "must be at least 1")
        need(self.prior in ("dirichlet", "grid"), "prior", "must be 'dirichlet' or 'grid'")
        need(self.prior != "grid" or self.model == "machine", "prior", "grid prior needs machine arms")
        need(self.jobs >= 1, "jobs", "must be at least 1")
        need(0 <= self.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
        bad = [p for p in self.policies if p not in policy.POLICY_KINDS]
        need(not bad, "policies", f"unknown {bad}; choose from {policy.POLICY_KINDS}")
        need(self.lambda_points >= 1, "lambda_points", "must be positive")
        if self.grid is not None:
            extra = set(self.grid) - GRID_AXES
            need(not extra, "grid", f"unknown axes {sorted(extra)}")
        return self

    @property
    def M(self) -> int:
        if self.budget is not None:
            return self.budget
        if self.m_fraction is not None:
            return max(1, math.floor(self.m_fraction * self.n_arms))
        return 1

    def utility_spec(self) -> UtilitySpec:
        return UtilitySpec.from_dict(self.utility)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        return cls(**d)


def build_instance(cfg: ExperimentConfig) -> BanditInstance:
    u = cfg.utility_spec()
    if cfg.model == "patient":
        ranges = load_patient_ranges(cfg.patient_ranges)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 7])))
        inst = patient_instance(cfg.n_arms, cfg.M, cfg.horizon, u, rng, ranges)
    else:
        inst = machine_instance(cfg.n_states, cfg.n_arms, cfg.M, cfg.horizon, u,
                                tuple(cfg.p_range) if cfg.p_range else None, cfg.family, cfg.p2)
    if cfg.initial_state is not None:
        inst = inst.with_arms([a.__class__(a.transitions, a.rewards, cfg.initial_state)
                               for a in inst.arms])
    return inst


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v):
    if isinstance(v, float):
        return float(f"{v:.9g}")
    if isinstance(v, dict):
        return {k: _fmt(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_fmt(x) for x in v]
    if isinstance(v, np.generic):
        return _fmt(v.item())
    return v


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return "" if v is None else str(v)


def write_json(path: Path, obj):
    path.write_text(json.dumps(_fmt(obj), indent=2) + "\n")


def write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    path.write_text(buf.getvalue())


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    (out / "seed").write_text(f"{cfg.seed}\n")
    return out


def _hist_edges(inst: BanditInstance, bins: int | None):
    if bins is not None:
        return np.linspace(0.0, 1.0, bins + 1)
    # one bin per reachable total when all arms share a reward quantum
    lat = build_lattice(inst.arms[0], inst.horizon)
    q = lat.quantum
    top = max(float(v.max()) for v in lat.values)
    k = int(round(top / q))
    return (np.arange(k + 2) - 0.5) * q


# ---------------------------------------------------------------------------
# subcommands


def compare_policies(inst: BanditInstance, kinds, n_paths: int, seed: int, eps: float,
                     allow_idle: bool = False) -> dict:
    out = {}
    for kind in kinds:
        pol = policy.build_policy(kind, inst, eps, allow_idle)
        out[kind] = sim.evaluate(inst, pol, n_paths, seed)
    return out


def _improvements(summaries: dict) -> dict:
    row = {}
    base = summaries.get("neutral")
    for kind, s in summaries.items():
        if kind == "neutral" or base is None:
            continue
        try:
            row[kind] = sim.relative_improvement(base, s)
        except ZeroDivisionError:
            row[kind] = None
    return row


def run_plan(cfg: ExperimentConfig) -> Path:
    cfg.validate()
    out = _prepare_out(cfg)
    inst = build_instance(cfg)
    summaries = compare_policies(inst, cfg.policies, cfg.n_paths, cfg.seed, cfg.eps, cfg.allow_idle)
    improvements = _improvements(summaries)
    write_json(out / "summary.json", {
        "instance": {"n_arms": inst.n_arms, "budget": inst.budget, "horizon": inst.horizon},
        "policies": {k: s.to_dict() for k, s in summaries.items()},
        "improvement_vs_neutral_pct": improvements,
    })
    edges = _hist_edges(inst, cfg.hist_bins)
    rows = []
    for kind, s in summaries.items():
        for i in range(inst.n_arms):
            counts, _ = np.histogram(s.totals[:, i], bins=edges)
            rows.extend((kind, i, float(edges[b]), float(edges[b + 1]), int(counts[b]))
                        for b in range(len(counts)))
    write_csv(out / "histograms.csv", ["policy", "arm", "bin_left", "bin_right", "count"], rows)
    kinds = [k for k in summaries if k != "neutral"]
    write_csv(out / "comparison.csv", [f"{k}_vs_neutral_pct" for k in kinds],
              [[improvements.get(k) if improvements.get(k) is not None else "undefined" for k in kinds]])
    return out


def sweep_cells(grid: dict) -> list[dict]:
    g = {**DESK_GRID, **(grid or {})}
    cells = []
    for T, X, mult, u, tau, frac in itertools.product(
            g["horizon"], g["n_states"], g["n_mult"], g["utilities"], g["tau"], g["m_fraction"]):
        N = mult * X
        cells.append({
            "horizon": T, "n_states": X, "n_arms": N, "budget": max(1, math.floor(frac * N)),
            "alpha": u["alpha"], "order": u.get("order", 1.0), "tau": tau,
        })
    return cells


def _run_cell(args):
    cell, n_paths, seed, eps, family = args
    row = dict(cell)
    try:
        u = UtilitySpec(cell["alpha"], cell["tau"], cell["order"])
        inst = machine_instance(cell["n_states"], cell["n_arms"], cell["budget"], cell["horizon"], u,
                                family=family)
        s = compare_policies(inst, ("rawip", "neutral", "ssup"), n_paths, seed, eps)
        imp = _improvements(s)
        row.update(rawip_obj=s["rawip"].mean_objective, neutral_obj=s["neutral"].mean_objective,
                   ssup_obj=s["ssup"].mean_objective, rawip_pct=imp["rawip"], ssup_pct=imp["ssup"],
                   error="")
    except (NonIndexableError, ValueError, ArithmeticError) as e:
        row.update(rawip_obj=None, neutral_obj=None, ssup_obj=None, rawip_pct=None, ssup_pct=None,
                   error=f"{type(e).__name__}: {e}")
    return row


CELL_FIELDS = ["horizon", "n_states", "n_arms", "budget", "alpha", "order", "tau",
               "rawip_obj", "neutral_obj", "ssup_obj", "rawip_pct", "ssup_pct", "error"]


def utility_label(alpha, order) -> str:
    return "alpha=1" if int(alpha) == 1 else f"(alpha,o)=({int(alpha)},{float(order):g})"


def aggregate(rows: list[dict]) -> dict:
    """Min/max/mean/%-above-zero per policy and mean RAWIP improvement per utility."""
    table1 = {}
    for kind in ("rawip", "ssup"):
        v = [r[f"{kind}_pct"] for r in rows if r.get(f"{kind}_pct") is not None]
        if v:
            table1[kind] = {"min": min(v), "max": max(v), "mean": math.fsum(v) / len(v),
                            "pct_above_0": 100.0 * sum(x > 0 for x in v) / len(v), "cells": len(v)}
        else:
            table1[kind] = {"min": None, "max": None, "mean": None, "pct_above_0": None, "cells": 0}
    table2 = {}
    for r in rows:
        if r.get("rawip_pct") is None:
            continue
        table2.setdefault(utility_label(r["alpha"], r["order"]), []).append(r["rawip_pct"])
    table2 = {k: math.fsum(v) / len(v) for k, v in table2.items()}
    errors = sum(1 for r in rows if r.get("error"))
    return {"table1": table1, "table2": table2, "cells": len(rows), "errors": errors}


def run_sweep(cfg: ExperimentConfig) -> Path:
    cfg.validate()
    out = _prepare_out(cfg)
    cells = sweep_cells(cfg.grid)
    args = [(c, cfg.n_paths, cfg.seed, cfg.eps, cfg.family) for c in cells]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            rows = list(ex.map(_run_cell, args))
    else:
        rows = [_run_cell(a) for a in args]
    # aggregate the printed precision so the tables recompute exactly from cells.csv
    rows = [_fmt(r) for r in rows]
    write_csv(out / "cells.csv", CELL_FIELDS, [[r.get(f) for f in CELL_FIELDS] for r in rows])
    agg = aggregate(rows)
    write_json(out / "aggregate.json", agg)
    write_csv(out / "table1.csv", ["policy", "min_pct", "max_pct", "mean_pct", "pct_above_0"],
              [[k, v["min"], v["max"], v["mean"], v["pct_above_0"]] for k, v in agg["table1"].items()])
    write_csv(out / "table2.csv", ["utility", "mean_improvement_pct"], list(agg["table2"].items()))
    return out


def run_learn(cfg: ExperimentConfig) -> Path:
    cfg.validate()
    out = _prepare_out(cfg)
    inst = build_instance(cfg)
    if cfg.prior == "grid":
        lo, hi = cfg.p_range if cfg.p_range else (None, None)
        bank = learn.GridBank.uniform(inst, lo, hi, family=cfg.family)
    else:
        bank = learn.PosteriorBank.symmetric(inst)
    curve = learn.run_lrap_ts(inst, bank, cfg.episodes, cfg.batches, cfg.n_paths, cfg.seed, cfg.eps)
    r_max = max(float(np.max(np.abs(a.rewards))) for a in inst.arms)
    x_bar = max(a.n_states for a in inst.arms)
    rows = []
    for k, reg, rk, o, lr in zip(curve.episodes, curve.regret, curve.regret_over_k,
                                 curve.oracle, curve.learner):
        bound = learn.regret_bound(inst.n_arms, inst.horizon, k, r_max, x_bar)
        rows.append((k, reg, rk, bound, o, lr, o - lr, curve.model_seeds[k - 1]))
    write_csv(out / "regret.csv",
              ["k", "regret", "regret_over_k", "bound", "oracle", "learner", "gap", "model_seed"], rows)
    write_csv(out / "batches.csv", ["k", "batch", "objective"],
              [(k, b, v) for k, objs in zip(curve.episodes, curve.batch_objectives)
               for b, v in enumerate(objs)])
    if curve.final_bank is not None:
        write_json(out / "posterior.json", curve.final_bank.to_dict())
    write_json(out / "instance.json", inst.to_dict())
    return out


def run_whittle(cfg: ExperimentConfig) -> Path:
    cfg.validate()
    out = _prepare_out(cfg)
    inst = build_instance(cfg)
    builders = {"rawip": policy.rawip_tables, "neutral": policy.neutral_tables,
                "ssup": policy.ssup_tables}
    for kind in cfg.policies:
        if kind not in builders:
            continue
        tables = builders[kind](inst, cfg.eps)
        rows = [row for tab in tables for row in tab.rows()]
        write_csv(out / f"whittle_{kind}.csv", ["arm_id", "t", "x", "s_level", "index"], rows)
    write_json(out / "instance.json", inst.to_dict())
    return out


def check_arm(arm, utility, horizon: int, lambda_points: int, arm_id: int = 0) -> dict:
    """Structural flags, indexability on a penalty grid, and monotone risk-neutral policies."""
    flags = check_assumption1(arm)
    report = {"arm_id": arm_id, "assumption1": flags.to_dict()}
    if not arm.action_free:
        report["indexability"] = None
        return report
    aug = AugmentedArm(arm, utility, horizon)
    ub = auto_upper_bound(aug.policy_vector, 1e-4)
    grid = np.linspace(0.0, ub, lambda_points)
    report["indexability"] = check_passive_monotone(aug, grid, arm_id).to_dict()
    neutral = StagewiseArm(arm, arm.state_rewards(), horizon)
    mono = []
    for lam in np.linspace(0.0, ub, 5):
        pol = neutral.solve(float(lam)).policy
        mono.append(bool(all(np.all(np.diff(p[0].astype(int)) >= 0) for p in pol)))
    report["neutral_policy_monotone_in_x"] = all(mono)
    return report


def run_check(cfg: ExperimentConfig) -> Path:
    cfg.validate()
    out = _prepare_out(cfg)
    inst = build_instance(cfg)
    reports = [check_arm(a, u, inst.horizon, cfg.lambda_points, i)
               for i, (a, u) in enumerate(zip(inst.arms, inst.utilities))]
    write_json(out / "check.json", {"arms": reports})
    return out


RUNNERS = {"plan": run_plan, "sweep": run_sweep, "learn": run_learn,
           "whittle": run_whittle, "check": run_check}


def parse_args(argv=None):
    ap = argparse.ArgumentParser(prog="rawip", description=__doc__)
    sub = ap.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out")
        p.add_argument("--policy", action="append", dest="policies",
                       choices=policy.POLICY_KINDS, help="repeatable")
        p.add_argument("--eps", type=float)
        p.add_argument("--paths", type=int, dest="n_paths")
        p.add_argument("--episodes", type=int)
    return ap.parse_args(argv)


def config_from_args(ns) -> ExperimentConfig:
    d = {}
    if ns.config is not None:
        d = json.loads(Path(ns.config).read_text())
    d["mode"] = ns.mode
    for key in ("seed", "jobs", "out", "policies", "eps", "n_paths", "episodes"):
        v = getattr(ns, key)
        if v is not None:
            d[key] = v
    return ExperimentConfig.from_dict(d)


def main(argv=None) -> int:
    ns = parse_args(argv)
    try:
        cfg = config_from_args(ns).validate()
    except ConfigError as e:
        print(f"rawip {ns.mode}: invalid config: {e}", file=sys.stderr)
        return 2
    try:
        out = RUNNERS[cfg.mode](cfg)
    except NonIndexableError as e:
        print(f"rawip {ns.mode}: {e}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
