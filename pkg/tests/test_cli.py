import csv
import json
import math

import numpy as np
import pytest

from rawip.cli import (
    ConfigError,
    ExperimentConfig,
    _fmt,
    aggregate,
    build_instance,
    check_arm,
    main,
    run_check,
    run_learn,
    run_plan,
    run_sweep,
    run_whittle,
    sweep_cells,
)
from rawip.models import ArmModel, UtilitySpec


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


# --- config ------------------------------------------------------------------


@pytest.mark.parametrize("field,value", [
    ("mode", "train"), ("n_arms", 0), ("budget", 9), ("horizon", 0), ("eps", 0.0),
    ("utility", {"alpha": 1, "tau": 1.5}), ("utility", {"tau": 0.5}), ("policies", ["best"]),
    ("prior", "beta"), ("grid", {"colour": [1]}), ("p_range", [0.3, 0.1]), ("seed", -1),
])
def test_invalid_fields_are_named(field, value):
    cfg = ExperimentConfig(n_arms=4)
    setattr(cfg, field, value)
    with pytest.raises(ConfigError, match=field):
        cfg.validate()


def test_patient_needs_three_states():
    with pytest.raises(ConfigError, match="n_states"):
        ExperimentConfig(model="patient", n_states=4).validate()


def test_unknown_config_key():
    with pytest.raises(ConfigError, match="colour"):
        ExperimentConfig.from_dict({"colour": 1})


def test_config_roundtrip():
    cfg = ExperimentConfig(mode="sweep", grid={"horizon": [3]}, p_range=[0.01, 0.2], budget=2,
                           utility={"alpha": 3, "tau": 0.3, "order": 8.0}, policies=["rawip", "random"])
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg


def test_budget_from_fraction():
    assert ExperimentConfig(n_arms=25, m_fraction=0.3).M == 7
    assert ExperimentConfig(n_arms=2, m_fraction=0.3).M == 1
    assert ExperimentConfig(n_arms=5, budget=3, m_fraction=0.9).M == 3


def test_patient_instance_seeded():
    cfg = ExperimentConfig(model="patient", n_arms=3, seed=4)
    a, b = build_instance(cfg), build_instance(cfg)
    assert all(np.array_equal(x.transitions, y.transitions) for x, y in zip(a.arms, b.arms))


# --- subcommands -------------------------------------------------------------


def small(tmp_path, name, **kw):
    base = dict(n_states=3, n_arms=3, budget=1, horizon=3, n_paths=20, seed=5, out=str(tmp_path / name))
    base.update(kw)
    return ExperimentConfig(**base)


def test_plan_outputs(tmp_path):
    out = run_plan(small(tmp_path, "plan"))
    assert {"config.json", "seed", "summary.json", "histograms.csv", "comparison.csv"} <= set(files(out))
    assert (out / "seed").read_text() == "5\n"
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["policies"]) == {"rawip", "neutral", "ssup"}
    hist = read_csv(out / "histograms.csv")
    per = [r for r in hist if r["policy"] == "rawip" and r["arm"] == "0"]
    assert sum(int(r["count"]) for r in per) == 20
    # totals sit at bin centres: one bin per reward quantum
    assert len(per) == 7


def test_plan_single_arm_all_policies_agree(tmp_path):
    out = run_plan(small(tmp_path, "one", n_arms=1, budget=1))
    s = json.loads((out / "summary.json").read_text())["policies"]
    objs = {k: v["mean_objective"] for k, v in s.items()}
    assert len(set(objs.values())) == 1


def test_plan_rerun_byte_identical(tmp_path):
    a = files(run_plan(small(tmp_path, "a")))
    b = files(run_plan(small(tmp_path, "a")))
    assert a == b


def test_single_cell_sweep_matches_plan(tmp_path):
    grid = {"horizon": [3], "n_states": [3], "n_mult": [1], "utilities": [{"alpha": 2, "order": 8}],
            "tau": [0.5], "m_fraction": [0.4]}
    sweep = run_sweep(small(tmp_path, "sw", mode="sweep", grid=grid))
    cells = read_csv(sweep / "cells.csv")
    assert len(cells) == 1
    plan = run_plan(small(tmp_path, "pl", utility={"alpha": 2, "tau": 0.5, "order": 8}))
    comp = read_csv(plan / "comparison.csv")[0]
    assert cells[0]["rawip_pct"] == comp["rawip_vs_neutral_pct"]
    assert cells[0]["ssup_pct"] == comp["ssup_vs_neutral_pct"]


def test_sweep_aggregate_recomputes_from_cells(tmp_path):
    grid = {"horizon": [3], "n_states": [2], "utilities": [{"alpha": 1}, {"alpha": 3, "order": 4}],
            "tau": [0.3, 0.7], "m_fraction": [0.5]}
    out = run_sweep(small(tmp_path, "agg", mode="sweep", grid=grid))
    cells = read_csv(out / "cells.csv")
    rows = []
    for c in cells:
        rows.append({"alpha": int(c["alpha"]), "order": float(c["order"]),
                     "rawip_pct": float(c["rawip_pct"]) if c["rawip_pct"] else None,
                     "ssup_pct": float(c["ssup_pct"]) if c["ssup_pct"] else None,
                     "error": c["error"]})
    agg = json.loads((out / "aggregate.json").read_text())
    again = json.loads(json.dumps(aggregate(rows)))
    assert _fmt(again) == agg
    assert set(agg["table2"]) == {"alpha=1", "(alpha,o)=(3,4)"}


def test_sweep_error_cells_are_tagged():
    rows = [{"alpha": 1, "order": 1.0, "rawip_pct": 10.0, "ssup_pct": 0.0, "error": ""},
            {"alpha": 1, "order": 1.0, "rawip_pct": None, "ssup_pct": None, "error": "NonIndexableError: x"}]
    agg = aggregate(rows)
    assert agg["errors"] == 1 and agg["table1"]["rawip"]["cells"] == 1


def test_sweep_grid_size():
    assert len(sweep_cells(None)) == 2 * 2 * 1 * 7 * 3 * 2


def test_learn_outputs(tmp_path):
    cfg = small(tmp_path, "learn", mode="learn", model="patient", episodes=1, batches=2, n_paths=10)
    out = run_learn(cfg)
    rows = read_csv(out / "regret.csv")
    assert len(rows) == 1 and rows[0]["k"] == "1"
    assert float(rows[0]["bound"]) >= float(rows[0]["regret"])
    assert len(read_csv(out / "batches.csv")) == 2
    assert json.loads((out / "posterior.json").read_text())["kind"] == "dirichlet"


def test_learn_grid_prior(tmp_path):
    cfg = small(tmp_path, "lg", mode="learn", episodes=2, batches=1, n_paths=5, prior="grid")
    out = run_learn(cfg)
    assert json.loads((out / "posterior.json").read_text())["kind"] == "grid"


def test_whittle_dump(tmp_path):
    out = run_whittle(small(tmp_path, "w", mode="whittle", policies=["rawip", "ssup"]))
    rows = read_csv(out / "whittle_rawip.csv")
    assert list(rows[0]) == ["arm_id", "t", "x", "s_level", "index"]
    # three arms, levels 1 + 3 + 5 per state at T=3
    assert len(rows) == 3 * 3 * (1 + 3 + 5)
    assert len(read_csv(out / "whittle_ssup.csv")) == 3 * 3 * 3


def test_check_report(tmp_path):
    out = run_check(small(tmp_path, "c", mode="check", family=1, p_range=[0.5, 0.9], lambda_points=10))
    rep = json.loads((out / "check.json").read_text())["arms"]
    assert len(rep) == 3
    for r in rep:
        assert all(r["assumption1"][k] for k in ("reward_monotone", "q_superadditive", "q_monotone_in_a"))
        assert r["indexability"]["monotone"]
        assert r["neutral_policy_monotone_in_x"]


def test_check_single_state_arm():
    arm = ArmModel(np.ones((2, 1, 1)), [0.0])
    rep = check_arm(arm, UtilitySpec(1, 0.5), 3, 5)
    assert all(rep["assumption1"][k] for k in ("reward_monotone", "q_monotone_in_x", "reward_superadditive",
                                               "q_superadditive", "q_monotone_in_a", "reward_action_free"))
    assert rep["indexability"]["monotone"]


# --- entry point -------------------------------------------------------------


def test_main_flags_override_config(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"n_states": 2, "n_arms": 2, "budget": 1, "horizon": 2, "seed": 1}))
    out = tmp_path / "m"
    rc = main(["plan", "--config", str(cfg_path), "--seed", "9", "--out", str(out), "--paths", "5",
               "--policy", "rawip", "--policy", "neutral"])
    assert rc == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["seed"] == 9 and saved["n_paths"] == 5 and saved["policies"] == ["rawip", "neutral"]
    assert capsys.readouterr().out.strip() == str(out)


def test_main_reports_config_error(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"n_arms": 2, "budget": 5}))
    assert main(["plan", "--config", str(cfg_path), "--out", str(tmp_path / "x")]) == 2
    assert "budget" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_histogram_bins_override(tmp_path):
    out = run_plan(small(tmp_path, "h", hist_bins=4, policies=["rawip"]))
    rows = read_csv(out / "histograms.csv")
    assert len(rows) == 3 * 4
    assert math.isclose(float(rows[-1]["bin_right"]), 1.0)


def test_family2_needs_p2(tmp_path):
    with pytest.raises(ConfigError, match="p2"):
        ExperimentConfig(family=2).validate()
    out = run_check(small(tmp_path, "f2", mode="check", family=2, p_range=[0.6, 0.9], p2=0.3,
                          lambda_points=10))
    rep = json.loads((out / "check.json").read_text())["arms"]
    assert all(r["indexability"]["monotone"] for r in rep)
