"""Desk-scale sweep: relative improvement over the risk-neutral index policy."""
import argparse
import json
from pathlib import Path

from rawip.cli import ExperimentConfig, run_sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=Path(__file__).parents[1] / "configs" / "desk_sweep.json")
    ap.add_argument("--jobs", type=int)
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.jobs:
        cfg.jobs = args.jobs
    if args.out:
        cfg.out = args.out
    out = run_sweep(cfg)
    agg = json.loads((out / "aggregate.json").read_text())
    print(f"cells {agg['cells']}, errors {agg['errors']}")
    print(f"{'policy':8} {'min':>8} {'max':>8} {'mean':>8} {'%>0':>6}")
    for k, v in agg["table1"].items():
        if v["cells"]:
            print(f"{k:8} {v['min']:8.2f} {v['max']:8.2f} {v['mean']:8.2f} {v['pct_above_0']:6.1f}")
    for label, mean in agg["table2"].items():
        print(f"{label:20} {mean:8.2f}")


if __name__ == "__main__":
    main()
