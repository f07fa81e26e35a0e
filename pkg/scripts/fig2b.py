"""Per-arm positive mass and total-reward histograms on the 25-arm machine fleet."""
import argparse
import csv
import json
from pathlib import Path

from rawip.cli import ExperimentConfig, run_plan


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=Path(__file__).parents[1] / "configs" / "fig2b.json")
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.out:
        cfg.out = args.out
    out = run_plan(cfg)
    summary = json.loads((out / "summary.json").read_text())["policies"]
    kinds = list(summary)
    print("arm  " + "  ".join(f"{k:>8}" for k in kinds))
    for i in range(cfg.n_arms):
        print(f"{i:3d}  " + "  ".join(f"{summary[k]['positive_mass'][i]:8.2f}" for k in kinds))
    for k in kinds:
        print(f"{k}: objective {summary[k]['mean_objective']:.3f} +- {summary[k]['se_objective']:.3f}")
    with open(out / "comparison.csv") as f:
        print(next(csv.DictReader(f)))
    print(f"histograms: {out / 'histograms.csv'}")


if __name__ == "__main__":
    main()
