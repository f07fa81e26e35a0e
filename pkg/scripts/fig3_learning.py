"""Thompson-sampling learner on the patient model; prints the regret curve at checkpoints."""
import argparse
import csv
import json
from pathlib import Path

from rawip.cli import ExperimentConfig, run_learn


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=Path(__file__).parents[1] / "configs" / "fig3a.json")
    ap.add_argument("--episodes", type=int)
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.episodes is not None:
        cfg.episodes = args.episodes
    if args.out:
        cfg.out = args.out
    out = run_learn(cfg)
    with open(out / "regret.csv") as f:
        rows = list(csv.DictReader(f))
    K = len(rows)
    print(f"{'k':>5} {'regret':>10} {'R/k':>10} {'bound':>12}")
    for r in rows:
        k = int(r["k"])
        if k in (1, 2, 5) or k % max(1, K // 10) == 0:
            print(f"{k:5d} {float(r['regret']):10.4f} {float(r['regret_over_k']):10.5f} {float(r['bound']):12.1f}")


if __name__ == "__main__":
    main()
