"""Structural ablations (remove / shuffle / flatten) against the complete graph.

    python3 scripts/run_ablations.py --seeds 0 1 2 --margin 1.5 --out results/ablations.csv
"""
import argparse
import csv
from pathlib import Path

from setle.experiments import ablation_run, clustering_data, clustering_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--margin", type=float, default=1.5)
    ap.add_argument("--fraction", type=float, default=0.4)
    ap.add_argument("--out", type=Path, default=Path("results/ablations.csv"))
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "mode", "outcome", "silhouette", "davies_bouldin", "dunn"])
        for seed in args.seeds:
            data = clustering_data(seed)
            res = ablation_run(data, clustering_run(data, args.margin), args.fraction)
            for mode, r in res.reports.items():
                for lab in ("Success", "Failure"):
                    w.writerow([seed, mode, lab, r.silhouette[lab], r.dbi[lab], r.dunn[lab]])
                print(f"seed {seed} {mode}: silhouette {r.silhouette['Success']:.3f} dunn {r.dunn['Success']:.3f}")
            f.flush()


if __name__ == "__main__":
    main()
