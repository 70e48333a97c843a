"""Margin sweep: train an encoder per (seed, margin) and cluster the held-out SETs.

    python3 scripts/run_clustering.py --seeds 0 1 2 --margins 0.1 0.2 0.5 1.2 1.5 --out results/clustering.csv
"""
import argparse
import csv
from pathlib import Path

from setle.experiments import clustering_data, clustering_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--margins", type=float, nargs="+", default=[0.1, 0.2, 0.5, 1.2, 1.5])
    ap.add_argument("--out", type=Path, default=Path("results/clustering.csv"))
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "margin", "outcome", "silhouette", "davies_bouldin", "dunn", "best_epoch", "seconds"])
        for seed in args.seeds:
            data = clustering_data(seed)
            for m in args.margins:
                run = clustering_run(data, m)
                for lab in ("Success", "Failure"):
                    r = run.report
                    w.writerow([seed, m, lab, r.silhouette[lab], r.dbi[lab], r.dunn[lab],
                                run.result.best_epoch, round(run.seconds, 1)])
                f.flush()
                print(f"seed {seed} margin {m}: success silhouette {run.report.silhouette['Success']:.3f}")


if __name__ == "__main__":
    main()
