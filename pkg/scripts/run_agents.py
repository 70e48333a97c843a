"""Agent comparison: Baseline vs memory-enriched strategies on one task.

    python3 scripts/run_agents.py --task Empty-5 --strategies Baseline ActionSelectionOnly --seeds 0 1 2
"""
import argparse
import csv
import time
from pathlib import Path

from setle.agent import Strategy, write_episode_log
from setle.experiments import agent_memory, agent_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--task", default="Empty-5")
    ap.add_argument("--strategies", nargs="+", default=["Baseline", "ActionSelectionOnly"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--out", type=Path, default=Path("results/agents"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        memory = None
        for name in args.strategies:
            if Strategy(name).enriched and memory is None:
                memory = agent_memory(args.task, seed)
            t0 = time.perf_counter()
            metrics, log = agent_run(args.task, name, seed, args.episodes, memory)
            write_episode_log(args.out / f"{name}_seed{seed}_episodes.csv", log)
            rows.append({"strategy": name, "seed": seed, **metrics, "seconds": round(time.perf_counter() - t0, 1)})
            print(f"seed {seed} {name}: last-100 success {metrics['success_rate_last']:.2f} "
                  f"reward frequency {metrics['reward_frequency']:.4f}")
    with open(args.out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
