"""Log-ratio ranges of TREFree, PPO and TRPO over paired pointmass runs.

Writes one CSV row per (objective, seed, iteration) plus a per-seed summary
of max |log ratio|. Usage: python3 scripts/ratio_compare.py [--iterations 50]
"""
import argparse
import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from trefree.config import ObjectiveSpec, TrainConfig
from trefree.trainer import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=50)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--objectives", nargs="+", default=["trefree", "ppo", "trpo"])
    ap.add_argument("--out", default="out/ratio_compare.csv")
    args = ap.parse_args()

    base = TrainConfig()
    base = replace(base, total_steps=args.iterations * base.batch_size)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    summary = {}
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["objective", "seed", "iteration", "min_log_ratio", "max_log_ratio", "return_mean"])
        for name in args.objectives:
            for seed in args.seeds:
                log = train(replace(base, objective=ObjectiveSpec.from_name(name), seed=seed))
                lo, hi = log.column("min_log_ratio"), log.column("max_log_ratio")
                for r in log.rows:
                    writer.writerow([name, seed, r["iteration"], r["min_log_ratio"], r["max_log_ratio"], r["return_mean"]])
                summary[name, seed] = float(np.max(np.maximum(-lo, hi)))
                print(f"{name:>8} seed {seed}: max |log ratio| {summary[name, seed]:.4f}  "
                      f"final return {log.final_return():.1f}", flush=True)
    for seed in args.seeds:
        row = "  ".join(f"{n}={summary[n, seed]:.4f}" for n in args.objectives)
        print(f"seed {seed}: {row}")


if __name__ == "__main__":
    main()
