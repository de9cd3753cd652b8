"""Regret and best-arm share of Thompson sampling over replicate trials.

    python scripts/adaptive_regret.py --arms walk=0,resistance=0.5,interval=1 --runs 100
"""
import argparse

import numpy as np

from nof1.adaptive import regret_ratio, run_adaptive_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arms", default="walk=0,resistance=0.5,interval=1")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--measurements", type=int, default=1)
    ap.add_argument("--runs", type=int, default=100)
    ap.add_argument("--window", type=int, default=50)
    ap.add_argument("--round-robin", action="store_true")
    ap.add_argument("--out", default=None, help="CSV of mean cumulative regret per epoch")
    args = ap.parse_args()

    arms = {k: float(v) for k, v in (p.split("=") for p in args.arms.split(","))}
    traces = [
        run_adaptive_trial(arms, args.epochs, args.measurements, rng_seed=r, round_robin=args.round_robin)
        for r in range(args.runs)
    ]
    late = np.array([t.fraction_best(args.window) for t in traces])
    print(f"best arm share in last {args.window} epochs: median {np.median(late):.3f}, "
          f"runs above 0.8: {np.mean(late > 0.8):.2f}")
    n = args.epochs // 4
    while n >= 10:
        print(f"regret({2 * n}) / regret({n}) = {regret_ratio(traces, n):.3f}")
        n //= 2
    if args.out:
        cum = np.mean([t.cumulative_regret for t in traces], axis=0)
        with open(args.out, "w") as f:
            f.write("epoch,mean_cumulative_regret\n")
            for e, v in enumerate(cum, 1):
                f.write(f"{e},{v!r}\n")


if __name__ == "__main__":
    main()
