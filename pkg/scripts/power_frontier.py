"""Rank participant/length allocations at a fixed measurement budget.

Sweeps the between-participant sd of the treatment effect and prints the
frontier at each value, e.g.

    python scripts/power_frontier.py --sd-delta 0 0.5 1 --replicates 400
"""
import argparse

from nof1.power import PowerQuery, allocation_frontier
from nof1.protocol import two_arm_protocol
from nof1.simulate import GenerativeParams


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--budget", type=int, default=2800)
    ap.add_argument("--designs", default="100x2,50x4,25x8", help="n x blocks, 2 weekly periods per block")
    ap.add_argument("--delta", type=float, default=0.3)
    ap.add_argument("--sigma", type=float, default=1.0)
    ap.add_argument("--sd-delta", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    ap.add_argument("--replicates", type=int, default=400)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    designs = []
    for d in args.designs.split(","):
        n, k = d.split("x")
        designs.append((int(n), int(k), 7))
    for sd in args.sd_delta:
        q = PowerQuery(
            two_arm_protocol(2, 2, 7), designs,
            GenerativeParams(alpha=1, delta=args.delta, sigma=args.sigma, sd_delta=sd),
            n_replicates=args.replicates, seed=args.seed, budget=args.budget,
        )
        print(f"sd_delta = {sd}")
        for e in allocation_frontier(q, workers=args.workers):
            r = e.result
            lo, hi = r.interval
            tie = " (tied)" if e.tied_with_previous else ""
            print(f"  {e.rank}. {r.n:4d} participants x {r.K * 2 * r.M:3d} days  power {r.power:.3f} "
                  f"[{lo:.3f}, {hi:.3f}]{tie}")


if __name__ == "__main__":
    main()
