"""Simulation-based calibration of the single-trial sampler.

    python scripts/run_sbc.py --cycles 500 --out sbc_ranks.csv
"""
import argparse
import sys
import time

from nof1.mcmc import McmcSettings
from nof1.sbc import SbcConfig, run_sbc


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cycles", type=int, default=500)
    ap.add_argument("--ranks", type=int, default=99)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iid", action="store_true", help="iid errors instead of AR(1)")
    ap.add_argument("--no-trend", action="store_true")
    ap.add_argument("--warmup", type=int, default=300)
    ap.add_argument("--samples", type=int, default=495)
    ap.add_argument("--out", default=None, help="write per-cycle ranks here")
    args = ap.parse_args()

    cfg = SbcConfig(
        n_cycles=args.cycles, n_ranks=args.ranks, seed=args.seed,
        include_trend=not args.no_trend, error_model="iid" if args.iid else "ar1",
        mcmc=McmcSettings(n_chains=2, n_warmup=args.warmup, n_samples=args.samples),
    )
    t0 = time.time()

    def tick(i):
        if (i + 1) % 50 == 0:
            print(f"  {i + 1}/{cfg.n_cycles} cycles, {time.time() - t0:.0f}s", file=sys.stderr)

    res = run_sbc(cfg, progress=tick)
    for name, p in res.ks_pvalues().items():
        print(f"{name:6s} KS p = {p:.3f}")
    print(f"delta 95% coverage = {res.coverage:.3f}")
    print(f"non-converged fits = {res.nonconverged}")
    if args.out:
        res.to_csv(args.out)


if __name__ == "__main__":
    main()
