"""Type-I error and power of the KSD and MMD two-sample tests as the target size shrinks.

    python scripts/imbalance_sweep.py --trials 200 --m 32,50,100,200
"""

import argparse

from steinalign.inference import imbalance_sweep
from steinalign.kernels import KernelSpec
from steinalign.numeric import make_rng


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--m", default="32,50,100,200")
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--shift", type=float, default=0.5)
    ap.add_argument("--permutations", type=int, default=200, help="0 skips the MMD baseline")
    ap.add_argument("--kernel", default="rbf")
    ap.add_argument("--bandwidth", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rows = imbalance_sweep(1, args.n, [int(v) for v in args.m.split(",")], args.trials,
                           make_rng(args.seed, "calibration"), shift=args.shift,
                           permutations=args.permutations, kernel=KernelSpec(args.kernel, args.bandwidth))
    print(f"{'m':>5} {'ksd type-I':>11} {'ksd power':>10} {'mmd type-I':>11} {'mmd power':>10}")
    fmt = lambda v: "-" if v is None else f"{v:.3f}"
    for r in rows:
        print(f"{r['m']:5d} {fmt(r['ksd_type1']):>11} {fmt(r['ksd_power']):>10} "
              f"{fmt(r['mmd_type1']):>11} {fmt(r['mmd_power']):>10}")


if __name__ == "__main__":
    main()
