"""Empirical convergence rates of the estimated-score KSD on 1-D Gaussians.

    python scripts/rate_experiment.py --reps 50 --out rate.json
"""

import argparse
import json

from steinalign.inference import convergence_experiment
from steinalign.kernels import KernelSpec
from steinalign.numeric import make_rng


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bandwidth", type=float, default=1.0)
    ap.add_argument("--p-mean", type=float, default=0.5)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    fit_n, fit_m = convergence_experiment((args.p_mean, 1.0), (0.0, 1.0), KernelSpec("rbf", args.bandwidth),
                                          [50, 100, 200, 400, 800, 1600], [32, 64, 128, 256, 512, 1024],
                                          args.reps, make_rng(args.seed, "rate"))
    for label, fit in (("n (exact score)", fit_n), ("m (fitted score)", fit_m)):
        print(f"{label}: slope {fit.slope:.3f} +- {fit.slope_se:.3f}")
        for size, err in zip(fit.sizes, fit.rmse):
            print(f"  {size:5d}  rmse {err:.3e}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"n": fit_n.to_record(), "m": fit_m.to_record()}, fh, indent=2)


if __name__ == "__main__":
    main()
