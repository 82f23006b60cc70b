#!/usr/bin/env python3
"""Standard particle filter against the exact Kalman posterior on the linear slow-fast model.

    python3 scripts/check_kalman.py [configs/linear_gaussian.cfg] [--seed N] [--out DIR]
"""
import argparse
import csv
from pathlib import Path

from mspf.config import parse_config
from mspf.experiments import run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default=ROOT / "configs" / "linear_gaussian.cfg")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    args = ap.parse_args()
    res = run_experiment(parse_config(args.config), args.out, seed=args.seed, plot_data=False)
    with open(res.out_dir / "oracle.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'step':>4} {'f':>3} {'kalman':>10} {'particle':>10} {'se':>8} {'z':>6}")
    for r in rows:
        print(f"{r['step']:>4} {r['f_name']:>3} {float(r['kalman_mean']):10.5f} "
              f"{float(r['estimate_mean']):10.5f} {float(r['bootstrap_se']):8.5f} {float(r['z_score']):6.2f}")
    print(f"max |z| = {max(abs(float(r['z_score'])) for r in rows):.2f}")


if __name__ == "__main__":
    main()
