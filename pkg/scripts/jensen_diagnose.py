#!/usr/bin/env python3
"""Paired replications of point-weight and quadrature-weight estimators after one update.

    python3 scripts/jensen_diagnose.py [configs/sdeA_desk.cfg] [--replications R] [--out DIR]
"""
import argparse
from pathlib import Path

from mspf import diagnostics as dg
from mspf.config import parse_config
from mspf.experiments import run_diagnose

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default=ROOT / "configs" / "sdeA_desk.cfg")
    ap.add_argument("--replications", type=int, default=200)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/jensen")
    args = ap.parse_args()
    report = run_diagnose(parse_config(args.config), args.replications, args.out, seed=args.seed)
    verdict = dg.jensen_check(report)
    print(f"{report.R} replications; {report.note}")
    for f, r, lo, hi in zip(report.f_names, report.ratio, report.ci_lo, report.ci_hi):
        print(f"{f:>3}: var ratio {r:.4f}  95% CI [{lo:.4f}, {hi:.4f}]")
    print("variance reduction holds" if verdict.holds else "variance reduction not established")


if __name__ == "__main__":
    main()
