#!/usr/bin/env python3
"""Stiff reaction-network filtering experiment; prints ESS and S6 tracking error.

    python3 scripts/run_jump_experiment.py [configs/jumpB_desk.cfg] [--seed N] [--out DIR]
"""
import argparse
from pathlib import Path

import numpy as np

from mspf.config import parse_config
from mspf.experiments import run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default=ROOT / "configs" / "jumpB_desk.cfg")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    args = ap.parse_args()
    res = run_experiment(parse_config(args.config), args.out, seed=args.seed)
    print(f"outputs in {res.out_dir}")
    for r in res.manifest["refusals"]:
        print(f"refused {r['variant']}: {r['expected_events']:.3g} expected events > budget {r['cost_budget']:.3g}")
    truth = dict(zip(res.truth.times.tolist(), res.truth.states[:, 5])) if res.truth is not None else None
    for v, o in res.outputs.items():
        line = f"{v:>12}: median ESS {np.median(o.ess()):8.2f}"
        if truth is not None:
            err = o.estimates("s6") - np.array([truth[t] for t in o.times()])
            line += f"  max |S6 error| {np.abs(err).max():6.2f}"
        print(line)
    if {"averaged", "multiscale"} <= set(res.outputs):
        r = res.outputs["multiscale"].ess() / res.outputs["averaged"].ess()
        print(f"median ESS ratio averaged-weight/point-weight {np.median(r):.1f}")


if __name__ == "__main__":
    main()
