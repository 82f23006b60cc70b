"""Command line entry point: ``mspf run | gen-data | diagnose``.

Exit status 0 on success, 1 on validation errors, 2 on numeric failures or
filter collapse.
"""

from __future__ import annotations

import argparse
import logging
import sys

from mspf import experiments
from mspf.config import parse_config
from mspf.errors import (
    ConfigError,
    ContractViolationError,
    FilterCollapseError,
    InvalidParameterError,
    NumericError,
)
from mspf.jump import ConsistencyError

log = logging.getLogger("mspf")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _variants(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mspf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run filter variants on one observation file")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=_u64)
    run.add_argument("--out")
    run.add_argument("--variants", type=_variants)

    gen = sub.add_parser("gen-data", help="write truth.csv and observations.csv only")
    gen.add_argument("--config", required=True)
    gen.add_argument("--seed", type=_u64)
    gen.add_argument("--out")

    diag = sub.add_parser("diagnose", help="paired replications of point vs integrated weights")
    diag.add_argument("--config", required=True)
    diag.add_argument("--replications", type=int)
    diag.add_argument("--seed", type=_u64)
    diag.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        if args.command == "run":
            res = experiments.run_experiment(cfg, args.out, args.seed, args.variants)
            print(f"wrote {len(res.files)} files to {res.out_dir}")
        elif args.command == "gen-data":
            truth, obs = experiments.generate_data(cfg, args.out, args.seed)
            print(f"wrote {len(obs)} observations")
        else:
            if args.replications is not None and args.replications < 2:
                raise ConfigError("replications: need at least two")
            rep = experiments.run_diagnose(cfg, args.replications, args.out, args.seed)
            for name, r, lo, hi in zip(rep.f_names, rep.ratio, rep.ci_lo, rep.ci_hi):
                print(f"{name}: variance ratio {r:.4g} [{lo:.4g}, {hi:.4g}]")
    except (FilterCollapseError, NumericError, ConsistencyError) as err:
        print(f"mspf: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractViolationError, InvalidParameterError, FileNotFoundError) as err:
        print(f"mspf: invalid input: {err}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
