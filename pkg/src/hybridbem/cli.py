"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 assumption failure
(``check``), 4 numerical failure (solver or ensemble).
"""

import argparse
import sys

from . import __version__, io
from .config import load
from .errors import (
    ConfigError,
    DegenerateBox,
    EnsembleFailure,
    HybridBEMError,
    InvalidP,
    OffGridTime,
    SolverError,
)
from .experiments import COMMANDS

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_NUMERICAL = 0, 2, 3, 4


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    ap = argparse.ArgumentParser(prog="hybridbem", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--seed", type=_u64, help="master seed (overrides simulation.seed)")
        p.add_argument("--workers", type=int, help="parallel worker processes; results do not depend on it")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides out)")
        p.add_argument("--tol", type=float, help="solver residual tolerance")
        p.add_argument("--max-newton-iters", type=int)
        p.add_argument("--paths", type=int, help="ensemble size (overrides simulation.paths)")
        p.add_argument("--steps", type=int, help="horizon in steps (overrides simulation.steps)")
        p.add_argument("--allow-unstable-step", action="store_true",
                       help="run with dt >= 1/(n_M+2) instead of failing")
        p.add_argument("--quiet", action="store_true", help="do not print the summary JSON")
    return ap


def overrides(args):
    return {
        "simulation.seed": args.seed,
        "simulation.workers": args.workers,
        "simulation.paths": args.paths,
        "simulation.steps": args.steps,
        "out": args.out,
        "solver.tol": args.tol,
        "solver.max_newton_iters": args.max_newton_iters,
    }


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config, overrides(args), allow_unstable=args.allow_unstable_step)
        summary = COMMANDS[args.command](cfg)
    except (ConfigError, DegenerateBox, InvalidP, OffGridTime) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, EnsembleFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HybridBEMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if not args.quiet:
        print(io.dumps(summary))
    if args.command == "check" and summary["verdict"] != "pass":
        return EXIT_ASSUMPTION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
