"""
HOLD Navigation Module
======================
Command-line surface: the argument parser shared by every subcommand and
the single logging setup.

Subcommands: verify | train | sample | nll | compare | evolve | ablate
"""

import argparse
import logging
import sys
from typing import List, Optional

from modules.hold_config import SAMPLERS

LOG_FORMAT = "[hold] %(levelname)s %(name)s: %(message)s"

COMMANDS = ("verify", "train", "sample", "nll", "compare", "evolve", "ablate")


def configure_logging(verbosity: int = 0) -> None:
    """One stderr handler; -v for DEBUG, -q for WARNING."""
    if verbosity > 0:
        level = logging.DEBUG
    elif verbosity < 0:
        level = logging.WARNING
    else:
        level = logging.INFO
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="YAML run configuration")
    parser.add_argument("--seed", type=int, metavar="U64", help="base seed (overrides run.seed)")
    parser.add_argument("--threads", type=int, metavar="N", help="worker threads (1 is bit-reproducible)")
    parser.add_argument("--out", metavar="DIR", help="output directory (overrides run.out_dir)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set kernel.L=4 (repeatable)")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_const", const=1, dest="verbosity", default=0)
    verbosity.add_argument("-q", "--quiet", action="store_const", const=-1, dest="verbosity")


def _add_model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", metavar="PATH",
                        help="checkpoint to load (default: <out>/checkpoints/final.ckpt)")
    parser.add_argument("--analytic", action="store_true",
                        help="use the exact score of the 'gaussian' dataset instead of a checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hold",
        description="Third-order Langevin diffusion: verification, training, sampling and likelihood.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("verify", help="check closed-form kernels against numerical oracles")
    _add_common(p)
    p.add_argument("--skip-monte-carlo", action="store_true", help="skip the long Monte Carlo check")

    p = sub.add_parser("train", help="train the score network")
    _add_common(p)
    p.add_argument("--no-progress", action="store_true", help="disable the progress bar")

    p = sub.add_parser("sample", help="generate samples to CSV")
    _add_common(p)
    _add_model(p)
    p.add_argument("--sampler", choices=SAMPLERS, help="overrides grid.sampler")
    p.add_argument("--steps", type=int, metavar="N", help="overrides grid.n_steps")
    p.add_argument("--n-samples", type=int, metavar="N", help="overrides grid.n_samples")

    p = sub.add_parser("nll", help="NLL upper bound via the probability-flow ODE")
    _add_common(p)
    _add_model(p)

    p = sub.add_parser("compare", help="distance to data for LT vs EM over step counts")
    _add_common(p)
    _add_model(p)
    p.add_argument("--steps", type=int, nargs="+", metavar="N", help="overrides eval.compare_steps")
    p.add_argument("--samplers", nargs="+", choices=SAMPLERS, default=["lt", "em"])

    p = sub.add_parser("evolve", help="q/p/s marginal histograms along the generation path")
    _add_common(p)
    _add_model(p)
    p.add_argument("--sampler", choices=SAMPLERS, help="overrides grid.sampler")
    p.add_argument("--snapshots", type=int, metavar="N", help="overrides eval.n_snapshots")

    p = sub.add_parser("ablate", help="(L, alpha) sensitivity sweep")
    _add_common(p)
    p.add_argument("--L", dest="l_values", type=float, nargs="+", default=[1.0, 2.0, 4.0])
    p.add_argument("--alpha", dest="alpha_values", type=float, nargs="+", default=[0.02, 0.04, 0.08])
    p.add_argument("--no-progress", action="store_true", help="disable the progress bar")
    return parser


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)
