"""The ``theory`` subcommand: gradient flow against RK4 and sign descent."""

import argparse
import logging
from pathlib import Path

import pandas as pd

from imblab import utils
from imblab.config import SCHEMA_VERSION, ExperimentConfig, TheorySpec
from imblab.errors import ConfigError
from imblab.theory import theory_table

logger = logging.getLogger(__name__)


def get_subcommand(subparsers: argparse._SubParsersAction) -> None:
    """Add the ``theory`` parser.

    Parameters
    ----------
    subparsers : argparse._SubParsersAction
        subparsers of the main parser

    """
    parser = subparsers.add_parser(
        "theory",
        help="tabulate the gradient flow, its RK4 integration and "
        "sign descent on the simple imbalanced setting",
    )
    parser.add_argument("--c", type=int, required=True, help="classes")
    parser.add_argument(
        "--pi", type=float, required=True, help="class frequency in (0, 1]"
    )
    parser.add_argument(
        "--t-max", type=float, required=True, help="last time"
    )
    parser.add_argument(
        "--dt", type=float, required=True, help="largest RK4 step"
    )
    parser.add_argument(
        "--n-points", type=int, default=101, help="rows of the table"
    )
    parser.add_argument("--out", type=Path, required=True, help="CSV path")
    parser.set_defaults(func=theory_command)


def theory_frame(spec: TheorySpec) -> pd.DataFrame:
    """Stacked :func:`~imblab.theory.theory_table` of every (c, pi)."""
    frames = []
    for c, pi, t_max, dt in spec.cases():
        logger.info("Gradient flow c=%d pi=%g up to t=%g", c, pi, t_max)
        frames.append(theory_table(c, pi, t_max, dt, spec.n_points))
    return pd.concat(frames, ignore_index=True)


def theory_command(args: argparse.Namespace) -> None:
    """Validate the flags and write the table."""
    content = {
        "schema_version": SCHEMA_VERSION,
        "kind": "theory",
        "theory": {
            "c": [args.c],
            "pi": [args.pi],
            "t_max": args.t_max,
            "dt": args.dt,
            "n_points": args.n_points,
        },
    }
    try:
        config = ExperimentConfig.from_dict(content)
    except ConfigError as err:
        # theory.c[0] -> --c
        key = err.field.split(".")[-1].split("[")[0]
        raise ConfigError(f"--{key.replace('_', '-')}", err.message) from err
    assert config.theory is not None

    args.out.parent.mkdir(parents=True, exist_ok=True)
    utils.write_table(theory_frame(config.theory), args.out)
    logger.info("Wrote %s", args.out)
