"""The ``replicate`` subcommand: run one of the checked-in configs."""

import argparse
import logging
from importlib.resources import as_file, files
from pathlib import Path

from imblab.commands.run import run_experiment
from imblab.config import load_config

logger = logging.getLogger(__name__)

# replication name -> config file in imblab/configs
REPLICATIONS = {
    "linear": "linear.yaml",
    "opts": "opts.yaml",
    "grad-hess": "grad_hess.yaml",
    "quadratic": "quadratic.yaml",
    "theory": "theory.yaml",
    "reweight": "reweight.yaml",
    "input-dist": "input_dist.yaml",
}


def get_subcommand(subparsers: argparse._SubParsersAction) -> None:
    """Add the ``replicate`` parser.

    Parameters
    ----------
    subparsers : argparse._SubParsersAction
        subparsers of the main parser

    """
    parser = subparsers.add_parser(
        "replicate", help="run a checked-in replication config"
    )
    parser.add_argument("name", choices=sorted(REPLICATIONS))
    parser.add_argument(
        "--out",
        type=Path,
        default=None,
        help="output directory (default: results/<name>)",
    )
    parser.set_defaults(func=replicate_command)


def replicate_command(args: argparse.Namespace) -> None:
    """Run the config of a replication."""
    out = args.out if args.out is not None else Path("results") / args.name
    resource = files("imblab") / "configs" / REPLICATIONS[args.name]
    with as_file(resource) as path:
        config = load_config(path)
        run_experiment(config, out, base_dir=path.parent)
