"""Command-line entry point of imblab.

This module builds the argument parser, registers the subcommands of
:mod:`imblab.commands` and maps failures to exit codes: 0 on success
(diverged training runs included), 2 for configuration errors and 3 for
numeric or other internal failures.
"""

import argparse
import logging
import sys
from collections.abc import Sequence

import imblab
import imblab.commands.dataset as dataset
import imblab.commands.replicate as replicate
import imblab.commands.run as run
import imblab.commands.theory as theory
from imblab.errors import ConfigError, NumericError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def build_parser() -> argparse.ArgumentParser:
    """Parser with every subcommand registered."""
    parser = argparse.ArgumentParser(
        prog="imblab",
        description="Heavy-tailed class imbalance experiments: datasets, "
        "optimizers and continuous-time theory.",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug logging"
    )
    parser.add_argument(
        "--version", action="version", version=imblab.__version__
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    ###############
    # Subcommands
    ################
    run.get_subcommand(subparsers)
    theory.get_subcommand(subparsers)
    replicate.get_subcommand(subparsers)
    dataset.get_subcommand(subparsers)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line and return its exit code.

    Parameters
    ----------
    argv : Sequence[str] | None, optional
        arguments without the program name, by default ``sys.argv[1:]``

    Returns
    -------
    int
        0 on success, 2 for a configuration error, 3 for a failure

    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
    )
    try:
        args.func(args)
    except ConfigError as err:
        logger.error("Invalid configuration: %s", err)
        return EXIT_CONFIG
    except NumericError as err:
        logger.error("Numeric failure: %s", err)
        return EXIT_NUMERIC
    except Exception:
        logger.exception("Unexpected failure")
        return EXIT_NUMERIC
    return EXIT_OK


###############
# Driver
################
if __name__ == "__main__":
    sys.exit(main())
