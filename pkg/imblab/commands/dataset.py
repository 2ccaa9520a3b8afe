"""The ``dataset gen`` subcommand: write a dataset without training."""

import argparse
import logging
from pathlib import Path

import yaml

from imblab import utils
from imblab.config import build_dataset, parse_dataset_spec
from imblab.dataset import save_dataset
from imblab.errors import ConfigError

logger = logging.getLogger(__name__)


def get_subcommand(subparsers: argparse._SubParsersAction) -> None:
    """Add the ``dataset`` parser and its ``gen`` action.

    Parameters
    ----------
    subparsers : argparse._SubParsersAction
        subparsers of the main parser

    """
    parser = subparsers.add_parser("dataset", help="dataset tools")
    actions = parser.add_subparsers(dest="dataset_action", required=True)
    gen = actions.add_parser(
        "gen", help="generate a dataset from a YAML dataset spec"
    )
    gen.add_argument(
        "spec",
        type=Path,
        help="YAML file with the dataset fields, or an experiment config",
    )
    gen.add_argument("--out", type=Path, required=True, help="directory")
    gen.set_defaults(func=generate_command)


def generate_command(args: argparse.Namespace) -> None:
    """Build the dataset of a spec file and save it with a manifest."""
    try:
        content = utils.load_yaml(args.spec)
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError("<file>", f"cannot read {args.spec}: {err}") from err
    spec = parse_dataset_spec(content)
    dataset = build_dataset(spec, args.spec.parent)
    save_dataset(dataset, args.out)
    utils.write_manifest(args.out)
    logger.info(
        "Wrote %s dataset (n=%d, d=%d, c=%d) to %s",
        spec.generator,
        dataset.n,
        dataset.d,
        dataset.c,
        args.out,
    )
