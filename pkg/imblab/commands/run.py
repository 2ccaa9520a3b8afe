"""The ``run`` subcommand: execute an experiment config.

Every experiment writes into one output directory:

- ``config.resolved.json``: the validated config, enough to rerun
- ``dataset/``: the generated dataset (softmax experiments)
- ``trajectory_<optimizer>.csv`` and ``mean_p_<optimizer>.csv``
- ``blockstats_<optimizer>.csv`` and ``correlation_<optimizer>.csv``
- ``gridsearch_<optimizer>.csv`` for grid-searched step sizes
- ``models/<optimizer>/``: final models
- ``MANIFEST.json``: sha256 of every other file
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from imblab import utils
from imblab.analysis import (
    correlation_frame,
    correlation_over_trajectory,
    flagged_correlation_frame,
    negated_path_stats,
    offdiag_heatmap_sample,
)
from imblab.commands.theory import theory_frame
from imblab.config import (
    ExperimentConfig,
    OptimizerSpec,
    build_dataset,
    load_config,
)
from imblab.dataset import Dataset, save_dataset
from imblab.errors import ConfigError, NoViableStepSizeError
from imblab.model import LinearModel, save_model
from imblab.optim import (
    QuadraticObjective,
    TrainConfig,
    TrajectoryLog,
    grid_search,
    grid_search_objective,
    run_loop,
    train,
)
from imblab.theory import quadratic_table

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "config.resolved.json"


def get_subcommand(subparsers: argparse._SubParsersAction) -> None:
    """Add the ``run`` parser.

    Parameters
    ----------
    subparsers : argparse._SubParsersAction
        subparsers of the main parser

    """
    parser = subparsers.add_parser(
        "run", help="run an experiment config file"
    )
    parser.add_argument("config", type=Path, help="path to the YAML config")
    parser.add_argument(
        "--out",
        type=Path,
        default=None,
        help="output directory (default: output_dir of the config, "
        "or results/<name>)",
    )
    parser.set_defaults(func=run_command)


def run_command(args: argparse.Namespace) -> None:
    """Load the config and run it."""
    config = load_config(args.config)
    run_experiment(
        config,
        output_dir_for(config, args.out),
        base_dir=args.config.parent,
    )


def output_dir_for(config: ExperimentConfig, out: Path | None) -> Path:
    """Output directory: ``out``, the config's own, or results/<name>."""
    if out is not None:
        return out
    if config.output_dir is not None:
        return Path(config.output_dir)
    return Path("results") / config.name


def run_experiment(
    config: ExperimentConfig,
    output_dir: Path,
    base_dir: Path | None = None,
) -> dict[str, str]:
    """Run an experiment and write its outputs and manifest.

    Parameters
    ----------
    config : ExperimentConfig
        validated experiment
    output_dir : Path
        directory to write to (created if needed)
    base_dir : Path | None, optional
        directory relative dataset paths are resolved against

    Returns
    -------
    dict[str, str]
        manifest: relative file path -> sha256

    """
    output_dir.mkdir(parents=True, exist_ok=True)
    utils.write_json(output_dir / RESOLVED_CONFIG, config.to_dict())
    logger.info("Running %s experiment %r", config.kind, config.name)

    if config.kind == "softmax":
        _run_softmax(config, output_dir, base_dir)
    elif config.kind == "quadratic":
        _run_quadratic(config, output_dir)
    else:
        assert config.theory is not None
        utils.write_table(
            theory_frame(config.theory), output_dir / "theory.csv"
        )

    hashes = utils.write_manifest(output_dir)
    logger.info("Wrote %d files to %s", len(hashes), output_dir)
    return hashes


###############
# Softmax
################
def _train_config(
    config: ExperimentConfig, spec: OptimizerSpec, record: bool
) -> TrainConfig:
    steps = spec.steps or config.steps
    return TrainConfig(
        optimizer=spec.state(),
        steps=steps,
        batch=config.batch.build(),
        reweight=spec.reweight,
        checkpoints=config.checkpoints.schedule(steps),
        seed=config.seeds[0],
        block_stats=record and config.analysis.block_stats,
        keep_params=record and config.analysis.negated_path,
    )


def _train_optimizer(
    config: ExperimentConfig,
    spec: OptimizerSpec,
    init: LinearModel,
    dataset: Dataset,
    output_dir: Path,
) -> TrajectoryLog:
    train_config = _train_config(config, spec, record=True)
    if spec.alpha is not None:
        return train(init, dataset, train_config)

    search = config.grid_search
    assert search is not None
    try:
        result = grid_search(
            init,
            dataset,
            _train_config(config, spec, record=False),
            search.seeds,
            grid=search.grid,
            refine=search.refine,
        )
    except NoViableStepSizeError:
        alpha = min(search.grid)
        logger.warning(
            "%s diverged for every step size; reporting alpha=%g",
            spec.label,
            alpha,
        )
    else:
        utils.write_table(
            result.summary, output_dir / f"gridsearch_{spec.label}.csv"
        )
        alpha = result.best_alpha

    # rerun the selected step size, recording everything
    train_config.optimizer = spec.state(alpha)
    return train(init, dataset, train_config)


def _write_correlation(
    log: TrajectoryLog,
    config: ExperimentConfig,
    path: Path,
    stats: list | None = None,
) -> None:
    rule = config.analysis.correlation.build()
    try:
        reports = correlation_over_trajectory(
            log if stats is None else stats, rule
        )
    except ValueError as err:
        logger.warning("No correlation for %s: %s", path.name, err)
        utils.write_table(flagged_correlation_frame(log, rule), path)
        return
    utils.write_table(correlation_frame(reports), path)


def _check_heatmap(config: ExperimentConfig, dataset: Dataset) -> None:
    heatmap = config.analysis.heatmap
    if heatmap is None:
        return
    if heatmap.n_classes > dataset.c:
        raise ConfigError(
            "analysis.heatmap.n_classes",
            f"the dataset has only {dataset.c} classes",
        )
    if heatmap.n_dims > dataset.d:
        raise ConfigError(
            "analysis.heatmap.n_dims",
            f"the dataset has only {dataset.d} input dimensions",
        )


def _run_softmax(
    config: ExperimentConfig, output_dir: Path, base_dir: Path | None
) -> None:
    assert config.dataset is not None
    dataset = build_dataset(config.dataset, base_dir)
    _check_heatmap(config, dataset)
    save_dataset(dataset, output_dir / "dataset")
    init = config.model.build(dataset.c, dataset.d)
    analysis = config.analysis

    for spec in config.optimizers:
        label = spec.label
        log = _train_optimizer(config, spec, init, dataset, output_dir)
        utils.write_table(
            log.to_frame(), output_dir / f"trajectory_{label}.csv"
        )
        utils.write_table(
            log.mean_p_frame(), output_dir / f"mean_p_{label}.csv"
        )

        if analysis.block_stats:
            utils.write_table(
                log.stats_frame(), output_dir / f"blockstats_{label}.csv"
            )
            _write_correlation(
                log, config, output_dir / f"correlation_{label}.csv"
            )
            if analysis.negated_path and not log.diverged:
                _write_correlation(
                    log,
                    config,
                    output_dir / f"correlation_negated_{label}.csv",
                    stats=negated_path_stats(log, dataset, init.has_bias),
                )

        if log.model is None or log.diverged:
            continue
        if analysis.heatmap is not None:
            for sampling in analysis.heatmap.sampling:
                sample = offdiag_heatmap_sample(
                    log.model,
                    dataset,
                    n_classes=analysis.heatmap.n_classes,
                    n_dims=analysis.heatmap.n_dims,
                    sampling=sampling,
                    seed=analysis.heatmap.seed,
                )
                utils.write_table(
                    sample.to_frame(),
                    output_dir / f"heatmap_{label}_{sampling}.csv",
                )
        if analysis.save_models:
            save_model(log.model, output_dir / "models" / label)


###############
# Quadratic
################
def _run_quadratic(config: ExperimentConfig, output_dir: Path) -> None:
    q = config.quadratic
    assert q is not None
    utils.write_table(
        quadratic_table(q.alpha, q.pi, q.w0, q.steps),
        output_dir / "quadratic.csv",
    )

    objective = QuadraticObjective(q.pi)
    start = np.asarray(q.w0, dtype=np.float64)
    search = config.grid_search
    for spec in config.optimizers:
        train_config = _train_config(config, spec, record=False)
        if spec.alpha is None:
            assert search is not None
            try:
                result = grid_search_objective(
                    objective,
                    start,
                    train_config,
                    search.seeds,
                    grid=search.grid,
                    refine=search.refine,
                )
            except NoViableStepSizeError:
                logger.warning("%s diverged for every step size", spec.label)
                train_config.optimizer = spec.state(min(search.grid))
            else:
                utils.write_table(
                    result.summary,
                    output_dir / f"gridsearch_{spec.label}.csv",
                )
                train_config.optimizer = spec.state(result.best_alpha)
        log = run_loop(objective, start, train_config)
        utils.write_table(
            log.to_frame(), output_dir / f"trajectory_{spec.label}.csv"
        )
