"""Post-hoc analytics on trained models and trajectory logs.

Gradient/Hessian correlation across classes, mean predicted probability
per frequency group and sampled Hessian entries for heatmaps.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike

from imblab.dataset import Dataset, FrequencyGroups
from imblab.errors import (
    SubsetTooSmallError,
    UndefinedCorrelationError,
)
from imblab.model import (
    BlockStats,
    LinearModel,
    group_means,
    prepare_problem,
    stats_from_params,
)
from imblab.optim import TrajectoryLog

logger = logging.getLogger(__name__)

MIN_CLASSES = 3

HeatmapSampling = Literal["uniform", "log_uniform"]


###############
# Correlation
################
@dataclass(frozen=True)
class SubsetRule:
    """Keep the classes with pi_k * c >= threshold (times log c if set).

    The default keeps classes with pi_k * c >= log c. A threshold of 0
    keeps every class.
    """

    threshold: float = 1.0
    times_log_c: bool = True

    def describe(self) -> str:
        """Short description written next to the results."""
        if self.threshold == 0:
            return "all"
        scale = "*log(c)" if self.times_log_c else ""
        return f"pi*c>={self.threshold:g}{scale}"

    def select(self, freq: np.ndarray) -> np.ndarray:
        """Indices of the classes kept, in class order."""
        c = freq.size
        bound = self.threshold * (math.log(c) if self.times_log_c else 1.0)
        return np.flatnonzero(freq * c >= bound)


@dataclass(frozen=True)
class CorrelationReport:
    """Log-log correlation of gradient norms and Hessian traces.

    ``pearson_log`` is NaN when the correlation is undefined (e.g. all
    Hessian traces equal at initialization).
    """

    step: int
    pearson_log: float
    n_classes_used: int
    subset_rule: str

    @property
    def defined(self) -> bool:
        """Whether the correlation could be computed."""
        return not math.isnan(self.pearson_log)


def pearson_log_correlation(xs: ArrayLike, ys: ArrayLike) -> float:
    """Pearson correlation of (log xs, log ys).

    Parameters
    ----------
    xs : ArrayLike
        positive values
    ys : ArrayLike
        positive values, as many as ``xs`` (at least 3)

    Returns
    -------
    float
        correlation in [-1, 1]

    Raises
    ------
    UndefinedCorrelationError
        if either log vector has zero variance

    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("xs and ys must be vectors of the same length")
    if x.size < MIN_CLASSES:
        raise ValueError(f"need at least {MIN_CLASSES} points")
    if np.any(~(x > 0)) or np.any(~(y > 0)):
        raise ValueError("log correlation needs positive values")

    log_x, log_y = np.log(x), np.log(y)
    for name, logs in (("xs", log_x), ("ys", log_y)):
        scale = max(1.0, float(np.max(np.abs(logs))))
        if np.ptp(logs) <= 1e-12 * scale:
            raise UndefinedCorrelationError(f"{name} has zero variance")
    r = float(np.corrcoef(log_x, log_y)[0, 1])
    return min(1.0, max(-1.0, r))


def correlation_at(
    step: int, stats: BlockStats, rule: SubsetRule = SubsetRule()
) -> CorrelationReport:
    """Correlation report for the BlockStats of one checkpoint."""
    keep = rule.select(stats.freq)
    if keep.size < MIN_CLASSES:
        raise SubsetTooSmallError(
            f"only {keep.size} classes satisfy {rule.describe()}"
        )
    try:
        r = pearson_log_correlation(
            stats.grad_norm[keep], stats.hess_trace[keep]
        )
    except ValueError as err:
        logger.debug("Correlation undefined at step %d: %s", step, err)
        r = math.nan
    return CorrelationReport(
        step=step,
        pearson_log=r,
        n_classes_used=int(keep.size),
        subset_rule=rule.describe(),
    )


def _checkpoint_stats(
    trajectory: TrajectoryLog | Sequence[tuple[int, BlockStats]],
) -> list[tuple[int, BlockStats]]:
    if isinstance(trajectory, TrajectoryLog):
        return [
            (r.step, r.stats)
            for r in trajectory.records
            if r.stats is not None
        ]
    return list(trajectory)


def correlation_over_trajectory(
    trajectory: TrajectoryLog | Sequence[tuple[int, BlockStats]],
    rule: SubsetRule = SubsetRule(),
) -> list[CorrelationReport]:
    """One correlation report per checkpoint with BlockStats.

    Parameters
    ----------
    trajectory : TrajectoryLog | Sequence[tuple[int, BlockStats]]
        a log recorded with block statistics, or (step, stats) pairs
    rule : SubsetRule, optional
        which classes enter the correlation, by default pi_k c >= log c

    Returns
    -------
    list[CorrelationReport]
        reports in checkpoint order; undefined correlations are NaN

    Raises
    ------
    SubsetTooSmallError
        if fewer than 3 classes satisfy the rule

    """
    checkpoints = _checkpoint_stats(trajectory)
    if len(checkpoints) < 2:
        raise ValueError("need at least 2 checkpoints with BlockStats")
    return [correlation_at(step, stats, rule) for step, stats in checkpoints]


def negated_path_stats(
    trajectory: TrajectoryLog, dataset: Dataset, bias: bool
) -> list[tuple[int, BlockStats]]:
    """BlockStats evaluated at -W_t for every checkpoint with parameters.

    The log must have been recorded with ``keep_params``.
    """
    template = LinearModel.zeros(dataset.c, dataset.d, bias=bias)
    problem = prepare_problem(template, dataset)
    stats = [
        (r.step, stats_from_params(problem, -r.params, dataset.freq.probs))
        for r in trajectory.records
        if r.params is not None
    ]
    if not stats:
        raise ValueError("the log holds no parameters; train with keep_params")
    return stats


def correlation_frame(reports: Sequence[CorrelationReport]) -> pd.DataFrame:
    """Columns ``step,pearson_log,n_classes_used,subset_rule``."""
    return pd.DataFrame(
        {
            "step": [r.step for r in reports],
            "pearson_log": [r.pearson_log for r in reports],
            "n_classes_used": [r.n_classes_used for r in reports],
            "subset_rule": [r.subset_rule for r in reports],
        }
    )


def flagged_correlation_frame(
    trajectory: TrajectoryLog, rule: SubsetRule
) -> pd.DataFrame:
    """Correlation table of NaN rows for a subset rule that keeps < 3."""
    steps = [step for step, _ in _checkpoint_stats(trajectory)]
    return correlation_frame(
        [CorrelationReport(s, math.nan, 0, rule.describe()) for s in steps]
    )


###############
# Predicted probabilities
################
def mean_p_per_group(
    model: LinearModel,
    dataset: Dataset,
    groups: FrequencyGroups | None = None,
) -> np.ndarray:
    """Mean correct-class probability over the samples of every group.

    Groups without samples are NaN.
    """
    groups = dataset.groups if groups is None else groups
    problem = prepare_problem(model, dataset)
    correct = problem.correct_class_probs(model.params())
    values = group_means(correct, problem.labels, problem.weights, groups)
    if np.any(np.isnan(values)):
        logger.warning("Some frequency groups have no samples")
    return values


###############
# Off-diagonal heatmap
################
@dataclass(frozen=True)
class HeatmapSample:
    """Sampled Hessian entries on a grid of (class, input dim) pairs.

    Row and column index a * n_dims + i refers to class ``classes[a]`` and
    input dimension ``dims[i]``.
    """

    classes: np.ndarray
    dims: np.ndarray
    values: np.ndarray

    def log10_abs(self) -> np.ndarray:
        """log10 of the absolute entries (-inf for exact zeros)."""
        with np.errstate(divide="ignore"):
            return np.log10(np.abs(self.values))

    def block_means(self) -> tuple[float, float]:
        """Mean |entry| over diagonal blocks and over off-diagonal ones."""
        n_cls, n_dims = self.classes.size, self.dims.size
        blocks = np.abs(self.values).reshape(n_cls, n_dims, n_cls, n_dims)
        same_class = np.eye(n_cls, dtype=bool)[:, None, :, None]
        same_class = np.broadcast_to(same_class, blocks.shape)
        diag = float(blocks[same_class].mean())
        offdiag = float(blocks[~same_class].mean()) if n_cls > 1 else 0.0
        return diag, offdiag

    def to_frame(self) -> pd.DataFrame:
        """Columns ``row,col,log10_abs``, row-major."""
        size = self.values.shape[0]
        rows, cols = np.divmod(np.arange(size * size), size)
        return pd.DataFrame(
            {"row": rows, "col": cols, "log10_abs": self.log10_abs().ravel()}
        )


def _sample_classes(
    c: int, n_classes: int, sampling: HeatmapSampling, rng: np.random.Generator
) -> np.ndarray:
    if sampling == "uniform":
        probs = None
    elif sampling == "log_uniform":
        # classes are sorted by frequency, so favour the frequent ones
        probs = 1.0 / np.arange(1, c + 1)
        probs /= probs.sum()
    else:
        raise ValueError(f"unknown sampling {sampling!r}")
    return np.sort(rng.choice(c, size=n_classes, replace=False, p=probs))


def offdiag_heatmap_sample(
    model: LinearModel,
    dataset: Dataset,
    n_classes: int = 40,
    n_dims: int = 40,
    sampling: HeatmapSampling = "uniform",
    seed: int = 0,
) -> HeatmapSample:
    """Sample Hessian entries across and within class blocks.

    Entry ((k, i), (j, l)) of the Hessian is the weighted sample mean of
    p_k (1{k=j} - p_j) x_i x_l.

    Parameters
    ----------
    model : LinearModel
        the model
    dataset : Dataset
        the data
    n_classes : int, optional
        classes to sample (at most c), by default 40
    n_dims : int, optional
        input dimensions to sample (at most d), by default 40
    sampling : {"uniform", "log_uniform"}, optional
        class sampling; log_uniform draws class k with weight 1/(k+1),
        by default "uniform"
    seed : int, optional
        sampling seed, by default 0

    Returns
    -------
    HeatmapSample
        (n_classes * n_dims)^2 sampled entries

    """
    if not 1 <= n_classes <= model.c:
        raise ValueError(f"n_classes must lie in [1, {model.c}]")
    if not 1 <= n_dims <= model.d:
        raise ValueError(f"n_dims must lie in [1, {model.d}]")
    problem = prepare_problem(model, dataset)
    rng = np.random.default_rng(seed)
    classes = _sample_classes(model.c, n_classes, sampling, rng)
    dims = np.sort(rng.choice(model.d, size=n_dims, replace=False))

    probs = problem.probs(model.params())[:, classes]
    scale = problem.weights / problem.total_weight
    # coef[s, a, b] = w_s p_a (1{a=b} - p_b)
    coef = (
        probs[:, :, None] * (np.eye(n_classes)[None] - probs[:, None, :])
    ) * scale[:, None, None]
    x = dataset.inputs[:, dims]
    outer = (x[:, :, None] * x[:, None, :]).reshape(x.shape[0], -1)
    entries = coef.reshape(x.shape[0], -1).T @ outer
    values = (
        entries.reshape(n_classes, n_classes, n_dims, n_dims)
        .transpose(0, 2, 1, 3)
        .reshape(n_classes * n_dims, n_classes * n_dims)
    )
    return HeatmapSample(classes=classes, dims=dims, values=values)
