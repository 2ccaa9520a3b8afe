"""Optimizers, loss reweighting, step-size grid search and training loop.

GD, normalized GD and sign descent share the heavy-ball update

    m_t = beta * m_{t-1} + d_t,    x_{t+1} = x_t - alpha * m_t,

with d_t the gradient, the gradient over its global l2 norm, or its sign.
Adam is the standard bias-corrected version.
"""

import logging
import math
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, NamedTuple, Protocol

import numpy as np
import pandas as pd

from imblab import utils
from imblab.dataset import Dataset, FrequencySpec
from imblab.errors import (
    NoViableStepSizeError,
    NumericError,
    ShapeMismatchError,
)
from imblab.model import (
    BlockStats,
    LinearModel,
    SoftmaxProblem,
    group_means,
    stats_from_params,
)

logger = logging.getLogger(__name__)

Family = Literal["gd", "normalized_gd", "sign", "adam"]
FAMILIES: tuple[str, ...] = ("gd", "normalized_gd", "sign", "adam")

ReweightScheme = Literal["none", "inv_freq", "inv_sqrt_freq"]
REWEIGHT_SCHEMES: tuple[str, ...] = ("none", "inv_freq", "inv_sqrt_freq")

# Powers of 10 from 1e-6 to 1e1
DEFAULT_COARSE_GRID: tuple[float, ...] = tuple(
    10.0**e for e in range(-6, 2)
)


###############
# Updates
################
@dataclass(eq=False)
class OptimizerState:
    """Hyperparameters and buffers of one optimizer run.

    Buffers start as None and are zero-initialized with the parameter shape
    on the first step.
    """

    family: Family
    alpha: float
    beta: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum_buffer: np.ndarray | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    step_count: int = 0

    def __post_init__(self) -> None:
        """Validate the hyperparameters."""
        if self.family not in FAMILIES:
            raise ValueError(f"unknown optimizer family {self.family!r}")
        if self.alpha < 0:
            raise ValueError("the step size must be non-negative")
        if not 0 <= self.beta < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("Adam epsilon must be positive")

    def fresh(self, alpha: float | None = None) -> "OptimizerState":
        """Copy of the hyperparameters with empty buffers."""
        return replace(
            self,
            alpha=self.alpha if alpha is None else alpha,
            momentum_buffer=None,
            adam_m=None,
            adam_v=None,
            step_count=0,
        )

    def step(self, gradient: np.ndarray, params: np.ndarray) -> np.ndarray:
        """Apply one update and return the new parameters."""
        if self.family == "adam":
            return adam_step(self, gradient, params)
        return momentum_step(
            self, direction(gradient, self.family), params
        )


def direction(gradient: np.ndarray, family: Family) -> np.ndarray:
    """Update direction d_t of the momentum family.

    Parameters
    ----------
    gradient : np.ndarray
        finite gradient, any shape
    family : {"gd", "normalized_gd", "sign"}
        which direction to take

    Returns
    -------
    np.ndarray
        the gradient, the gradient over its global l2 norm (zero for a zero
        gradient), or its elementwise sign with sign(0) = 0

    """
    if family == "gd":
        return gradient
    if family == "normalized_gd":
        norm = float(np.linalg.norm(gradient))
        if norm == 0.0:
            return np.zeros_like(gradient)
        return gradient / norm
    if family == "sign":
        return np.sign(gradient)
    raise ValueError(f"no momentum direction for family {family!r}")


def momentum_step(
    state: OptimizerState, d: np.ndarray, params: np.ndarray
) -> np.ndarray:
    """Heavy-ball update m = beta m + d, x = x - alpha m."""
    if state.family == "adam":
        raise ValueError("use adam_step for the adam family")
    if state.momentum_buffer is None:
        state.momentum_buffer = np.zeros_like(params)
    state.momentum_buffer = state.beta * state.momentum_buffer + d
    state.step_count += 1
    return params - state.alpha * state.momentum_buffer


def adam_step(
    state: OptimizerState, gradient: np.ndarray, params: np.ndarray
) -> np.ndarray:
    """Bias-corrected Adam update."""
    if state.family != "adam":
        raise ValueError("adam_step needs the adam family")
    if state.adam_m is None or state.adam_v is None:
        state.adam_m = np.zeros_like(params)
        state.adam_v = np.zeros_like(params)
    state.step_count += 1
    t = state.step_count
    beta1, beta2 = state.adam_beta1, state.adam_beta2

    state.adam_m = beta1 * state.adam_m + (1.0 - beta1) * gradient
    state.adam_v = beta2 * state.adam_v + (1.0 - beta2) * (gradient * gradient)
    m_hat = state.adam_m / (1.0 - beta1**t)
    v_hat = state.adam_v / (1.0 - beta2**t)
    return params - state.alpha * m_hat / (np.sqrt(v_hat) + state.adam_eps)


def reweight_weights(
    freq: FrequencySpec, scheme: ReweightScheme
) -> np.ndarray:
    """Per-class loss weights, rescaled to an average sample weight of 1.

    Parameters
    ----------
    freq : FrequencySpec
        class frequencies; all must be positive
    scheme : {"none", "inv_freq", "inv_sqrt_freq"}
        weights 1, 1/pi_k or 1/sqrt(pi_k) before rescaling

    Returns
    -------
    np.ndarray
        one weight per class with sum_k pi_k w_k = 1

    """
    if scheme not in REWEIGHT_SCHEMES:
        raise ValueError(f"unknown reweighting scheme {scheme!r}")
    if np.any(freq.probs <= 0):
        raise ValueError("reweighting needs every class to have samples")
    if scheme == "none":
        return np.ones(freq.c)
    if scheme == "inv_freq":
        weights = 1.0 / freq.probs
    else:
        weights = 1.0 / np.sqrt(freq.probs)
    return weights / (freq.probs @ weights)


###############
# Objectives
################
class Evaluation(NamedTuple):
    """Quantities recorded at a checkpoint."""

    loss: float
    group_losses: np.ndarray
    group_mean_p: np.ndarray
    stats: BlockStats | None


class Objective(Protocol):
    """What the training loop needs from a problem."""

    num_samples: int | None
    num_groups: int

    def gradient(
        self, params: np.ndarray, rows: np.ndarray | None = None
    ) -> np.ndarray:
        """Gradient of the optimized loss, on a minibatch if given."""
        ...

    def evaluate(self, params: np.ndarray, with_stats: bool) -> Evaluation:
        """Loss and per-group losses reported at a checkpoint."""
        ...


class SoftmaxObjective:
    """Softmax linear model on a dataset.

    The optimizer sees the loss reweighted by ``class_weights``; the
    reported losses are always the unweighted ones.

    Parameters
    ----------
    dataset : Dataset
        the data; its groups are used for reporting
    bias : bool
        whether the model has a bias vector
    class_weights : np.ndarray | None, optional
        per-class loss weights, by default None

    """

    def __init__(
        self,
        dataset: Dataset,
        bias: bool,
        class_weights: np.ndarray | None = None,
    ) -> None:
        self.dataset = dataset
        self.bias = bias
        self.report = SoftmaxProblem.from_dataset(dataset, bias)
        if class_weights is None:
            self.train = self.report
        else:
            self.train = SoftmaxProblem.from_dataset(
                dataset, bias, class_weights
            )
        self.num_samples: int | None = dataset.n
        self.num_groups = dataset.groups.num_groups

    def gradient(
        self, params: np.ndarray, rows: np.ndarray | None = None
    ) -> np.ndarray:
        """Gradient of the (reweighted) mean loss."""
        problem = self.train if rows is None else self.train.subset(rows)
        return problem.gradient(params)

    def evaluate(self, params: np.ndarray, with_stats: bool) -> Evaluation:
        """Unweighted loss, group losses and group mean p."""
        report = self.report
        losses = report.per_sample_losses(params)
        probs = report.probs(params)
        groups = self.dataset.groups
        return Evaluation(
            loss=float(losses @ report.weights / report.total_weight),
            group_losses=group_means(
                losses, report.labels, report.weights, groups
            ),
            group_mean_p=group_means(
                report.correct_class_probs(params, probs=probs),
                report.labels,
                report.weights,
                groups,
            ),
            stats=(
                stats_from_params(report, params, self.dataset.freq.probs)
                if with_stats
                else None
            ),
        )


class QuadraticObjective:
    """Separable weighted quadratic sum_k pi_k * w_k^2 / 2.

    Every coordinate is its own reporting group, with loss w_k^2 / 2.
    """

    def __init__(self, pi: Sequence[float]) -> None:
        self.pi = np.asarray(pi, dtype=np.float64)
        self.num_samples: int | None = None
        self.num_groups = int(self.pi.size)

    def gradient(
        self, params: np.ndarray, rows: np.ndarray | None = None
    ) -> np.ndarray:
        """Gradient pi * w."""
        return self.pi * params

    def evaluate(self, params: np.ndarray, with_stats: bool) -> Evaluation:
        """Weighted loss and per-coordinate losses."""
        per_coordinate = 0.5 * params * params
        return Evaluation(
            loss=float(self.pi @ per_coordinate),
            group_losses=per_coordinate,
            group_mean_p=np.full(self.num_groups, np.nan),
            stats=None,
        )


###############
# Training
################
@dataclass(frozen=True)
class BatchSpec:
    """Full-batch gradients, or minibatches of ``size`` samples."""

    kind: Literal["full", "minibatch"] = "full"
    size: int | None = None

    def __post_init__(self) -> None:
        """Check the minibatch size."""
        if self.kind not in ("full", "minibatch"):
            raise ValueError(f"unknown batch kind {self.kind!r}")
        if self.kind == "minibatch" and (self.size is None or self.size < 1):
            raise ValueError("minibatches need a positive size")


@dataclass(eq=False)
class TrainConfig:
    """Settings of one training run.

    Steps 0 and ``steps`` are always recorded in addition to
    ``checkpoints``.
    """

    optimizer: OptimizerState
    steps: int
    batch: BatchSpec = field(default_factory=BatchSpec)
    reweight: ReweightScheme = "none"
    checkpoints: tuple[int, ...] = ()
    seed: int = 0
    block_stats: bool = False
    keep_params: bool = False

    def __post_init__(self) -> None:
        """Validate steps, checkpoints and the reweighting scheme."""
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if any(t < 0 or t > self.steps for t in self.checkpoints):
            raise ValueError(f"checkpoints must lie in [0, {self.steps}]")
        if self.reweight not in REWEIGHT_SCHEMES:
            raise ValueError(f"unknown reweighting scheme {self.reweight!r}")

    def schedule(self) -> list[int]:
        """Sorted checkpoint steps, including 0 and ``steps``."""
        return sorted({0, self.steps, *self.checkpoints})


@dataclass(eq=False)
class TrajectoryRecord:
    """State of a run at one checkpoint."""

    step: int
    loss: float
    group_losses: np.ndarray
    group_mean_p: np.ndarray
    alpha: float
    stats: BlockStats | None = None
    params: np.ndarray | None = None


@dataclass(eq=False)
class TrajectoryLog:
    """Checkpoint records of one run, ordered by step."""

    family: str
    alpha: float
    records: list[TrajectoryRecord] = field(default_factory=list)
    diverged: bool = False
    final_params: np.ndarray | None = None
    model: LinearModel | None = None

    @property
    def initial_loss(self) -> float:
        """Loss at step 0."""
        return self.records[0].loss

    @property
    def final_loss(self) -> float:
        """Loss at the last record (inf for a diverged run)."""
        return math.inf if self.diverged else self.records[-1].loss

    def unstable(self) -> bool:
        """Diverged, or some recorded loss above the initial loss."""
        if self.diverged:
            return True
        return any(r.loss > self.initial_loss for r in self.records)

    def to_frame(self) -> pd.DataFrame:
        """Columns ``step,loss,group_0,...,group_{G-1},alpha,diverged``."""
        return _records_frame(self, "loss", "group_losses")

    def mean_p_frame(self) -> pd.DataFrame:
        """Columns ``step,group_0,...,group_{G-1}`` of group mean p."""
        frame = _records_frame(self, None, "group_mean_p")
        return frame.drop(columns=["alpha", "diverged"])

    def stats_frame(self) -> pd.DataFrame:
        """BlockStats of every record that has them, stacked."""
        frames = [
            r.stats.to_frame(r.step) for r in self.records if r.stats
        ]
        if not frames:
            return pd.DataFrame(
                columns=[
                    "step",
                    "class",
                    "freq",
                    "grad_norm",
                    "hess_trace",
                    "mean_p",
                ]
            )
        return pd.concat(frames, ignore_index=True)


def _records_frame(
    log: TrajectoryLog, scalar: str | None, vector: str
) -> pd.DataFrame:
    rows = []
    for record in log.records:
        row: dict = {"step": record.step}
        if scalar is not None:
            row[scalar] = getattr(record, scalar)
        for g, value in enumerate(getattr(record, vector)):
            row[f"group_{g}"] = value
        row["alpha"] = log.alpha
        row["diverged"] = log.diverged
        rows.append(row)
    return pd.DataFrame(rows)


def geometric_checkpoints(steps: int, count: int) -> tuple[int, ...]:
    """About ``count`` log-spaced integer steps in [0, steps]."""
    if steps < 1 or count < 2:
        return (0, max(steps, 0))
    spaced = np.unique(np.round(np.geomspace(1, steps, count - 1)))
    return (0, *(int(t) for t in spaced))


def _batches(
    num_samples: int | None, batch: BatchSpec, seed: int
) -> Iterator[np.ndarray | None]:
    """Endless stream of row indices; None means the full batch."""
    if batch.kind == "full" or num_samples is None:
        while True:
            yield None
    assert batch.size is not None
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(num_samples)
        for start in range(0, num_samples, batch.size):
            yield order[start : start + batch.size]


def run_loop(
    objective: Objective, params: np.ndarray, config: TrainConfig
) -> TrajectoryLog:
    """Optimize an objective from ``params`` and record checkpoints.

    A run whose parameters or loss become non-finite is flagged as
    diverged; the loop stops and the records so far are returned, followed
    by one record with infinite loss at the step of divergence.

    Parameters
    ----------
    objective : Objective
        problem to optimize
    params : np.ndarray
        initial parameters (not modified)
    config : TrainConfig
        optimizer, steps, batching and checkpoints

    Returns
    -------
    TrajectoryLog
        checkpoint records and final parameters

    """
    state = config.optimizer.fresh()
    log = TrajectoryLog(family=state.family, alpha=state.alpha)
    schedule = set(config.schedule())
    batches = _batches(objective.num_samples, config.batch, config.seed)
    params = np.array(params, dtype=np.float64)

    def record(step: int) -> bool:
        try:
            evaluation = objective.evaluate(params, config.block_stats)
        except NumericError:
            return False
        if not math.isfinite(evaluation.loss):
            return False
        log.records.append(
            TrajectoryRecord(
                step=step,
                loss=evaluation.loss,
                group_losses=evaluation.group_losses,
                group_mean_p=evaluation.group_mean_p,
                alpha=state.alpha,
                stats=evaluation.stats,
                params=params.copy() if config.keep_params else None,
            )
        )
        logger.debug("step %d: loss %.6g", step, evaluation.loss)
        return True

    def diverge(step: int) -> None:
        log.diverged = True
        log.records.append(
            TrajectoryRecord(
                step=step,
                loss=math.inf,
                group_losses=np.full(objective.num_groups, np.inf),
                group_mean_p=np.full(objective.num_groups, np.nan),
                alpha=state.alpha,
            )
        )
        logger.warning(
            "%s with alpha=%g diverged at step %d",
            state.family,
            state.alpha,
            step,
        )

    if not record(0):
        diverge(0)
        return log

    for step in range(1, config.steps + 1):
        try:
            gradient = objective.gradient(params, next(batches))
            params = state.step(gradient, params)
        except NumericError:
            diverge(step)
            break
        if not np.all(np.isfinite(params)):
            diverge(step)
            break
        if step in schedule and not record(step):
            diverge(step)
            break

    log.final_params = params
    logger.info(
        "%s alpha=%g: final loss %.6g%s",
        state.family,
        state.alpha,
        log.final_loss,
        " (diverged)" if log.diverged else "",
    )
    return log


def train(
    model: LinearModel, dataset: Dataset, config: TrainConfig
) -> TrajectoryLog:
    """Train the softmax linear model on a dataset.

    Parameters
    ----------
    model : LinearModel
        initial model (not modified)
    dataset : Dataset
        training data; its groups are used for per-group losses
    config : TrainConfig
        optimizer and run settings

    Returns
    -------
    TrajectoryLog
        checkpoint records; ``model`` holds the final model

    """
    if model.d != dataset.d or model.c != dataset.c:
        raise ShapeMismatchError("model and dataset shapes disagree")
    class_weights = None
    if config.reweight != "none":
        class_weights = reweight_weights(dataset.freq, config.reweight)
    objective = SoftmaxObjective(dataset, model.has_bias, class_weights)
    log = run_loop(objective, model.params(), config)
    if log.final_params is not None:
        log.model = LinearModel.from_params(
            log.final_params, bias=model.has_bias
        )
    return log


###############
# Grid search
################
@dataclass(eq=False)
class GridSearchResult:
    """Selected step size with the per-cell summary."""

    best_alpha: float
    summary: pd.DataFrame
    logs: dict[tuple[float, int], TrajectoryLog]

    def best_logs(self) -> list[TrajectoryLog]:
        """Logs of the selected step size, one per seed."""
        return [
            log
            for (alpha, _), log in sorted(self.logs.items())
            if alpha == self.best_alpha
        ]


def _run_cells(
    run_cell: Callable[[float, int], TrajectoryLog],
    alphas: Sequence[float],
    seeds: Sequence[int],
) -> dict[tuple[float, int], TrajectoryLog]:
    cells = [(alpha, seed) for alpha in alphas for seed in seeds]
    workers = min(utils.max_worker_threads(), len(cells))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        logs = list(pool.map(lambda cell: run_cell(*cell), cells))
    return dict(zip(cells, logs, strict=True))


def search_step_size(
    run_cell: Callable[[float, int], TrajectoryLog],
    seeds: Sequence[int],
    grid: Sequence[float] = DEFAULT_COARSE_GRID,
    refine: bool = True,
) -> GridSearchResult:
    """Pick the step size minimizing the worst final loss over seeds.

    A sparse grid is refined once with half-powers around its best value.
    If the selected step size is unstable (a recorded loss above the
    initial loss), the next smaller stable step size is used instead.

    Parameters
    ----------
    run_cell : Callable[[float, int], TrajectoryLog]
        runs training for a (step size, seed) pair
    seeds : Sequence[int]
        seeds to evaluate every step size on (at least one)
    grid : Sequence[float], optional
        coarse grid, by default powers of 10 from 1e-6 to 1e1
    refine : bool, optional
        add 10^(x +- 0.5) around the coarse best, by default True

    Returns
    -------
    GridSearchResult
        selected step size, summary table and all logs

    """
    if not seeds:
        raise ValueError("grid search needs at least one seed")
    if not grid:
        raise ValueError("grid search needs at least one step size")

    logs = _run_cells(run_cell, sorted(set(grid)), seeds)

    def worst_loss(alpha: float) -> float:
        return max(logs[(alpha, seed)].final_loss for seed in seeds)

    def evaluated() -> list[float]:
        return sorted({alpha for alpha, _ in logs})

    coarse_best = min(evaluated(), key=worst_loss)
    if refine and math.isfinite(worst_loss(coarse_best)):
        exponent = math.log10(coarse_best)
        ring = [10.0 ** (exponent - 0.5), 10.0 ** (exponent + 0.5)]
        new = [a for a in ring if a not in evaluated()]
        logs.update(_run_cells(run_cell, new, seeds))

    alphas = evaluated()
    scores = {alpha: worst_loss(alpha) for alpha in alphas}
    if not any(math.isfinite(s) for s in scores.values()):
        raise NoViableStepSizeError("every step size diverged")
    best = min(alphas, key=lambda a: scores[a])

    def is_unstable(alpha: float) -> bool:
        return any(logs[(alpha, seed)].unstable() for seed in seeds)

    if is_unstable(best):
        stable_smaller = [
            a
            for a in alphas
            if a < best and not is_unstable(a) and math.isfinite(scores[a])
        ]
        if stable_smaller:
            logger.info(
                "alpha=%g is unstable, falling back to %g",
                best,
                stable_smaller[-1],
            )
            best = stable_smaller[-1]
        else:
            logger.warning("no stable step size below %g", best)

    summary = pd.DataFrame(
        [
            {
                "alpha": alpha,
                "seed": seed,
                "final_loss": log.final_loss,
                "unstable": log.unstable(),
            }
            for (alpha, seed), log in sorted(logs.items())
        ]
    )
    logger.info("Selected alpha=%g", best)
    return GridSearchResult(best_alpha=best, summary=summary, logs=logs)


def grid_search(
    model: LinearModel,
    dataset: Dataset,
    config: TrainConfig,
    seeds: Sequence[int],
    grid: Sequence[float] = DEFAULT_COARSE_GRID,
    refine: bool = True,
    init: Callable[[int], LinearModel] | None = None,
) -> GridSearchResult:
    """Grid search of the step size of ``config.optimizer`` on a dataset.

    Parameters
    ----------
    model : LinearModel
        initial model, used for every seed unless ``init`` is given
    dataset : Dataset
        training data
    config : TrainConfig
        run settings; the optimizer's alpha is overridden per cell and the
        seed drives minibatch sampling
    seeds : Sequence[int]
        seeds to evaluate
    grid : Sequence[float], optional
        coarse grid, by default powers of 10 from 1e-6 to 1e1
    refine : bool, optional
        refine with half-powers around the coarse best, by default True
    init : Callable[[int], LinearModel] | None, optional
        seed -> initial model, for seeded random initializations

    Returns
    -------
    GridSearchResult
        selected step size, summary table and all logs

    """

    def run_cell(alpha: float, seed: int) -> TrajectoryLog:
        start = model if init is None else init(seed)
        cell_config = replace(
            config, optimizer=config.optimizer.fresh(alpha), seed=seed
        )
        return train(start, dataset, cell_config)

    return search_step_size(run_cell, seeds, grid=grid, refine=refine)


def grid_search_objective(
    objective: Objective,
    params: np.ndarray,
    config: TrainConfig,
    seeds: Sequence[int],
    grid: Sequence[float] = DEFAULT_COARSE_GRID,
    refine: bool = True,
) -> GridSearchResult:
    """Grid search of the step size on any objective (e.g. a quadratic)."""

    def run_cell(alpha: float, seed: int) -> TrajectoryLog:
        cell_config = replace(
            config, optimizer=config.optimizer.fresh(alpha), seed=seed
        )
        return run_loop(objective, params, cell_config)

    return search_step_size(run_cell, seeds, grid=grid, refine=refine)

