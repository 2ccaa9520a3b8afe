"""Softmax linear model with cross-entropy loss.

Gradients follow the loss-gradient sign convention: the gradient of the
mean loss with respect to row k of W is

    (1 / sum_i w_i) * sum_i w_i (p(x_i)_k - 1{y_i = k}) x_i,

and descent subtracts it. The per-sample form (1{y=k} - p_k) x often seen
in derivations is the negative of this.

A bias vector is handled as an extra input coordinate equal to 1, so the
parameters of a model with bias are the c x (d+1) matrix [W | b]. Hessian
blocks are never materialized; only their traces and sampled entries are.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from imblab import utils
from imblab.dataset import Dataset, FrequencyGroups
from imblab.errors import EmptyClassError, NumericError, ShapeMismatchError

logger = logging.getLogger(__name__)


###############
# Types
################
@dataclass(eq=False)
class LinearModel:
    """Parameter matrix W (c x d) with an optional bias vector (c,)."""

    W: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        """Check the bias matches the number of rows of W."""
        if self.W.ndim != 2:
            raise ValueError("W must be a c x d matrix")
        if self.bias is not None and self.bias.shape != (self.W.shape[0],):
            raise ValueError("bias needs one entry per class")

    @property
    def c(self) -> int:
        """Number of classes."""
        return int(self.W.shape[0])

    @property
    def d(self) -> int:
        """Input dimension."""
        return int(self.W.shape[1])

    @property
    def has_bias(self) -> bool:
        """Whether the model carries a bias vector."""
        return self.bias is not None

    @classmethod
    def zeros(cls, c: int, d: int, bias: bool = False) -> "LinearModel":
        """Model initialized at W = 0 (and b = 0)."""
        return cls(W=np.zeros((c, d)), bias=np.zeros(c) if bias else None)

    @classmethod
    def gaussian(
        cls, c: int, d: int, scale: float, seed: int, bias: bool = False
    ) -> "LinearModel":
        """Model with i.i.d. Normal(0, scale^2) parameters.

        Parameters
        ----------
        c, d : int
            number of classes and input dimension
        scale : float
            standard deviation of every entry
        seed : int
            seed of the PCG64 generator
        bias : bool, optional
            whether to include a bias vector, by default False

        Returns
        -------
        LinearModel
            randomly initialized model

        """
        rng = np.random.default_rng(seed)
        params = scale * rng.standard_normal((c, d + int(bias)))
        return cls.from_params(params, bias=bias)

    def params(self) -> np.ndarray:
        """Parameters as one c x (d + bias) matrix."""
        if self.bias is None:
            return self.W.copy()
        return np.hstack([self.W, self.bias[:, None]])

    @classmethod
    def from_params(cls, params: np.ndarray, bias: bool) -> "LinearModel":
        """Inverse of :meth:`params`."""
        if bias:
            return cls(W=params[:, :-1].copy(), bias=params[:, -1].copy())
        return cls(W=params.copy())


class BlockGradient(NamedTuple):
    """Gradient of the mean loss, split like the model parameters."""

    W: np.ndarray
    bias: np.ndarray | None


@dataclass(eq=False)
class BlockStats:
    """Per-class statistics of the parameter rows w_k.

    ``mean_p`` is NaN for a class without samples.
    """

    grad_norm: np.ndarray
    hess_trace: np.ndarray
    mean_p: np.ndarray
    freq: np.ndarray

    def to_frame(self, step: int) -> pd.DataFrame:
        """One row per class, in the BlockStats csv column order."""
        return pd.DataFrame(
            {
                "step": step,
                "class": np.arange(self.freq.size),
                "freq": self.freq,
                "grad_norm": self.grad_norm,
                "hess_trace": self.hess_trace,
                "mean_p": self.mean_p,
            }
        )


@dataclass(eq=False)
class InitAnalytics:
    """Closed-form gradient and Hessian traces at W = 0, with data moments.

    Moments are taken over the (bias-augmented) inputs, weighted by the
    sample weights.
    """

    grad_blocks: np.ndarray
    hess_traces: np.ndarray
    xbar: np.ndarray
    xbar_k: np.ndarray
    trHbar: float
    trHbar_k: np.ndarray


###############
# Numerics
################
def augment(inputs: np.ndarray, bias: bool) -> np.ndarray:
    """Append a constant-1 column to the inputs when ``bias`` is set."""
    if not bias:
        return inputs
    return np.hstack([inputs, np.ones((inputs.shape[0], 1))])


def _check_finite(logits: np.ndarray) -> None:
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax using the max-shifted log-sum-exp.

    The maximum contributes exactly one to the sum, so the normaliser is
    evaluated as ``log1p`` of the remaining terms; saturated rows keep
    full relative precision.
    """
    top = np.argmax(logits, axis=-1)[..., None]
    shifted = logits - np.take_along_axis(logits, top, axis=-1)
    rest = np.exp(shifted)
    np.put_along_axis(rest, top, 0.0, axis=-1)
    return shifted - np.log1p(rest.sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable for logits up to about +-1e300."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


class SoftmaxProblem:
    """Inputs, labels and weights prepared for repeated evaluation.

    Parameters
    ----------
    inputs : np.ndarray
        n x d' design matrix, already bias-augmented if needed
    labels : np.ndarray
        n integer labels in [0, c)
    weights : np.ndarray
        n positive sample weights
    c : int
        number of classes

    """

    def __init__(
        self,
        inputs: np.ndarray,
        labels: np.ndarray,
        weights: np.ndarray,
        c: int,
    ) -> None:
        self.inputs = inputs
        self.labels = labels
        self.weights = weights
        self.c = c
        self.total_weight = float(weights.sum())
        self.sq_norms = np.einsum("ij,ij->i", inputs, inputs)
        self._rows = np.arange(labels.size)

    @classmethod
    def from_dataset(
        cls,
        dataset: Dataset,
        bias: bool,
        class_weights: np.ndarray | None = None,
    ) -> "SoftmaxProblem":
        """Prepare a dataset, optionally reweighting every class.

        Parameters
        ----------
        dataset : Dataset
            the data
        bias : bool
            whether the model has a bias vector
        class_weights : np.ndarray | None, optional
            per-class multipliers of the sample weights, by default None

        Returns
        -------
        SoftmaxProblem
            problem over the whole dataset

        """
        weights = dataset.sample_weights
        if class_weights is not None:
            weights = weights * class_weights[dataset.labels]
        return cls(
            augment(dataset.inputs, bias), dataset.labels, weights, dataset.c
        )

    def subset(self, rows: np.ndarray) -> "SoftmaxProblem":
        """Problem restricted to some samples (e.g. a minibatch)."""
        return SoftmaxProblem(
            self.inputs[rows], self.labels[rows], self.weights[rows], self.c
        )

    def logits(self, params: np.ndarray) -> np.ndarray:
        """n x c logits; raises NumericError if any is non-finite."""
        with np.errstate(over="ignore", invalid="ignore"):
            logits = self.inputs @ params.T
        _check_finite(logits)
        return logits

    def probs(self, params: np.ndarray) -> np.ndarray:
        """n x c predicted probabilities."""
        return softmax(self.logits(params))

    def per_sample_losses(self, params: np.ndarray) -> np.ndarray:
        """Cross-entropy of every sample, -(logit_y - logsumexp)."""
        return -log_softmax(self.logits(params))[self._rows, self.labels]

    def mean_loss(self, params: np.ndarray) -> float:
        """Weighted mean of the per-sample losses."""
        losses = self.per_sample_losses(params)
        return float(losses @ self.weights / self.total_weight)

    def gradient(
        self, params: np.ndarray, probs: np.ndarray | None = None
    ) -> np.ndarray:
        """Gradient of the weighted mean loss, shaped like ``params``."""
        if probs is None:
            probs = self.probs(params)
        residual = probs * self.weights[:, None]
        residual[self._rows, self.labels] -= self.weights
        return residual.T @ self.inputs / self.total_weight

    def hessian_traces(
        self, params: np.ndarray, probs: np.ndarray | None = None
    ) -> np.ndarray:
        """Trace of every diagonal Hessian block, sum_i u_i p_k (1 - p_k)."""
        if probs is None:
            probs = self.probs(params)
        scaled = self.weights * self.sq_norms / self.total_weight
        return (probs * (1.0 - probs)).T @ scaled

    def offdiag_traces(
        self,
        params: np.ndarray,
        class_subset: np.ndarray,
        probs: np.ndarray | None = None,
    ) -> np.ndarray:
        """Trace of every Hessian block (k, j) with k, j in the subset."""
        if probs is None:
            probs = self.probs(params)
        sub = probs[:, class_subset]
        scaled = self.weights * self.sq_norms / self.total_weight
        return np.diag(sub.T @ scaled) - sub.T @ (sub * scaled[:, None])

    def correct_class_probs(
        self, params: np.ndarray, probs: np.ndarray | None = None
    ) -> np.ndarray:
        """p(x_i)_{y_i} for every sample."""
        if probs is None:
            probs = self.probs(params)
        return probs[self._rows, self.labels]


def prepare_problem(
    model: LinearModel, dataset: Dataset
) -> SoftmaxProblem:
    """Check shapes and prepare the unweighted problem of a model."""
    if model.d != dataset.d or model.c != dataset.c:
        raise ShapeMismatchError(
            f"model is {model.c} x {model.d} but the dataset has "
            f"c={dataset.c}, d={dataset.d}"
        )
    return SoftmaxProblem.from_dataset(dataset, bias=model.has_bias)


def class_means(
    values: np.ndarray, labels: np.ndarray, weights: np.ndarray, c: int
) -> np.ndarray:
    """Weighted mean of ``values`` over the samples of every class.

    Classes without samples get NaN.
    """
    mass = np.bincount(labels, weights=weights, minlength=c)
    sums = np.bincount(labels, weights=weights * values, minlength=c)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(mass > 0, sums / mass, np.nan)


###############
# Operations
################
def predict_probs(model: LinearModel, x: np.ndarray) -> np.ndarray:
    """Predicted class probabilities for a single input.

    Parameters
    ----------
    model : LinearModel
        the model
    x : np.ndarray
        input vector of length d

    Returns
    -------
    np.ndarray
        probabilities summing to 1

    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.d,):
        raise ShapeMismatchError(f"expected an input of length {model.d}")
    logits = model.params() @ augment(x[None, :], model.has_bias)[0]
    _check_finite(logits)
    return softmax(logits)


def per_sample_losses(model: LinearModel, dataset: Dataset) -> np.ndarray:
    """Cross-entropy loss of every sample."""
    return prepare_problem(model, dataset).per_sample_losses(model.params())


def mean_loss(model: LinearModel, dataset: Dataset) -> float:
    """Sample-weighted mean cross-entropy loss."""
    return prepare_problem(model, dataset).mean_loss(model.params())


def group_means(
    values: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    groups: FrequencyGroups,
) -> np.ndarray:
    """Weighted mean of per-sample ``values`` within every group.

    Groups without samples get NaN, which marks a missing value.
    """
    sample_groups = groups.of_labels(labels)
    return class_means(values, sample_groups, weights, groups.num_groups)


def per_group_loss(
    model: LinearModel,
    dataset: Dataset,
    groups: FrequencyGroups | None = None,
) -> np.ndarray:
    """Weighted mean loss over the samples of every frequency group.

    Parameters
    ----------
    model : LinearModel
        the model
    dataset : Dataset
        the data
    groups : FrequencyGroups | None, optional
        class grouping, by default the dataset's own

    Returns
    -------
    np.ndarray
        one loss per group, NaN for a group without samples

    """
    groups = dataset.groups if groups is None else groups
    losses = per_sample_losses(model, dataset)
    return group_means(losses, dataset.labels, dataset.sample_weights, groups)


def full_gradient(model: LinearModel, dataset: Dataset) -> BlockGradient:
    """Gradient of the mean loss with respect to W (and the bias)."""
    grad = prepare_problem(model, dataset).gradient(model.params())
    if model.has_bias:
        return BlockGradient(W=grad[:, :-1], bias=grad[:, -1])
    return BlockGradient(W=grad, bias=None)


def block_hessian_traces(model: LinearModel, dataset: Dataset) -> np.ndarray:
    """Trace of the Hessian block of every row w_k (bias included)."""
    return prepare_problem(model, dataset).hessian_traces(model.params())


def offdiag_block_traces(
    model: LinearModel,
    dataset: Dataset,
    class_subset: np.ndarray | list[int] | None = None,
) -> np.ndarray:
    """Matrix of block-Hessian traces T[k][j] over a subset of classes.

    Diagonal entries are non-negative, off-diagonal ones non-positive, and
    over all classes every row sums to zero.

    Parameters
    ----------
    model : LinearModel
        the model
    dataset : Dataset
        the data
    class_subset : array_like | None, optional
        distinct class indices, by default all classes

    Returns
    -------
    np.ndarray
        |S| x |S| trace matrix

    """
    if class_subset is None:
        class_subset = np.arange(model.c)
    class_subset = np.asarray(class_subset, dtype=np.int64)
    if np.unique(class_subset).size != class_subset.size:
        raise ValueError("class_subset has duplicate indices")
    if np.any(class_subset < 0) or np.any(class_subset >= model.c):
        raise ValueError(f"class indices must lie in [0, {model.c})")
    problem = prepare_problem(model, dataset)
    return problem.offdiag_traces(model.params(), class_subset)


def stats_from_params(
    problem: SoftmaxProblem, params: np.ndarray, freq: np.ndarray
) -> BlockStats:
    """BlockStats of a prepared problem at given parameters."""
    probs = problem.probs(params)
    grad = problem.gradient(params, probs=probs)
    return BlockStats(
        grad_norm=np.linalg.norm(grad, axis=1),
        hess_trace=problem.hessian_traces(params, probs=probs),
        mean_p=class_means(
            problem.correct_class_probs(params, probs=probs),
            problem.labels,
            problem.weights,
            problem.c,
        ),
        freq=freq.copy(),
    )


def block_stats(model: LinearModel, dataset: Dataset) -> BlockStats:
    """Gradient norm, Hessian trace and mean correct-class probability.

    Norms and traces are over the full parameter row, which includes the
    bias entry when the model has one.
    """
    return stats_from_params(
        prepare_problem(model, dataset), model.params(), dataset.freq.probs
    )


def init_analytics(dataset: Dataset, bias: bool = False) -> InitAnalytics:
    """Closed-form gradient and Hessian traces of the loss at W = 0.

    At W = 0 every prediction is uniform, so

        grad_k = (1/c) xbar - pi_k xbar^k,
        Tr(hess_k) = (1/c)(1 - 1/c) Tr(Hbar),

    with Tr(Hbar) the mean squared input norm.

    Parameters
    ----------
    dataset : Dataset
        the data; every class must have samples
    bias : bool, optional
        compute the moments of the bias-augmented inputs, by default False

    Returns
    -------
    InitAnalytics
        analytic gradient blocks, Hessian traces and data moments

    """
    c = dataset.c
    mass = dataset.class_mass()
    if np.any(mass <= 0):
        empty = np.flatnonzero(mass <= 0).tolist()
        raise EmptyClassError(f"classes {empty} have no samples")

    inputs = augment(dataset.inputs, bias)
    weights = dataset.sample_weights
    total = float(weights.sum())
    sq_norms = np.einsum("ij,ij->i", inputs, inputs)

    one_hot = np.zeros((dataset.n, c))
    one_hot[np.arange(dataset.n), dataset.labels] = weights
    class_sums = one_hot.T @ inputs

    xbar = weights @ inputs / total
    xbar_k = class_sums / mass[:, None]
    trHbar = float(weights @ sq_norms / total)
    trHbar_k = (one_hot.T @ sq_norms) / mass

    return InitAnalytics(
        grad_blocks=xbar[None, :] / c - class_sums / total,
        hess_traces=np.full(c, (1.0 / c) * (1.0 - 1.0 / c) * trHbar),
        xbar=xbar,
        xbar_k=xbar_k,
        trHbar=trHbar,
        trHbar_k=trHbar_k,
    )


###############
# Serialization
################
def save_model(model: LinearModel, output_dir: str | Path) -> Path:
    """Write ``meta.json``, ``W.f64`` (row-major) and ``b.f64`` if biased."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    utils.write_json(
        output_dir / "meta.json",
        {"c": model.c, "d": model.d, "bias": model.has_bias},
    )
    utils.write_array(output_dir / "W.f64", model.W, utils.FLOAT_DTYPE)
    if model.bias is not None:
        utils.write_array(output_dir / "b.f64", model.bias, utils.FLOAT_DTYPE)
    return output_dir


def load_model(input_dir: str | Path) -> LinearModel:
    """Read a model written by :func:`save_model`."""
    input_dir = Path(input_dir)
    meta = utils.read_json(input_dir / "meta.json")
    c, d = meta["c"], meta["d"]
    W = utils.read_array(input_dir / "W.f64", utils.FLOAT_DTYPE, (c, d))
    bias = None
    if meta["bias"]:
        bias = utils.read_array(input_dir / "b.f64", utils.FLOAT_DTYPE, (c,))
    return LinearModel(W=W, bias=bias)
