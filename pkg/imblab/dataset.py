"""Synthetic class-imbalanced classification problems.

Classes are always indexed by descending frequency: class 0 is the most
frequent one. Every sampling function takes an explicit integer seed and
draws from numpy's PCG64 generator, so regenerating a dataset with the same
parameters and seed is bit-identical.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np

from imblab import utils
from imblab.errors import InfeasibleCountsError, InfeasiblePartitionError

logger = logging.getLogger(__name__)

DEFAULT_NUM_GROUPS = 10


###############
# Types
################
@dataclass(frozen=True, eq=False)
class FrequencySpec:
    """Per-class sample counts and frequencies.

    ``counts`` may hold fractional masses (the weighted single-sample
    setting); ``probs`` is always ``counts / counts.sum()``.
    """

    counts: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_counts(cls, counts: Any) -> "FrequencySpec":
        """Build a frequency spec from per-class counts.

        Parameters
        ----------
        counts : array_like
            non-negative per-class counts, sorted non-increasing

        Returns
        -------
        FrequencySpec
            spec with normalized ``probs``

        """
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size < 2:
            raise ValueError("at least two classes are required")
        if np.any(counts < 0) or not np.all(np.isfinite(counts)):
            raise ValueError("class counts must be finite and non-negative")
        if np.any(np.diff(counts) > 0):
            raise ValueError("class counts must be sorted non-increasing")
        total = counts.sum()
        if total <= 0:
            raise ValueError("class counts must not all be zero")
        return cls(counts=counts, probs=counts / total)

    @property
    def c(self) -> int:
        """Number of classes."""
        return int(self.counts.size)

    @property
    def n(self) -> float:
        """Total sample mass."""
        return float(self.counts.sum())


@dataclass(frozen=True, eq=False)
class FrequencyGroups:
    """Partition of frequency-ranked classes into contiguous groups."""

    num_groups: int
    assignment: np.ndarray
    boundaries: tuple[tuple[int, int], ...]

    def classes(self, group: int) -> np.ndarray:
        """Class indices belonging to ``group``."""
        start, stop = self.boundaries[group]
        return np.arange(start, stop)

    def of_labels(self, labels: np.ndarray) -> np.ndarray:
        """Group index of every label."""
        return self.assignment[labels]


@dataclass(frozen=True)
class InputDistribution:
    """Distribution of the i.i.d. input entries."""

    kind: Literal["uniform01", "gaussian"] = "uniform01"
    mean: float = 0.0

    def __post_init__(self) -> None:
        """Check the kind is one of the supported ones."""
        if self.kind not in ("uniform01", "gaussian"):
            raise ValueError(f"unknown input distribution {self.kind!r}")

    def to_dict(self) -> dict:
        """Serializable form."""
        if self.kind == "gaussian":
            return {"kind": self.kind, "mean": float(self.mean)}
        return {"kind": self.kind}


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs, labels and per-sample weights of a classification problem.

    The weighted label histogram (``class_mass``) equals ``freq.counts``.
    """

    inputs: np.ndarray
    labels: np.ndarray
    sample_weights: np.ndarray
    freq: FrequencySpec
    groups: FrequencyGroups
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate shapes, weights and the label histogram."""
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be an n x d matrix")
        n = self.inputs.shape[0]
        if self.labels.shape != (n,) or self.sample_weights.shape != (n,):
            raise ValueError("labels and weights need one entry per sample")
        if np.any(self.labels < 0) or np.any(self.labels >= self.freq.c):
            raise ValueError(f"labels must lie in [0, {self.freq.c})")
        if np.any(self.sample_weights <= 0):
            raise ValueError("sample weights must be strictly positive")
        if not np.allclose(
            self.class_mass(), self.freq.counts, rtol=1e-12, atol=0
        ):
            raise ValueError("label histogram does not match freq.counts")

    @property
    def n(self) -> int:
        """Number of samples."""
        return int(self.inputs.shape[0])

    @property
    def d(self) -> int:
        """Input dimension."""
        return int(self.inputs.shape[1])

    @property
    def c(self) -> int:
        """Number of classes."""
        return self.freq.c

    def class_mass(self) -> np.ndarray:
        """Total sample weight per class."""
        return np.bincount(
            self.labels, weights=self.sample_weights, minlength=self.freq.c
        )

    def with_groups(self, num_groups: int) -> "Dataset":
        """Copy of the dataset with a different frequency grouping."""
        return replace(self, groups=group_by_frequency(self.freq, num_groups))


###############
# Frequencies
################
def zipf_frequencies(c: int, exponent: float, n: int) -> FrequencySpec:
    """Zipf class frequencies with integer counts summing to ``n``.

    Counts are the largest-remainder rounding of ``n * probs`` with a floor
    of one sample per class: classes below one sample get exactly one and
    the remaining samples are shared by the others in proportion.

    Parameters
    ----------
    c : int
        number of classes (>= 2)
    exponent : float
        power-law exponent s > 0, probs[k] proportional to 1/(k+1)^s
    n : int
        total number of samples (>= c)

    Returns
    -------
    FrequencySpec
        integer counts sorted non-increasing

    """
    if c < 2:
        raise ValueError("at least two classes are required")
    if exponent <= 0:
        raise ValueError("the zipf exponent must be positive")
    if n < c:
        raise InfeasibleCountsError(
            f"{n} samples cannot give every one of {c} classes a sample"
        )

    probs = 1.0 / np.arange(1, c + 1, dtype=np.float64) ** exponent
    probs /= probs.sum()

    # classes whose quota falls below one are pinned at a single sample and
    # the rest is spread over the others; the pinned set is a tail suffix
    pinned = np.zeros(c, dtype=bool)
    while True:
        free = np.flatnonzero(~pinned)
        quotas = (n - pinned.sum()) * probs[free] / probs[free].sum()
        below = quotas < 1.0
        if not below.any():
            break
        pinned[free[below]] = True

    counts = np.ones(c)
    counts[free] = np.floor(quotas)
    remainders = quotas - np.floor(quotas)

    # stable sort: ties go to the more frequent class
    deficit = int(n - counts.sum())
    order = np.argsort(-remainders, kind="stable")
    counts[free[order[:deficit]]] += 1

    counts = np.sort(counts)[::-1]
    return FrequencySpec.from_counts(counts)


def heavy_tailed_tiers(
    m: int, extra_tier: bool = False
) -> list[tuple[int, int]]:
    """Tier listing of the random heavy-tailed labels problem.

    Tier j (1-indexed) has 2^(j-1) classes with 2^(m-j+1) samples each,
    giving n = m 2^m samples and c = 2^m - 1 classes. With ``extra_tier``
    a final tier of 2^m single-sample classes is appended, giving
    c = 2^(m+1) - 1.

    Parameters
    ----------
    m : int
        number of tiers (>= 1)
    extra_tier : bool, optional
        append the single-sample tier, by default False

    Returns
    -------
    list[tuple[int, int]]
        (number of classes, samples per class) for each tier

    """
    if m < 1:
        raise ValueError("m must be at least 1")
    tiers = [(2 ** (j - 1), 2 ** (m - j + 1)) for j in range(1, m + 1)]
    if extra_tier:
        tiers.append((2**m, 1))
    return tiers


def heavy_tailed_frequencies(
    m: int, extra_tier: bool = False
) -> FrequencySpec:
    """Class counts of :func:`heavy_tailed_tiers`, one entry per class."""
    counts = np.concatenate(
        [
            np.full(num_classes, count, dtype=np.float64)
            for num_classes, count in heavy_tailed_tiers(m, extra_tier)
        ]
    )
    if counts.size < 2:
        # m=1 without the extra tier is a single class
        raise ValueError("m=1 needs extra_tier=True to give two classes")
    return FrequencySpec.from_counts(counts)


def group_by_frequency(
    freq: FrequencySpec, num_groups: int
) -> FrequencyGroups:
    """Split frequency-ranked classes into groups of similar total mass.

    Greedy scan over classes in descending frequency: group g is closed
    once the cumulative mass reaches (g + 1) n / G, so rounding at one
    boundary does not pile up in the last group. A group is also closed
    early when the classes left are exactly enough to give each remaining
    group one class, so no group is empty.

    Parameters
    ----------
    freq : FrequencySpec
        class frequencies
    num_groups : int
        number of groups G, 1 <= G <= c

    Returns
    -------
    FrequencyGroups
        contiguous partition of [0, c)

    """
    c = freq.c
    if num_groups < 1 or num_groups > c:
        raise InfeasiblePartitionError(
            f"cannot split {c} classes into {num_groups} groups"
        )

    # Compare cumulative * G with (g + 1) n to keep exact ties exact
    cumulative = np.cumsum(freq.counts) * num_groups
    assignment = np.zeros(c, dtype=np.int64)
    boundaries = []
    group, start = 0, 0
    for k in range(c):
        assignment[k] = group
        groups_left = num_groups - group - 1
        classes_left = c - k - 1
        reached = cumulative[k] >= (group + 1) * freq.n
        if groups_left > 0 and (reached or classes_left == groups_left):
            boundaries.append((start, k + 1))
            group, start = group + 1, k + 1
    boundaries.append((start, c))

    return FrequencyGroups(
        num_groups=num_groups,
        assignment=assignment,
        boundaries=tuple(boundaries),
    )


###############
# Inputs
################
def sample_inputs(
    dist: InputDistribution, n: int, d: int, seed: int
) -> np.ndarray:
    """Draw an n x d matrix of i.i.d. input entries.

    Parameters
    ----------
    dist : InputDistribution
        ``uniform01`` gives entries in [0, 1); ``gaussian`` gives
        Normal(mean, 1) entries
    n, d : int
        matrix shape, both >= 1
    seed : int
        seed of the PCG64 generator

    Returns
    -------
    np.ndarray
        float64 matrix of shape (n, d)

    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be at least 1")
    rng = np.random.default_rng(seed)
    if dist.kind == "uniform01":
        return rng.random((n, d))
    return dist.mean + rng.standard_normal((n, d))


###############
# Generators
################
def _labels_from_counts(freq: FrequencySpec) -> np.ndarray:
    return np.repeat(np.arange(freq.c), freq.counts.astype(np.int64))


def heavy_tailed_labels(
    m: int,
    dist: InputDistribution,
    seed: int,
    extra_tier: bool = False,
    num_groups: int = DEFAULT_NUM_GROUPS,
    d: int | None = None,
) -> Dataset:
    """Random heavy-tailed labels: tiered counts, inputs independent of labels.

    Parameters
    ----------
    m : int
        number of frequency tiers (>= 1)
    dist : InputDistribution
        input entry distribution
    seed : int
        input sampling seed
    extra_tier : bool, optional
        append 2^m single-sample classes, by default False
    num_groups : int, optional
        reporting groups (capped at c), by default 10
    d : int | None, optional
        input dimension, by default (m+1) 2^m

    Returns
    -------
    Dataset
        n = m 2^m samples (plus 2^m with the extra tier) in
        d dimensions

    """
    freq = heavy_tailed_frequencies(m, extra_tier=extra_tier)
    labels = _labels_from_counts(freq)
    if d is None:
        d = (m + 1) * 2**m
    inputs = sample_inputs(dist, labels.size, d, seed)
    logger.debug(
        "Generated heavy-tailed labels m=%d: n=%d d=%d c=%d",
        m,
        labels.size,
        d,
        freq.c,
    )
    return Dataset(
        inputs=inputs,
        labels=labels,
        sample_weights=np.ones(labels.size),
        freq=freq,
        groups=group_by_frequency(freq, min(num_groups, freq.c)),
        meta={
            "generator": "heavy_tailed_labels",
            "m": m,
            "extra_tier": extra_tier,
            "d": d,
            "seed": seed,
            "inputs": dist.to_dict(),
        },
    )


def zipf_dataset(
    c: int,
    exponent: float,
    n: int,
    d: int,
    dist: InputDistribution,
    seed: int,
    num_groups: int = DEFAULT_NUM_GROUPS,
) -> Dataset:
    """Zipf-distributed labels with inputs independent of the labels.

    Parameters
    ----------
    c : int
        number of classes
    exponent : float
        zipf exponent
    n : int
        number of samples
    d : int
        input dimension
    dist : InputDistribution
        input entry distribution
    seed : int
        input sampling seed
    num_groups : int, optional
        reporting groups (capped at c), by default 10

    Returns
    -------
    Dataset
        dataset with :func:`zipf_frequencies` counts

    """
    freq = zipf_frequencies(c, exponent, n)
    labels = _labels_from_counts(freq)
    return Dataset(
        inputs=sample_inputs(dist, n, d, seed),
        labels=labels,
        sample_weights=np.ones(n),
        freq=freq,
        groups=group_by_frequency(freq, min(num_groups, freq.c)),
        meta={
            "generator": "zipf",
            "c": c,
            "exponent": exponent,
            "n": n,
            "d": d,
            "seed": seed,
            "inputs": dist.to_dict(),
        },
    )


def simple_imbalanced(
    freq: FrequencySpec, num_groups: int = DEFAULT_NUM_GROUPS
) -> Dataset:
    """One weighted sample per class on the standard basis.

    Sample k has input e_k, label k and weight pi_k, so the mean loss is
    the pi-weighted sum of per-class losses.

    Parameters
    ----------
    freq : FrequencySpec
        class frequencies; every class must have positive frequency
    num_groups : int, optional
        reporting groups (capped at c), by default 10

    Returns
    -------
    Dataset
        c x c identity inputs with weights ``freq.probs``

    """
    if np.any(freq.probs <= 0):
        raise ValueError("every class needs a positive frequency")
    weighted = FrequencySpec.from_counts(freq.probs)
    return Dataset(
        inputs=np.eye(freq.c),
        labels=np.arange(freq.c),
        sample_weights=weighted.probs.copy(),
        freq=weighted,
        groups=group_by_frequency(weighted, min(num_groups, freq.c)),
        meta={
            "generator": "simple_imbalanced",
            "probs": weighted.probs.tolist(),
        },
    )


###############
# Serialization
################
def save_dataset(dataset: Dataset, output_dir: str | Path) -> Path:
    """Write a dataset as ``meta.json`` plus raw little-endian arrays.

    Files: ``inputs.f64`` (n x d, row-major), ``labels.u32`` and, when any
    sample weight differs from 1, ``weights.f64``.

    Parameters
    ----------
    dataset : Dataset
        dataset to write
    output_dir : str | Path
        directory to create or reuse

    Returns
    -------
    Path
        the output directory

    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    has_weights = bool(np.any(dataset.sample_weights != 1.0))
    utils.write_json(
        output_dir / "meta.json",
        {
            "c": dataset.c,
            "n": dataset.n,
            "d": dataset.d,
            "counts": dataset.freq.counts.tolist(),
            "num_groups": dataset.groups.num_groups,
            "has_weights": has_weights,
            "generator": dataset.meta,
        },
    )
    utils.write_array(
        output_dir / "inputs.f64", dataset.inputs, utils.FLOAT_DTYPE
    )
    utils.write_array(
        output_dir / "labels.u32", dataset.labels, utils.LABEL_DTYPE
    )
    if has_weights:
        utils.write_array(
            output_dir / "weights.f64",
            dataset.sample_weights,
            utils.FLOAT_DTYPE,
        )
    return output_dir


def load_dataset(input_dir: str | Path) -> Dataset:
    """Read a dataset written by :func:`save_dataset`."""
    input_dir = Path(input_dir)
    meta = utils.read_json(input_dir / "meta.json")
    n, d = meta["n"], meta["d"]
    inputs = utils.read_array(
        input_dir / "inputs.f64", utils.FLOAT_DTYPE, (n, d)
    )
    labels = utils.read_array(
        input_dir / "labels.u32", utils.LABEL_DTYPE, (n,)
    ).astype(np.int64)
    if meta["has_weights"]:
        weights = utils.read_array(
            input_dir / "weights.f64", utils.FLOAT_DTYPE, (n,)
        )
    else:
        weights = np.ones(n)
    freq = FrequencySpec.from_counts(meta["counts"])
    return Dataset(
        inputs=inputs,
        labels=labels,
        sample_weights=weights,
        freq=freq,
        groups=group_by_frequency(freq, meta["num_groups"]),
        meta=meta["generator"],
    )
