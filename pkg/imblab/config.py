"""Experiment configuration files.

An experiment is described by one YAML file with a top-level
``schema_version``. It is parsed into frozen pydantic models that forbid
unknown fields; the first violation raises
:class:`~imblab.errors.ConfigError` naming the dotted path of the field,
e.g. ``optimizers[1].family``.

Example
-------
.. code-block:: yaml

    schema_version: 1
    kind: softmax
    dataset:
      generator: simple_imbalanced
      counts: [0.5, 0.5]
    model:
      bias: false
    optimizers:
      - family: sign
        alpha: 0.05
    steps: 10

"""

import logging
import math
from collections.abc import Callable
from pathlib import Path
from typing import Annotated, Any, Literal, TypeVar

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PlainValidator,
    StrictBool,
    ValidationError,
    ValidationInfo,
    field_validator,
)

from imblab import utils
from imblab.analysis import HeatmapSampling, SubsetRule
from imblab.dataset import (
    DEFAULT_NUM_GROUPS,
    Dataset,
    FrequencySpec,
    InputDistribution,
    heavy_tailed_labels,
    load_dataset,
    simple_imbalanced,
    zipf_dataset,
)
from imblab.errors import ConfigError
from imblab.model import LinearModel
from imblab.optim import (
    DEFAULT_COARSE_GRID,
    BatchSpec,
    Family,
    OptimizerState,
    ReweightScheme,
    geometric_checkpoints,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Fields each dataset generator cannot do without
_GENERATOR_FIELDS: dict[str, tuple[str, ...]] = {
    "heavy_tailed": ("m", "seed"),
    "zipf": ("c", "n", "d", "seed"),
    "simple_imbalanced": ("counts",),
    "file": ("path",),
}

_Seed = Annotated[int, Field(strict=True, ge=0)]
_Positive = Annotated[float, Field(gt=0)]

_SpecT = TypeVar("_SpecT", bound="_Spec")


###############
# Validation
################
class _Spec(BaseModel):
    """Frozen config section; unknown keys and non-finite numbers fail."""

    model_config = ConfigDict(
        extra="forbid",
        frozen=True,
        validate_default=True,
        allow_inf_nan=False,
    )

    def to_dict(self) -> dict:
        """Serializable form; validating it again gives back ``self``."""
        return self.model_dump(mode="json")


def _field_path(loc: tuple[int | str, ...], prefix: str = "") -> str:
    """Dotted path of an error location, e.g. ``optimizers[0].alpha``."""
    path = prefix
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        else:
            path = f"{path}.{part}" if path else str(part)
    return path or "<root>"


def _validate(spec: type[_SpecT], content: Any, prefix: str = "") -> _SpecT:
    """Validate ``content`` as ``spec``, reporting the first error."""
    try:
        return spec.model_validate(content)
    except ValidationError as err:
        first = err.errors()[0]
        raise ConfigError(
            _field_path(first["loc"], prefix), first["msg"]
        ) from err


###############
# Sections
################
class InputsSpec(_Spec):
    """Input entry distribution; ``mean`` only shifts gaussian inputs."""

    kind: Literal["uniform01", "gaussian"] = "uniform01"
    mean: float = 0.0

    @field_validator("mean")
    @classmethod
    def _gaussian_mean(cls, value: float, info: ValidationInfo) -> float:
        if value != 0.0 and info.data.get("kind") == "uniform01":
            raise ValueError("only applies to gaussian inputs")
        return value

    def build(self) -> InputDistribution:
        """The distribution sampled by the generators."""
        return InputDistribution(kind=self.kind, mean=self.mean)


class DatasetSpec(_Spec):
    """Which dataset to build, and from which seed."""

    generator: Literal["heavy_tailed", "zipf", "simple_imbalanced", "file"]
    m: int | None = Field(default=None, strict=True, ge=1)
    extra_tier: StrictBool = False
    c: int | None = Field(default=None, strict=True, ge=2)
    exponent: _Positive = 1.0
    n: int | None = Field(default=None, strict=True, ge=1)
    d: int | None = Field(default=None, strict=True, ge=1)
    counts: tuple[_Positive, ...] | None = Field(default=None, min_length=1)
    inputs: InputsSpec = Field(default_factory=InputsSpec)
    num_groups: int = Field(default=DEFAULT_NUM_GROUPS, strict=True, ge=1)
    seed: int | None = Field(default=None, strict=True, ge=0)
    path: str | None = None

    @field_validator("m", "c", "n", "d", "counts", "seed", "path")
    @classmethod
    def _required_by_generator(cls, value: Any, info: ValidationInfo) -> Any:
        generator = info.data.get("generator")
        needed = _GENERATOR_FIELDS.get(str(generator), ())
        if value is None and info.field_name in needed:
            raise ValueError(f"required by the {generator} generator")
        return value

    def build(self, base_dir: Path | None = None) -> Dataset:
        """Generate (or load) the dataset."""
        dist = self.inputs.build()
        if self.generator == "heavy_tailed":
            assert self.m is not None and self.seed is not None
            return heavy_tailed_labels(
                self.m,
                dist,
                self.seed,
                extra_tier=self.extra_tier,
                num_groups=self.num_groups,
                d=self.d,
            )
        if self.generator == "zipf":
            assert self.c and self.n and self.d and self.seed is not None
            return zipf_dataset(
                self.c,
                self.exponent,
                self.n,
                self.d,
                dist,
                self.seed,
                num_groups=self.num_groups,
            )
        if self.generator == "simple_imbalanced":
            return simple_imbalanced(
                FrequencySpec.from_counts(self.counts), self.num_groups
            )
        assert self.path is not None
        path = Path(self.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return load_dataset(path).with_groups(self.num_groups)


class ModelSpec(_Spec):
    """Bias on or off and the initialization (W = 0 by default)."""

    bias: StrictBool = False
    init: Literal["zeros", "gaussian"] = "zeros"
    scale: float = Field(default=1.0, ge=0)
    seed: int | None = Field(default=None, strict=True, ge=0)

    @field_validator("seed")
    @classmethod
    def _seeded_gaussian(
        cls, value: int | None, info: ValidationInfo
    ) -> int | None:
        if value is None and info.data.get("init") == "gaussian":
            raise ValueError("required by gaussian init")
        return value

    def build(self, c: int, d: int) -> LinearModel:
        """Initial model for c classes and d inputs."""
        if self.init == "zeros":
            return LinearModel.zeros(c, d, bias=self.bias)
        assert self.seed is not None
        return LinearModel.gaussian(
            c, d, scale=self.scale, seed=self.seed, bias=self.bias
        )


class OptimizerSpec(_Spec):
    """One optimizer to run; ``alpha = None`` means grid search it."""

    family: Family
    alpha: float | None = Field(default=None, ge=0)
    beta: float = Field(default=0.0, ge=0, lt=1)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: _Positive = 1e-8
    reweight: ReweightScheme = "none"
    steps: int | None = Field(default=None, strict=True, ge=1)
    name: str | None = None

    @property
    def label(self) -> str:
        """Name used in output file names."""
        return self.name or self.family

    def state(self, alpha: float | None = None) -> OptimizerState:
        """Fresh optimizer state (alpha defaults to the configured one)."""
        return OptimizerState(
            family=self.family,
            alpha=(alpha if alpha is not None else self.alpha or 0.0),
            beta=self.beta,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
        )


class BatchingSpec(_Spec):
    """Full-batch gradients, or minibatches of ``size`` samples."""

    kind: Literal["full", "minibatch"] = "full"
    size: int | None = Field(default=None, strict=True, ge=1)

    @field_validator("size")
    @classmethod
    def _minibatch_size(
        cls, value: int | None, info: ValidationInfo
    ) -> int | None:
        if value is None and info.data.get("kind") == "minibatch":
            raise ValueError("required for minibatches")
        return value

    def build(self) -> BatchSpec:
        """Batch settings of the training loop."""
        return BatchSpec(kind=self.kind, size=self.size)


class GridSearchSpec(_Spec):
    """Step-size grid, its seeds and whether to refine it once."""

    seeds: tuple[_Seed, ...] = Field(min_length=1)
    grid: tuple[_Positive, ...] = Field(
        default=DEFAULT_COARSE_GRID, min_length=1
    )
    refine: StrictBool = True


class CheckpointSpec(_Spec):
    """Steps at which the training loop records its state."""

    kind: Literal["geometric", "every", "list"] = "geometric"
    count: int = Field(default=20, strict=True, ge=2)
    interval: int = Field(default=1, strict=True, ge=1)
    steps: tuple[_Seed, ...] = ()

    @field_validator("steps")
    @classmethod
    def _listed_steps(
        cls, value: tuple[int, ...], info: ValidationInfo
    ) -> tuple[int, ...]:
        if not value and info.data.get("kind") == "list":
            raise ValueError("required by kind list")
        return value

    def schedule(self, steps: int) -> tuple[int, ...]:
        """Checkpoint steps for a run of ``steps`` updates."""
        if self.kind == "geometric":
            return geometric_checkpoints(steps, self.count)
        if self.kind == "every":
            return tuple(range(0, steps + 1, self.interval))
        return tuple(t for t in self.steps if t <= steps)


class HeatmapSpec(_Spec):
    """Hessian entries to sample for the off-diagonal heatmap."""

    n_classes: int = Field(default=40, strict=True, ge=1)
    n_dims: int = Field(default=40, strict=True, ge=1)
    sampling: tuple[HeatmapSampling, ...] = Field(
        default=("uniform",), min_length=1
    )
    seed: _Seed = 0


class CorrelationSpec(_Spec):
    """Subset of classes entering the gradient/Hessian correlation."""

    threshold: float = Field(default=1.0, ge=0)
    times_log_c: StrictBool = True

    def build(self) -> SubsetRule:
        """The subset rule applied to the class frequencies."""
        return SubsetRule(
            threshold=self.threshold, times_log_c=self.times_log_c
        )


class AnalysisSpec(_Spec):
    """What to compute along and after training."""

    block_stats: StrictBool = True
    correlation: CorrelationSpec = Field(default_factory=CorrelationSpec)
    negated_path: StrictBool = False
    heatmap: HeatmapSpec | None = None
    save_models: StrictBool = True

    @field_validator("negated_path")
    @classmethod
    def _needs_block_stats(cls, value: bool, info: ValidationInfo) -> bool:
        if value and info.data.get("block_stats") is False:
            raise ValueError("needs block_stats")
        return value


class QuadraticSpec(_Spec):
    """Weighted quadratic sum_k pi_k w_k^2 / 2 and its starting point."""

    pi: tuple[_Positive, ...] = Field(min_length=1)
    w0: tuple[float, ...] = Field(min_length=1)
    alpha: _Positive
    steps: int = Field(strict=True, ge=0)

    @field_validator("w0")
    @classmethod
    def _one_entry_per_pi(
        cls, value: tuple[float, ...], info: ValidationInfo
    ) -> tuple[float, ...]:
        pi = info.data.get("pi")
        if pi is not None and len(value) != len(pi):
            raise ValueError("must have one entry per pi")
        return value


# Frequencies of the theory grid may be given relative to c
_PI_RULES: dict[str, Callable[[int], float]] = {
    "1/c": lambda c: 1.0 / c,
    "1/(c*log(c))": lambda c: 1.0 / (c * math.log(c)),
}


def _theory_pi(value: Any) -> float | str:
    if isinstance(value, str) and value in _PI_RULES:
        return value
    if isinstance(value, bool):
        raise ValueError(f"expected a number, got {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        rules = ", ".join(_PI_RULES)
        raise ValueError(f"expected a number or one of {rules}") from None
    if not 0 < number <= 1:
        raise ValueError("must lie in (0, 1]")
    return number


class TheorySpec(_Spec):
    """Grid of (c, pi) pairs for the gradient-flow comparison.

    With ``scaled`` set, ``t_max`` and ``dt`` are in units of 1/(c pi).
    """

    c: tuple[Annotated[int, Field(strict=True, ge=2)], ...] = Field(
        min_length=1
    )
    pi: tuple[
        Annotated[float | str, PlainValidator(_theory_pi)], ...
    ] = Field(min_length=1)
    t_max: float = Field(ge=0)
    dt: _Positive
    scaled: StrictBool = False
    n_points: int = Field(default=101, strict=True, ge=2)

    def cases(self) -> list[tuple[int, float, float, float]]:
        """(c, pi, t_max, dt) for every grid point, in c-major order."""
        cases = []
        for c in self.c:
            for pi in self.pi:
                value = _PI_RULES[pi](c) if isinstance(pi, str) else pi
                unit = 1.0 / (c * value) if self.scaled else 1.0
                cases.append((c, value, self.t_max * unit, self.dt * unit))
        return cases


###############
# Experiment
################
# Section each experiment kind cannot do without
_KIND_SECTIONS = {
    "dataset": "softmax",
    "quadratic": "quadratic",
    "theory": "theory",
}


class ExperimentConfig(_Spec):
    """A complete experiment.

    ``softmax`` experiments need ``dataset`` and ``optimizers``;
    ``quadratic`` ones need ``quadratic`` (optimizers are optional);
    ``theory`` ones need ``theory``. ``grid_search`` is required as soon
    as an optimizer has no ``alpha`` or minibatches are drawn.
    """

    schema_version: int = Field(strict=True)
    kind: Literal["softmax", "quadratic", "theory"]
    name: str = "experiment"
    output_dir: str | None = None
    dataset: DatasetSpec | None = None
    model: ModelSpec = Field(default_factory=ModelSpec)
    optimizers: tuple[OptimizerSpec, ...] = ()
    steps: int = Field(default=1000, strict=True, ge=1)
    batch: BatchingSpec = Field(default_factory=BatchingSpec)
    grid_search: GridSearchSpec | None = None
    checkpoints: CheckpointSpec = Field(default_factory=CheckpointSpec)
    analysis: AnalysisSpec = Field(default_factory=AnalysisSpec)
    quadratic: QuadraticSpec | None = None
    theory: TheorySpec | None = None

    @field_validator("schema_version")
    @classmethod
    def _supported_version(cls, value: int) -> int:
        if value != SCHEMA_VERSION:
            raise ValueError(f"unsupported version {value}")
        return value

    @field_validator("dataset", "quadratic", "theory")
    @classmethod
    def _section_of_kind(cls, value: Any, info: ValidationInfo) -> Any:
        kind = info.data.get("kind")
        if value is None and _KIND_SECTIONS[str(info.field_name)] == kind:
            raise ValueError(f"required by {kind} experiments")
        return value

    @field_validator("optimizers")
    @classmethod
    def _unique_labels(
        cls, value: tuple[OptimizerSpec, ...], info: ValidationInfo
    ) -> tuple[OptimizerSpec, ...]:
        if not value and info.data.get("kind") == "softmax":
            raise ValueError("softmax experiments need an optimizer")
        labels = [o.label for o in value]
        if len(set(labels)) != len(labels):
            raise ValueError("names must be unique (set name: to tell apart)")
        return value

    @field_validator("grid_search")
    @classmethod
    def _searched_or_sampled(
        cls, value: GridSearchSpec | None, info: ValidationInfo
    ) -> GridSearchSpec | None:
        if value is not None:
            return value
        if any(o.alpha is None for o in info.data.get("optimizers", ())):
            raise ValueError("required when an optimizer has no alpha")
        batch = info.data.get("batch")
        if batch is not None and batch.kind == "minibatch":
            raise ValueError("its seeds drive minibatch sampling")
        return value

    @property
    def seeds(self) -> tuple[int, ...]:
        """Grid-search seeds; the first one also seeds minibatches."""
        if self.grid_search is None:
            return (0,)
        return self.grid_search.seeds

    @classmethod
    def from_dict(cls, content: Any) -> "ExperimentConfig":
        """Parse and validate a config mapping.

        Parameters
        ----------
        content : Any
            parsed YAML or JSON content

        Returns
        -------
        ExperimentConfig
            validated configuration

        Raises
        ------
        ConfigError
            naming the first offending field

        """
        return _validate(cls, content)


def parse_dataset_spec(content: Any) -> DatasetSpec:
    """Validate a stand-alone dataset section (``dataset gen``)."""
    if isinstance(content, dict) and "dataset" in content:
        return _validate(DatasetSpec, content["dataset"], "dataset")
    return _validate(DatasetSpec, content)


def build_dataset(
    spec: DatasetSpec, base_dir: Path | None = None
) -> Dataset:
    """Build a dataset, reporting infeasible settings as config errors."""
    try:
        return spec.build(base_dir)
    except (ValueError, OSError) as err:
        raise ConfigError("dataset", str(err)) from err


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate an experiment config file.

    Parameters
    ----------
    path : str | Path
        path to the YAML (or JSON) config

    Returns
    -------
    ExperimentConfig
        validated configuration

    Raises
    ------
    ConfigError
        if the file cannot be parsed or a field is invalid

    """
    try:
        content = utils.load_yaml(path)
    except OSError as err:
        raise ConfigError("<file>", f"cannot read {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError("<file>", f"invalid YAML in {path}: {err}") from err
    config = ExperimentConfig.from_dict(content)
    logger.debug(
        "Loaded %s experiment %r from %s", config.kind, config.name, path
    )
    return config
