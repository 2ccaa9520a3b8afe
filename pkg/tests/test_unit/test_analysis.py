import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imblab.analysis import (
    SubsetRule,
    correlation_at,
    correlation_frame,
    correlation_over_trajectory,
    flagged_correlation_frame,
    mean_p_per_group,
    negated_path_stats,
    offdiag_heatmap_sample,
    pearson_log_correlation,
)
from imblab.dataset import (
    FrequencySpec,
    InputDistribution,
    heavy_tailed_labels,
    simple_imbalanced,
)
from imblab.errors import SubsetTooSmallError, UndefinedCorrelationError
from imblab.model import BlockStats, LinearModel, block_stats, predict_probs
from imblab.optim import OptimizerState, TrainConfig, train


@pytest.fixture(scope="module")
def tiered_dataset():
    """Heavy-tailed labels with m=6: 63 classes, 384 samples."""
    return heavy_tailed_labels(6, InputDistribution("uniform01"), seed=0)


def _stats(freq, grad, hess) -> BlockStats:
    freq = np.asarray(freq, dtype=np.float64)
    return BlockStats(
        grad_norm=np.asarray(grad, dtype=np.float64),
        hess_trace=np.asarray(hess, dtype=np.float64),
        mean_p=np.full(freq.size, 0.5),
        freq=freq,
    )


###############
# Pearson correlation
################
@given(
    xs=st.lists(
        st.floats(1e-3, 1e3), min_size=3, max_size=20, unique=True
    )
)
def test_squares_are_perfectly_correlated(xs) -> None:
    x = np.array(xs)
    if np.ptp(np.log(x)) < 1e-3:
        return
    assert pearson_log_correlation(x, x**2) == pytest.approx(1.0)


def test_reciprocals_are_anticorrelated() -> None:
    x = np.array([0.5, 1.0, 4.0, 10.0])
    assert pearson_log_correlation(x, 1 / x) == pytest.approx(-1.0)


def test_constant_values_have_no_correlation() -> None:
    with pytest.raises(UndefinedCorrelationError):
        pearson_log_correlation([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])


@pytest.mark.parametrize(
    ("xs", "ys"),
    [
        ([1.0, 2.0, 3.0], [1.0, 2.0]),
        ([1.0, 2.0], [1.0, 2.0]),
        ([1.0, 0.0, 3.0], [1.0, 2.0, 3.0]),
        ([1.0, 2.0, 3.0], [1.0, -2.0, 3.0]),
    ],
)
def test_pearson_rejects_bad_input(xs, ys) -> None:
    with pytest.raises(ValueError):
        pearson_log_correlation(xs, ys)


###############
# Subset rules and reports
################
def test_subset_rule_default_threshold() -> None:
    # pi * c against log(5) = 1.609
    freq = np.array([0.5, 0.35, 0.1, 0.03, 0.02])
    np.testing.assert_array_equal(SubsetRule().select(freq), [0, 1])
    assert SubsetRule().describe() == "pi*c>=1*log(c)"


def test_subset_rule_keep_all() -> None:
    rule = SubsetRule(threshold=0.0)
    assert rule.describe() == "all"
    assert rule.select(np.full(4, 0.25)).size == 4


def test_synthetic_stats_correlate_perfectly() -> None:
    freq = np.array([0.4, 0.3, 0.2, 0.1])
    report = correlation_at(
        7, _stats(freq, freq, freq), SubsetRule(threshold=0.0)
    )
    assert report.step == 7
    assert report.pearson_log == pytest.approx(1.0)
    assert report.n_classes_used == 4
    assert report.subset_rule == "all"
    assert report.defined


def test_too_few_classes_after_the_rule() -> None:
    freq = np.array([0.7, 0.1, 0.1, 0.1])
    with pytest.raises(SubsetTooSmallError):
        correlation_at(0, _stats(freq, freq, freq), SubsetRule())


def test_uniform_hessian_at_initialization_is_undefined() -> None:
    data = simple_imbalanced(FrequencySpec.from_counts([4, 3, 2, 1]))
    stats = block_stats(LinearModel.zeros(4, 4), data)
    report = correlation_at(0, stats, SubsetRule(threshold=0.0))
    assert not report.defined
    assert math.isnan(report.pearson_log)
    assert report.n_classes_used == 4


def test_correlation_over_steps() -> None:
    freq = np.array([0.4, 0.3, 0.2, 0.1])
    checkpoints = [
        (0, _stats(freq, freq, np.ones(4))),
        (5, _stats(freq, freq, freq**2)),
    ]
    reports = correlation_over_trajectory(
        checkpoints, SubsetRule(threshold=0.0)
    )
    assert [r.step for r in reports] == [0, 5]
    assert not reports[0].defined
    assert reports[1].pearson_log == pytest.approx(1.0)

    frame = correlation_frame(reports)
    assert list(frame.columns) == [
        "step",
        "pearson_log",
        "n_classes_used",
        "subset_rule",
    ]


def test_correlation_needs_two_checkpoints() -> None:
    freq = np.array([0.4, 0.3, 0.2, 0.1])
    with pytest.raises(ValueError):
        correlation_over_trajectory([(0, _stats(freq, freq, freq))])


def test_correlation_along_a_training_run(tiered_dataset) -> None:
    config = TrainConfig(
        OptimizerState("gd", alpha=0.5),
        steps=8,
        checkpoints=(2, 4),
        block_stats=True,
    )
    model = LinearModel.zeros(tiered_dataset.c, tiered_dataset.d)
    log = train(model, tiered_dataset, config)
    reports = correlation_over_trajectory(log)
    assert [r.step for r in reports] == [0, 2, 4, 8]
    # Hessian blocks are identical at W = 0
    assert not reports[0].defined
    assert all(r.defined for r in reports[1:])
    assert all(-1.0 <= r.pearson_log <= 1.0 for r in reports[1:])
    assert {r.n_classes_used for r in reports} == {3}


def test_negated_path(tiered_dataset) -> None:
    model = LinearModel.zeros(tiered_dataset.c, tiered_dataset.d)
    config = TrainConfig(
        OptimizerState("gd", alpha=0.5),
        steps=4,
        block_stats=True,
        keep_params=True,
    )
    log = train(model, tiered_dataset, config)
    negated = negated_path_stats(log, tiered_dataset, bias=False)
    assert [step for step, _ in negated] == [0, 4]
    flipped = LinearModel(W=-log.final_params)
    expected = block_stats(flipped, tiered_dataset)
    np.testing.assert_allclose(negated[-1][1].grad_norm, expected.grad_norm)


def test_negated_path_needs_parameters(tiered_dataset) -> None:
    model = LinearModel.zeros(tiered_dataset.c, tiered_dataset.d)
    config = TrainConfig(OptimizerState("gd", alpha=0.5), steps=2)
    log = train(model, tiered_dataset, config)
    with pytest.raises(ValueError):
        negated_path_stats(log, tiered_dataset, bias=False)


def test_flagged_frame(two_class_simple) -> None:
    config = TrainConfig(
        OptimizerState("sign", alpha=0.1), steps=3, block_stats=True
    )
    log = train(LinearModel.zeros(2, 2), two_class_simple, config)
    frame = flagged_correlation_frame(log, SubsetRule())
    assert list(frame["step"]) == [0, 3]
    assert frame["pearson_log"].isna().all()
    assert (frame["n_classes_used"] == 0).all()


###############
# Mean predicted probability
################
def test_mean_p_at_zero(small_dataset) -> None:
    values = mean_p_per_group(LinearModel.zeros(6, 5), small_dataset)
    np.testing.assert_allclose(values, 1 / 6)


def test_mean_p_of_a_fitted_model() -> None:
    data = simple_imbalanced(FrequencySpec.from_counts([3, 2, 1]))
    model = LinearModel(W=50.0 * np.eye(3))
    np.testing.assert_allclose(mean_p_per_group(model, data), 1.0)


def test_mean_p_single_group(small_dataset) -> None:
    model = LinearModel.gaussian(6, 5, scale=1.0, seed=0)
    one_group = small_dataset.with_groups(1)
    probs = np.array([predict_probs(model, x) for x in one_group.inputs])
    correct = probs[np.arange(one_group.n), one_group.labels]
    np.testing.assert_allclose(
        mean_p_per_group(model, one_group), [correct.mean()]
    )


###############
# Heatmap
################
def test_heatmap_entries(small_dataset) -> None:
    model = LinearModel.gaussian(6, 5, scale=1.0, seed=1)
    sample = offdiag_heatmap_sample(
        model, small_dataset, n_classes=3, n_dims=2, seed=2
    )
    assert sample.values.shape == (6, 6)
    assert list(sample.classes) == sorted(set(sample.classes))
    assert list(sample.dims) == sorted(set(sample.dims))

    probs = np.array([predict_probs(model, x) for x in small_dataset.inputs])
    x = small_dataset.inputs
    for row in range(6):
        for col in range(6):
            k, u = sample.classes[row // 2], sample.dims[row % 2]
            j, v = sample.classes[col // 2], sample.dims[col % 2]
            coef = probs[:, k] * ((k == j) - probs[:, j])
            expected = np.mean(coef * x[:, u] * x[:, v])
            assert sample.values[row, col] == pytest.approx(
                expected, rel=1e-10, abs=1e-15
            )


def test_heatmap_is_block_diagonal_at_zero() -> None:
    data = heavy_tailed_labels(4, InputDistribution("uniform01"), seed=1)
    sample = offdiag_heatmap_sample(
        LinearModel.zeros(data.c, data.d), data, n_classes=4, n_dims=10
    )
    diag, offdiag = sample.block_means()
    assert diag == pytest.approx((data.c - 1) * offdiag)


def test_log_uniform_sampling_favours_frequent_classes(tiered_dataset) -> None:
    model = LinearModel.zeros(tiered_dataset.c, tiered_dataset.d)
    means = {}
    for sampling in ("uniform", "log_uniform"):
        means[sampling] = np.mean(
            [
                offdiag_heatmap_sample(
                    model, tiered_dataset, 8, 2, sampling, seed
                ).classes.mean()
                for seed in range(10)
            ]
        )
    assert means["log_uniform"] < means["uniform"]


def test_heatmap_frame(small_dataset) -> None:
    sample = offdiag_heatmap_sample(
        LinearModel.zeros(6, 5), small_dataset, n_classes=2, n_dims=2
    )
    frame = sample.to_frame()
    assert list(frame.columns) == ["row", "col", "log10_abs"]
    assert len(frame) == 16
    assert frame.loc[5, "row"] == 1
    assert frame.loc[5, "col"] == 1


@pytest.mark.parametrize(
    "kwargs",
    [{"n_classes": 7}, {"n_dims": 0}, {"sampling": "zipf"}],
)
def test_heatmap_rejects_bad_arguments(small_dataset, kwargs) -> None:
    arguments = {"n_classes": 2, "n_dims": 2, **kwargs}
    with pytest.raises(ValueError):
        offdiag_heatmap_sample(
            LinearModel.zeros(6, 5), small_dataset, **arguments
        )
