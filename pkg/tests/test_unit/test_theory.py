import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import lambertw

from imblab.dataset import FrequencySpec, simple_imbalanced
from imblab.errors import LambertDomainError
from imblab.model import LinearModel
from imblab.optim import OptimizerState, TrainConfig, train
from imblab.theory import (
    BRANCH_POINT,
    FlowParams,
    FlowState,
    gflow_closed_form,
    gflow_loss,
    gflow_loss_bounds,
    gflow_ode_rhs,
    gflow_time_to_loss,
    integrate_gflow,
    lambert_w0,
    lambert_w0_exp,
    quadratic_gd_iterates,
    quadratic_sign_iterates,
    quadratic_table,
    sign_descent_loss,
    sign_descent_time_to_loss,
    theory_table,
)


###############
# Lambert W
################
@pytest.mark.parametrize(
    ("x", "expected"), [(0.0, 0.0), (math.e, 1.0), (BRANCH_POINT, -1.0)]
)
def test_lambert_w0_known_values(x, expected) -> None:
    assert lambert_w0(x) == pytest.approx(expected, abs=1e-14)


def test_lambert_w0_matches_scipy() -> None:
    x = np.concatenate(
        [np.linspace(BRANCH_POINT, 0, 50)[1:], np.geomspace(1e-8, 1e300, 80)]
    )
    np.testing.assert_allclose(
        lambert_w0(x), lambertw(x).real, rtol=1e-12, atol=1e-14
    )


@given(x=st.floats(BRANCH_POINT + 1e-6, 1e200))
def test_lambert_w0_identity(x: float) -> None:
    w = lambert_w0(x)
    assert w >= -1.0
    assert w * math.exp(w) == pytest.approx(x, rel=1e-9, abs=1e-15)


def test_lambert_w0_residual_on_a_dense_grid() -> None:
    x = np.concatenate(
        [
            np.linspace(BRANCH_POINT + 1e-6, 0.0, 2000, endpoint=False),
            np.geomspace(1e-12, 1e12, 8000),
        ]
    )
    w = lambert_w0(x)
    residual = np.abs(w * np.exp(w) - x)
    assert np.all(residual <= 1e-13 * np.maximum(1.0, np.abs(x)))


def test_lambert_w0_keeps_shape() -> None:
    assert lambert_w0(np.ones((2, 3))).shape == (2, 3)
    assert isinstance(lambert_w0(1.0), float)


@pytest.mark.parametrize("x", [-0.5, -1.0, float("nan")])
def test_lambert_w0_domain(x) -> None:
    with pytest.raises(LambertDomainError):
        lambert_w0(x)


def test_lambert_w0_exp_matches_direct() -> None:
    u = np.linspace(-5.0, 50.0, 200)
    np.testing.assert_allclose(
        lambert_w0_exp(u), lambert_w0(np.exp(u)), rtol=1e-13
    )


def test_lambert_w0_exp_beyond_overflow() -> None:
    u = 1e6
    w = lambert_w0_exp(u)
    assert w + math.log(w) == pytest.approx(u, rel=1e-14)


###############
# Gradient flow
################
@pytest.mark.parametrize("c", [2, 10, 1000])
def test_closed_form_starts_at_zero(c) -> None:
    state = gflow_closed_form(FlowParams(c, 1 / c), 0.0)
    assert state.a == pytest.approx(0.0, abs=1e-12)
    assert state.b == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize(("c", "pi"), [(2, 1.0), (10, 0.1), (100, 0.001)])
def test_closed_form_matches_rk4(c, pi) -> None:
    p = FlowParams(c, pi)
    t_end = 5.0 / (c * pi) if c > 2 else 5.0
    rk4 = integrate_gflow(p, t_end, dt=t_end / 5000)
    exact = gflow_closed_form(p, rk4.t)
    np.testing.assert_allclose(rk4.a, exact.a, atol=1e-8)
    np.testing.assert_allclose(rk4.b, exact.b, atol=1e-8)


def test_closed_form_keeps_the_column_structure() -> None:
    state = gflow_closed_form(FlowParams(7, 0.2), np.array([0.5, 3.0]))
    np.testing.assert_allclose(state.b, -np.asarray(state.a) / 6)
    assert np.all(np.diff(state.a) > 0)


def test_ode_rhs_at_equal_logits() -> None:
    p = FlowParams(5, 0.3)
    da, db = gflow_ode_rhs(p, FlowState(t=0.0, a=1.2, b=1.2))
    assert da == pytest.approx(0.3 * (1 - 1 / 5))
    assert db == pytest.approx(-0.3 / 5)


def test_ode_rhs_without_frequency_is_zero() -> None:
    field = gflow_ode_rhs(FlowParams(3, 0.0), FlowState(0.0, 0.4, -0.1))
    assert field == (0.0, 0.0)


def test_ode_rhs_far_from_the_origin() -> None:
    da, db = gflow_ode_rhs(FlowParams(3, 1.0), FlowState(0.0, 800.0, -400.0))
    assert da >= 0.0
    assert math.isfinite(db)


def test_rk4_stages_use_the_flow_field() -> None:
    p, h = FlowParams(5, 0.3), 0.7

    def field(a: float, b: float) -> tuple[float, float]:
        return gflow_ode_rhs(p, FlowState(0.0, a, b))

    k1a, k1b = field(0.0, 0.0)
    k2a, k2b = field(0.5 * h * k1a, 0.5 * h * k1b)
    k3a, k3b = field(0.5 * h * k2a, 0.5 * h * k2b)
    k4a, k4b = field(h * k3a, h * k3b)
    a = 0.0 + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
    b = 0.0 + h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)

    trajectory = integrate_gflow(p, h, dt=h)
    assert trajectory.a[-1] == a
    assert trajectory.b[-1] == b


def test_rk4_fourth_order() -> None:
    p = FlowParams(2, 1.0)
    exact = gflow_closed_form(p, 5.0).a
    coarse = integrate_gflow(p, 5.0, dt=0.1).a[-1]
    fine = integrate_gflow(p, 5.0, dt=0.05).a[-1]
    ratio = abs(coarse - exact) / abs(fine - exact)
    assert 12 < ratio < 20


def test_rk4_zero_time() -> None:
    trajectory = integrate_gflow(FlowParams(4, 0.25), 0.0, dt=0.1)
    np.testing.assert_array_equal(trajectory.t, [0.0])
    np.testing.assert_array_equal(trajectory.a, [0.0])


def test_rk4_lands_on_the_end_time() -> None:
    trajectory = integrate_gflow(FlowParams(4, 0.25), 1.0, 0.3, 2)
    assert trajectory.t[-1] == pytest.approx(1.0)
    assert trajectory.to_frame().shape[1] == 3


@pytest.mark.parametrize("c", [2, 10, 1000])
def test_gflow_loss_starts_at_log_c(c) -> None:
    assert gflow_loss(FlowParams(c, 0.5), 0.0) == pytest.approx(math.log(c))


def test_gflow_loss_is_decreasing() -> None:
    losses = gflow_loss(FlowParams(100, 0.001), np.linspace(0, 1e6, 200))
    assert np.all(np.diff(losses) < 0)


def test_gflow_loss_matches_the_state() -> None:
    p = FlowParams(6, 0.4)
    t = np.array([0.1, 2.0, 40.0])
    state = gflow_closed_form(p, t)
    direct = np.log1p(5 * np.exp(np.asarray(state.b) - state.a))
    np.testing.assert_allclose(gflow_loss(p, t), direct, rtol=1e-12)


def test_gflow_loss_large_time_rate() -> None:
    p = FlowParams(10, 0.1)
    t = 1e7
    scaled = gflow_loss(p, t) * (p.f(t) - 9 * math.log(9)) / 9
    assert scaled == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("c", [2, 10, 100, 1000])
def test_gflow_loss_bounds(c) -> None:
    p = FlowParams(c, 1 / c)
    z = c - 1
    # slightly above the point where log x = 1
    start = z * (math.log(z) + 1) * (1 + 1e-9)
    t = (np.geomspace(start, 1e9, 60) - 1) / (c * p.pi)
    lower, upper = gflow_loss_bounds(p, t)
    loss = gflow_loss(p, t)
    assert np.all(lower <= loss)
    assert np.all(loss <= upper)


def test_gflow_loss_bounds_need_large_time() -> None:
    with pytest.raises(ValueError):
        gflow_loss_bounds(FlowParams(100, 0.01), 0.0)


@pytest.mark.parametrize("c", [2, 10, 100, 1000])
def test_gflow_loss_ratio_band(c) -> None:
    p = FlowParams(c, 1 / c)
    z = c - 1
    threshold = 10 * z * (math.log(z) + 1)
    f = np.geomspace(threshold, 1e12, 50)
    t = (f - 1) / (c * p.pi)
    ratio = gflow_loss(p, t) * (f - z * math.log(z)) / z
    assert np.all((ratio >= 0.9) & (ratio <= 1.5))


@pytest.mark.parametrize("loss", [0.5, 0.1, 1e-3])
def test_gflow_time_to_loss(loss) -> None:
    p = FlowParams(10, 0.05)
    t = gflow_time_to_loss(p, loss)
    assert gflow_loss(p, t) == pytest.approx(loss, rel=1e-10)


def test_gflow_time_to_loss_without_frequency() -> None:
    assert gflow_time_to_loss(FlowParams(3, 0.0), 0.1) == math.inf


def test_rare_classes_are_slower() -> None:
    frequent = gflow_time_to_loss(FlowParams(100, 0.1), 0.01)
    rare = gflow_time_to_loss(FlowParams(100, 0.001), 0.01)
    assert rare == pytest.approx(100 * frequent, rel=1e-2)


###############
# Sign descent
################
@pytest.mark.parametrize("c", [2, 10, 1000])
def test_sign_descent_starts_at_log_c(c) -> None:
    assert sign_descent_loss(c, 0.0) == pytest.approx(math.log(c))


def test_sign_descent_exponential_rate() -> None:
    t = np.array([10.0, 20.0, 30.0])
    ratio = sign_descent_loss(50, t) / (49 * np.exp(-2 * t))
    np.testing.assert_allclose(ratio, 1.0, rtol=1e-6)


def test_sign_descent_time_to_loss() -> None:
    t = sign_descent_time_to_loss(100, 1e-4)
    assert sign_descent_loss(100, t) == pytest.approx(1e-4, rel=1e-10)
    assert sign_descent_time_to_loss(100, math.log(100)) == pytest.approx(
        0.0, abs=1e-12
    )


def test_sign_descent_beats_gradient_flow_on_rare_classes() -> None:
    c = 1000
    sign_time = sign_descent_time_to_loss(c, 0.01)
    gflow_time = gflow_time_to_loss(FlowParams(c, 1 / c), 0.01)
    assert sign_time < gflow_time


def test_discrete_sign_descent_follows_the_continuous_loss() -> None:
    freq = FrequencySpec.from_counts([0.4, 0.3, 0.2, 0.1])
    data = simple_imbalanced(freq, num_groups=4)
    config = TrainConfig(OptimizerState("sign", alpha=0.05), steps=200)
    log = train(LinearModel.zeros(4, 4), data, config)
    expected = sign_descent_loss(4, 0.05 * 200)
    np.testing.assert_allclose(
        log.records[-1].group_losses, expected, rtol=1e-9
    )


@pytest.mark.parametrize("c", [2, 10, 100])
def test_discrete_sign_descent_loss_ignores_frequency(c: int) -> None:
    probs = np.geomspace(0.9, 1e-4, c)
    data = simple_imbalanced(FrequencySpec.from_counts(probs), num_groups=c)
    config = TrainConfig(OptimizerState("sign", alpha=0.02), steps=200)
    log = train(LinearModel.zeros(c, c), data, config)

    losses = log.records[-1].group_losses
    np.testing.assert_allclose(
        losses, sign_descent_loss(c, 0.02 * 200), rtol=1e-10
    )
    np.testing.assert_allclose(losses, losses[0], rtol=1e-14)


def test_small_step_gd_follows_the_gradient_flow() -> None:
    probs = [0.5, 0.3, 0.2]
    data = simple_imbalanced(FrequencySpec.from_counts(probs), num_groups=3)
    config = TrainConfig(OptimizerState("gd", alpha=0.005), steps=1000)
    log = train(LinearModel.zeros(3, 3), data, config)
    expected = [gflow_loss(FlowParams(3, pi), 5.0) for pi in probs]
    np.testing.assert_allclose(
        log.records[-1].group_losses, expected, rtol=2e-2
    )


###############
# Weighted quadratic
################
def test_quadratic_gd_one_step_convergence() -> None:
    closed, simulated = quadratic_gd_iterates(1.0, [1.0, 1.0], [3.0, -2], 4)
    np.testing.assert_array_equal(closed[1:], 0.0)
    np.testing.assert_array_equal(simulated[1:], 0.0)


def test_quadratic_gd_diverges_above_two_over_pi() -> None:
    closed, _ = quadratic_gd_iterates(3.0, [1.0], [1.0], 10)
    magnitudes = np.abs(closed[:, 0])
    assert np.all(np.diff(magnitudes) > 0)
    assert magnitudes[-1] == pytest.approx(2.0**10)


def test_quadratic_gd_zero_step_size() -> None:
    closed, simulated = quadratic_gd_iterates(0.0, [0.3, 1.0], [1, 2], 5)
    np.testing.assert_array_equal(closed, np.tile([1.0, 2.0], (6, 1)))
    np.testing.assert_array_equal(simulated, closed)


@pytest.mark.parametrize("alpha", [0.1, 0.25, 0.3, 0.7, 1.3])
def test_quadratic_gd_closed_form_matches_simulation(alpha) -> None:
    closed, simulated = quadratic_gd_iterates(
        alpha, [0.9, 0.37, 0.01, 0.5], [1.0, -2.0, 0.5, 3.0], 100
    )
    np.testing.assert_array_equal(closed, simulated)
    np.testing.assert_allclose(
        closed[100], (1.0 - alpha * 0.37) ** 100 * -2.0, rtol=1e-12
    )


def test_quadratic_sign_ignores_frequency() -> None:
    iterates = quadratic_sign_iterates(0.25, [0.9, 0.001], [1.0, 1.0], 6)
    np.testing.assert_array_equal(iterates[:, 0], iterates[:, 1])
    np.testing.assert_array_equal(iterates[:4, 0], [1.0, 0.75, 0.5, 0.25])


def test_quadratic_sign_stays_at_zero() -> None:
    iterates = quadratic_sign_iterates(0.5, [1.0], [0.0], 3)
    np.testing.assert_array_equal(iterates, 0.0)


def test_quadratic_inputs_must_match() -> None:
    with pytest.raises(ValueError):
        quadratic_gd_iterates(0.1, [1.0, 0.5], [1.0], 3)


def test_quadratic_table_layout() -> None:
    table = quadratic_table(0.5, [1.0, 0.25], [1.0, 1.0], 3)
    assert list(table.columns) == [
        "step",
        "class",
        "pi",
        "gd_closed",
        "gd_simulated",
        "sign",
    ]
    assert len(table) == 8
    last = table[table["step"] == 3].set_index("class")
    assert last.loc[0, "gd_closed"] == pytest.approx(0.5**3)
    assert last.loc[1, "gd_closed"] == pytest.approx((1 - 0.125) ** 3)


###############
# Comparison table
################
def test_theory_table_single_row() -> None:
    table = theory_table(10, 0.1, 0.0, 0.01)
    assert len(table) == 1
    assert table.loc[0, "loss_gflow"] == pytest.approx(math.log(10))
    assert table.loc[0, "abs_err"] == pytest.approx(0.0, abs=1e-12)


def test_theory_table_is_monotone() -> None:
    table = theory_table(100, 0.001, 1e5, dt=10.0, n_points=51)
    assert len(table) == 51
    assert table["t"].iloc[-1] == pytest.approx(1e5)
    assert np.all(np.diff(table["loss_gflow"]) <= 0)
    assert np.all(np.diff(table["loss_sign"]) <= 0)
    assert table["abs_err"].max() < 1e-6


def test_theory_table_error_shrinks_with_dt() -> None:
    coarse = theory_table(2, 1.0, 5.0, dt=0.1, n_points=11)
    fine = theory_table(2, 1.0, 5.0, dt=0.05, n_points=11)
    ratio = coarse["abs_err"].iloc[-1] / fine["abs_err"].iloc[-1]
    assert 12 < ratio < 20
