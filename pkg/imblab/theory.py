"""Continuous-time dynamics of the simple imbalanced setting.

With c classes, standard basis inputs and per-class loss weights pi, the
gradient flow started at W = 0 keeps every column in the form
(a on the diagonal, b elsewhere), with b = -a / (c - 1). Writing
z = c - 1 and f(t) = 1 + c pi t, the exact solution is

    a(t) = (f(t) - z W(x(t))) / c,    x(t) = exp(f(t) / z) / z,

with W the principal branch of the Lambert W function. Continuous sign
descent moves a and b at unit speed and does not depend on pi.

This module also holds the iterates of GD and sign descent on the
separable quadratic sum_k pi_k w_k^2 / 2.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike

from imblab.errors import LambertDomainError, NumericError

logger = logging.getLogger(__name__)

BRANCH_POINT = -math.exp(-1.0)
# Inputs this close below -1/e are treated as the branch point
_BRANCH_TOL = 4 * np.finfo(np.float64).eps
_MAX_ITER = 64


###############
# Lambert W
################
def _lambert_initial_guess(x: np.ndarray) -> np.ndarray:
    guess = np.empty_like(x)

    near_branch = x < -0.25
    p = np.sqrt(np.maximum(2.0 * (math.e * x[near_branch] + 1.0), 0.0))
    guess[near_branch] = -1.0 + p - p**2 / 3.0 + 11.0 / 72.0 * p**3

    moderate = ~near_branch & (x <= math.e)
    guess[moderate] = np.log1p(x[moderate])

    large = x > math.e
    log_x = np.log(x[large])
    log_log_x = np.log(log_x)
    guess[large] = log_x - log_log_x + log_log_x / log_x
    return guess


def lambert_w0(x: ArrayLike) -> float | np.ndarray:
    """Principal branch of the Lambert W function.

    Solves w * exp(w) = x for w >= -1 by Halley iterations, started from
    the branch-point series near -1/e, log1p(x) for moderate x and
    log x - log log x for large x.

    Parameters
    ----------
    x : ArrayLike
        scalar or array with entries >= -1/e

    Returns
    -------
    float | np.ndarray
        W(x), with the shape of ``x``

    Raises
    ------
    LambertDomainError
        if any entry is below -1/e (or not a number)

    """
    values = np.asarray(x, dtype=np.float64)
    if np.any(~(values >= BRANCH_POINT - _BRANCH_TOL)):
        raise LambertDomainError(
            "the principal Lambert W branch needs x >= -1/e"
        )
    flat = np.atleast_1d(values).ravel().copy()
    at_branch = flat <= BRANCH_POINT
    w = _lambert_initial_guess(np.where(at_branch, 0.0, flat))

    active = ~at_branch & np.isfinite(flat) & (flat != 0.0)
    for _ in range(_MAX_ITER):
        if not np.any(active):
            break
        wa, xa = w[active], flat[active]
        ew = np.exp(wa)
        residual = wa * ew - xa
        wp1 = wa + 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            step = residual / (
                ew * wp1 - (wa + 2.0) * residual / (2.0 * wp1)
            )
        step = np.where(np.isfinite(step), step, 0.0)
        w[active] = wa - step
        converged = np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(wa))
        active[np.flatnonzero(active)[converged]] = False

    w[at_branch] = -1.0
    w[flat == 0.0] = 0.0
    w[np.isposinf(flat)] = np.inf
    if values.ndim == 0:
        return float(w[0])
    return w.reshape(values.shape)


def lambert_w0_exp(u: ArrayLike) -> float | np.ndarray:
    """W(exp(u)) without forming exp(u).

    For u > 1 solves w + log(w) = u by Newton iterations from
    u - log(u); smaller u go through :func:`lambert_w0`.
    """
    values = np.asarray(u, dtype=np.float64)
    flat = np.atleast_1d(values).ravel()
    w = np.empty_like(flat)

    small = flat <= 1.0
    w[small] = lambert_w0(np.exp(flat[small]))

    big = ~small
    ub = flat[big]
    wb = ub - np.log(ub)
    for _ in range(_MAX_ITER):
        step = (wb + np.log(wb) - ub) / (1.0 + 1.0 / wb)
        wb = wb - step
        if np.all(np.abs(step) <= 1e-15 * wb):
            break
    w[big] = wb
    if values.ndim == 0:
        return float(w[0])
    return w.reshape(values.shape)


###############
# Gradient flow
################
@dataclass(frozen=True)
class FlowParams:
    """Class count and frequency of the simple imbalanced setting."""

    c: int
    pi: float

    def __post_init__(self) -> None:
        """Check c >= 2 and 0 <= pi <= 1."""
        if self.c < 2:
            raise ValueError("the flow needs at least 2 classes")
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError("pi must lie in [0, 1]")

    @property
    def z(self) -> int:
        """Number of incorrect classes, c - 1."""
        return self.c - 1

    def f(self, t: ArrayLike) -> float | np.ndarray:
        """1 + c pi t."""
        return 1.0 + self.c * self.pi * np.asarray(t, dtype=np.float64)

    def log_x(self, t: ArrayLike) -> float | np.ndarray:
        """Log of the Lambert W argument, f(t)/z - log z."""
        return self.f(t) / self.z - math.log(self.z)


@dataclass(frozen=True)
class FlowState:
    """Correct-class weight a and off-class weight b at time t.

    Fields are scalars, or arrays of matching shape for a sampled
    trajectory.
    """

    t: float | np.ndarray
    a: float | np.ndarray
    b: float | np.ndarray

    def to_frame(self) -> pd.DataFrame:
        """Columns ``t,a,b``."""
        return pd.DataFrame(
            {
                "t": np.atleast_1d(self.t),
                "a": np.atleast_1d(self.a),
                "b": np.atleast_1d(self.b),
            }
        )


def _check_time(t: ArrayLike) -> np.ndarray:
    times = np.asarray(t, dtype=np.float64)
    if np.any(~(times >= 0)):
        raise ValueError("time must be non-negative")
    return times


def _scalar_or_array(values: np.ndarray) -> float | np.ndarray:
    return float(values) if values.ndim == 0 else values


def gflow_closed_form(p: FlowParams, t: ArrayLike) -> FlowState:
    """Exact gradient-flow state at time(s) t.

    Uses zW = f - z log z - z log W, so a = (z/c) log(zW); this is
    algebraically the closed form and avoids cancellation for large t.

    Parameters
    ----------
    p : FlowParams
        class count and frequency
    t : ArrayLike
        non-negative time or times

    Returns
    -------
    FlowState
        a(t) and b(t) = -a(t)/z

    """
    times = _check_time(t)
    w = np.asarray(lambert_w0_exp(p.log_x(times)))
    a = p.z / p.c * np.log(p.z * w)
    b = -a / p.z
    return FlowState(
        t=_scalar_or_array(times),
        a=_scalar_or_array(a),
        b=_scalar_or_array(b),
    )


def _expit(s: float) -> float:
    if s >= 0:
        return 1.0 / (1.0 + math.exp(-s))
    es = math.exp(s)
    return es / (1.0 + es)


def _flow_rhs(
    pi: float, z: int, log_z: float, a: float, b: float
) -> tuple[float, float]:
    wrong = _expit(b - a + log_z)
    return pi * wrong, -pi * wrong / z


def gflow_ode_rhs(p: FlowParams, state: FlowState) -> tuple[float, float]:
    """Right-hand side (da/dt, db/dt) of the gradient flow.

    da/dt = pi (1 - e^a / (e^a + z e^b)) and db/dt = -pi / (e^(a-b) + z),
    both evaluated through the logistic of b - a + log z.
    """
    a, b = float(state.a), float(state.b)
    if not (math.isfinite(a) and math.isfinite(b)):
        raise NumericError(f"non-finite flow state a={a}, b={b}")
    return _flow_rhs(p.pi, p.z, math.log(p.z), a, b)


def integrate_gflow(
    p: FlowParams, t_end: float, dt: float, record_every: int = 1
) -> FlowState:
    """Integrate the flow from a = b = 0 with fixed-step RK4.

    The step is t_end / ceil(t_end / dt), so the last sample is exactly
    at ``t_end``.

    Parameters
    ----------
    p : FlowParams
        class count and frequency
    t_end : float
        final time (0 gives only the initial state)
    dt : float
        largest step size
    record_every : int, optional
        keep every n-th state (the final state is always kept),
        by default 1

    Returns
    -------
    FlowState
        sampled trajectory as arrays

    Raises
    ------
    NumericError
        if the state becomes non-finite

    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    if record_every < 1:
        raise ValueError("record_every must be at least 1")

    n_steps = math.ceil(t_end / dt) if t_end > 0 else 0
    h = t_end / n_steps if n_steps else 0.0
    pi, z, log_z = p.pi, p.z, math.log(p.z)

    a = b = 0.0
    ts, as_, bs = [0.0], [0.0], [0.0]
    for step in range(1, n_steps + 1):
        k1a, k1b = _flow_rhs(pi, z, log_z, a, b)
        k2a, k2b = _flow_rhs(
            pi, z, log_z, a + 0.5 * h * k1a, b + 0.5 * h * k1b
        )
        k3a, k3b = _flow_rhs(
            pi, z, log_z, a + 0.5 * h * k2a, b + 0.5 * h * k2b
        )
        k4a, k4b = _flow_rhs(pi, z, log_z, a + h * k3a, b + h * k3b)
        a += h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
        b += h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)
        if not (math.isfinite(a) and math.isfinite(b)):
            raise NumericError(
                f"RK4 state became non-finite at step {step} "
                f"(t={step * h:g}, c={p.c}, pi={p.pi:g})"
            )
        if step % record_every == 0 or step == n_steps:
            ts.append(step * h)
            as_.append(a)
            bs.append(b)

    logger.debug("RK4: %d steps of %g for c=%d", n_steps, h, p.c)
    return FlowState(t=np.array(ts), a=np.array(as_), b=np.array(bs))


def gflow_loss(p: FlowParams, t: ArrayLike) -> float | np.ndarray:
    """Per-class loss log(1 + z exp(c b(t))) along the exact flow.

    Along the flow z exp(c b) = 1 / W(x), so this is log1p(1 / W).
    """
    times = _check_time(t)
    w = np.asarray(lambert_w0_exp(p.log_x(times)))
    return _scalar_or_array(np.log1p(1.0 / w))


def gflow_loss_bounds(
    p: FlowParams, t: ArrayLike
) -> tuple[float | np.ndarray, float | np.ndarray]:
    """Lower and upper bounds on :func:`gflow_loss` for large t.

    With log x = f/z - log z and W(x) = log x - log log x + h,
    h lies in [L/2, e/(e-1) L] for L = log log x / log x, which gives

        z e^h / (f - z log z + z e^h) <= loss <= z e^h / (f - z log z).

    Valid only where f(t) >= z (log z + 1), i.e. x >= e.
    """
    times = _check_time(t)
    log_x = np.asarray(p.log_x(times))
    if np.any(log_x < 1.0):
        raise ValueError("the bounds need f(t) >= z (log z + 1)")
    ratio = np.log(log_x) / log_x
    h_low = 0.5 * ratio
    h_high = math.e / (math.e - 1.0) * ratio
    denom = p.z * log_x
    lower = p.z * np.exp(h_low) / (denom + p.z * np.exp(h_low))
    upper = p.z * np.exp(h_high) / denom
    return _scalar_or_array(lower), _scalar_or_array(upper)


def gflow_time_to_loss(p: FlowParams, loss: float) -> float:
    """First time at which the gradient-flow loss equals ``loss``.

    Inverts loss = log1p(1/W): W* = 1/expm1(loss), log x* = log W* + W*,
    t* = (z (log x* + log z) - 1) / (c pi). A class with pi = 0 never
    moves, so any loss below log c takes infinite time.
    """
    if not 0.0 < loss <= math.log(p.c):
        raise ValueError("target loss must lie in (0, log c]")
    if p.pi == 0.0:
        return 0.0 if loss == math.log(p.c) else math.inf
    w_star = 1.0 / math.expm1(loss)
    log_x = math.log(w_star) + w_star
    t_star = (p.z * (log_x + math.log(p.z)) - 1.0) / (p.c * p.pi)
    return max(t_star, 0.0)


def sign_descent_loss(c: int, t: ArrayLike) -> float | np.ndarray:
    """Per-class loss of continuous sign descent, log(1 + (c-1) e^(-2t)).

    a(t) = t and b(t) = -t for every class, whatever its frequency.
    """
    if c < 2:
        raise ValueError("sign descent loss needs at least 2 classes")
    times = _check_time(t)
    return _scalar_or_array(np.log1p((c - 1) * np.exp(-2.0 * times)))


def sign_descent_time_to_loss(c: int, loss: float) -> float:
    """Time at which :func:`sign_descent_loss` equals ``loss``."""
    if c < 2:
        raise ValueError("sign descent loss needs at least 2 classes")
    if not 0.0 < loss <= math.log(c):
        raise ValueError("target loss must lie in (0, log c]")
    return max(0.5 * math.log((c - 1) / math.expm1(loss)), 0.0)


def theory_table(
    c: int,
    pi: float,
    t_max: float,
    dt: float,
    n_points: int = 101,
) -> pd.DataFrame:
    """Compare the closed form, RK4 and sign descent on a time grid.

    The RK4 step is shrunk so that every grid point is a step boundary.

    Parameters
    ----------
    c : int
        number of classes
    pi : float
        class frequency in (0, 1]
    t_max : float
        last time (0 gives a single row)
    dt : float
        largest RK4 step
    n_points : int, optional
        number of evenly spaced times, by default 101

    Returns
    -------
    pd.DataFrame
        columns ``c,pi,t,a,b,loss_gflow,loss_sign,a_rk4,abs_err``

    """
    p = FlowParams(c=c, pi=pi)
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_max < 0:
        raise ValueError("t_max must be non-negative")

    if t_max == 0:
        rk4 = integrate_gflow(p, 0.0, dt)
    else:
        intervals = n_points - 1
        per_interval = math.ceil(t_max / (dt * intervals))
        rk4 = integrate_gflow(
            p,
            t_max,
            t_max / (per_interval * intervals),
            record_every=per_interval,
        )
    times = np.asarray(rk4.t)
    exact = gflow_closed_form(p, times)
    a = np.atleast_1d(exact.a)
    return pd.DataFrame(
        {
            "c": c,
            "pi": pi,
            "t": times,
            "a": a,
            "b": np.atleast_1d(exact.b),
            "loss_gflow": np.atleast_1d(gflow_loss(p, times)),
            "loss_sign": np.atleast_1d(sign_descent_loss(c, times)),
            "a_rk4": rk4.a,
            "abs_err": np.abs(np.asarray(rk4.a) - a),
        }
    )


###############
# Weighted quadratic
################
def _quadratic_inputs(
    alpha: float, pi: ArrayLike, w0: ArrayLike, steps: int
) -> tuple[np.ndarray, np.ndarray]:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    weights = np.asarray(pi, dtype=np.float64)
    start = np.asarray(w0, dtype=np.float64)
    if weights.shape != start.shape or weights.ndim != 1:
        raise ValueError("pi and w0 must be vectors of the same length")
    return weights, start


def quadratic_gd_iterates(
    alpha: float, pi: ArrayLike, w0: ArrayLike, steps: int
) -> tuple[np.ndarray, np.ndarray]:
    """GD on sum_k pi_k w_k^2 / 2, in closed form and simulated.

    Parameters
    ----------
    alpha : float
        step size
    pi : ArrayLike
        per-coordinate weights
    w0 : ArrayLike
        starting point
    steps : int
        number of steps T

    Returns
    -------
    tuple[np.ndarray, np.ndarray]
        (T+1) x c arrays: (1 - alpha pi)^t w0 as a running product, and
        the iterates of w <- (1 - alpha pi) w; both multiply in the same
        order, so they agree bit for bit

    """
    weights, start = _quadratic_inputs(alpha, pi, w0, steps)
    factor = 1.0 - alpha * weights
    rows = np.vstack([start, np.broadcast_to(factor, (steps, factor.size))])
    closed = np.multiply.accumulate(rows, axis=0)

    simulated = np.empty((steps + 1, weights.size))
    simulated[0] = start
    for t in range(1, steps + 1):
        simulated[t] = simulated[t - 1] * factor
    return closed, simulated


def quadratic_sign_iterates(
    alpha: float, pi: ArrayLike, w0: ArrayLike, steps: int
) -> np.ndarray:
    """Sign descent w <- w - alpha sign(pi w) on the weighted quadratic.

    Returns the (T+1) x c iterates; they do not depend on pi > 0.
    """
    weights, start = _quadratic_inputs(alpha, pi, w0, steps)
    iterates = np.empty((steps + 1, weights.size))
    iterates[0] = start
    for t in range(1, steps + 1):
        gradient = weights * iterates[t - 1]
        iterates[t] = iterates[t - 1] - alpha * np.sign(gradient)
    return iterates


def quadratic_table(
    alpha: float, pi: ArrayLike, w0: ArrayLike, steps: int
) -> pd.DataFrame:
    """Long table ``step,class,pi,gd_closed,gd_simulated,sign``."""
    closed, simulated = quadratic_gd_iterates(alpha, pi, w0, steps)
    sign = quadratic_sign_iterates(alpha, pi, w0, steps)
    n_rows, c = closed.shape
    return pd.DataFrame(
        {
            "step": np.repeat(np.arange(n_rows), c),
            "class": np.tile(np.arange(c), n_rows),
            "pi": np.tile(np.asarray(pi, dtype=np.float64), n_rows),
            "gd_closed": closed.ravel(),
            "gd_simulated": simulated.ravel(),
            "sign": sign.ravel(),
        }
    )
