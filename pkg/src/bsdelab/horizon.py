"""Guaranteed-solvability horizons from a scalar comparison ODE.

The squared Malliavin-derivative bound of a BSDE solution satisfies a
one-dimensional differential inequality whose right side is the comparison
function :func:`g_circle`.  Integrating ``du/ds = g(T - s, u)`` from the
terminal data therefore yields, for as long as ``u`` stays finite, a
certified bound ``u(T - t)`` on the squared derivative sup at calendar time
``t``, and through :func:`lambda_bound_from_u` a bound on the solution's
value sup.  The first blow-up time ``alpha_g`` of the ODE is a guaranteed
solvability horizon: the BSDE is solvable on any terminal window shorter
than it.

:func:`continuation_solve` turns this into a restart scheme: integrate the
ODE from the current terminal data, solve on a window safely inside the
certified horizon, adopt the window's left edge as new terminal data, and
repeat until time zero or until the certified window collapses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .model import RateFunction
from .picard import SliceConfig, SolutionBundle, solve_with_truncation

__all__ = [
    "HorizonParams",
    "HorizonResult",
    "g_circle",
    "integrate_horizon_ode",
    "lambda_bound_from_u",
    "subquadratic_alpha_g",
    "params_from_problem",
    "continuation_solve",
]


@dataclass(frozen=True)
class HorizonParams:
    """Constants feeding the comparison ODE.

    ``beta``/``upsilon``/``kappa`` bound the driver's y-Lipschitz constant,
    root size, and z-rate; the hatted triple bounds the same data for the
    derivative (Malliavin) BSDE; ``xi_sum_sup`` bounds ``sum_i ||xi_i||_inf``
    and ``u0 = sup_theta ||D_theta xi||_inf^2`` seeds the ODE.
    """

    d: int
    n: int
    T: float
    beta: float
    upsilon: float
    beta_hat: float
    upsilon_hat: float
    xi_sum_sup: float
    kappa: RateFunction
    kappa_hat: RateFunction
    u0: float

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise InvalidInputError(f"dimensions must be >= 1, got d={self.d}, n={self.n}")
        if not self.T > 0.0:
            raise InvalidInputError(f"horizon must be positive, got {self.T!r}")
        for name in ("beta", "upsilon", "beta_hat", "upsilon_hat", "xi_sum_sup", "u0"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise InvalidInputError(f"{name} must be finite and nonnegative, got {value!r}")


def g_circle(t, u, params):
    """The comparison function: growth rate of the squared derivative bound.

    ``g(t, u) = u (2 d beta + d^2 n kappa(2 sqrt(u))^2) + sqrt(u) 2 sqrt(d n) (
    upsilon_hat + beta_hat e^{d beta (T-t)} (xi_sum_sup + d (upsilon +
    kappa(sqrt(u)) sqrt(u)) (T-t)) + kappa_hat(sqrt(u)) sqrt(u))``.
    """
    if u < 0.0:
        raise InvalidInputError(f"u must be nonnegative, got {u!r}")
    d, n = params.d, params.n
    root_u = math.sqrt(u)
    quad = u * (2.0 * d * params.beta + d**2 * n * params.kappa(2.0 * root_u) ** 2)
    to_go = params.T - t
    value_bound = math.exp(d * params.beta * to_go) * (
        params.xi_sum_sup
        + d * (params.upsilon + params.kappa(root_u) * root_u) * to_go
    )
    linear = root_u * 2.0 * math.sqrt(d * n) * (
        params.upsilon_hat
        + params.beta_hat * value_bound
        + params.kappa_hat(root_u) * root_u
    )
    return quad + linear


@dataclass(frozen=True)
class HorizonResult:
    """Integrated comparison curve and the estimated blow-up horizon.

    ``times`` are elapsed-from-terminal durations ``s``; ``u_values[i]``
    bounds the squared derivative sup at calendar time ``T - times[i]``.
    ``alpha_g`` is ``T`` when no blow-up occurred before the end, else the
    cap-crossing time refined to relative 1e-4.
    """

    alpha_g: float
    times: np.ndarray
    u_values: np.ndarray
    blew_up: bool
    cap: float

    def u_at(self, s):
        """Interpolated bound at elapsed duration ``s`` (clamped to the range)."""
        return float(np.interp(s, self.times, self.u_values))


def _rk4_step(g, T, s, u, h):
    """One RK4 step of du/ds = g(T - s, u); returns NaN on any bad stage."""
    try:
        k1 = g(T - s, u)
        k2 = g(T - (s + 0.5 * h), u + 0.5 * h * k1)
        k3 = g(T - (s + 0.5 * h), u + 0.5 * h * k2)
        k4 = g(T - (s + h), u + h * k3)
    except (OverflowError, ValueError, InvalidInputError):
        return math.nan
    out = u + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return out if math.isfinite(out) else math.nan


def integrate_horizon_ode(params, g=None, step=None, cap=1.0e12):
    """Fixed-step RK4 integration of the comparison ODE with blow-up detection.

    ``g(t, u)`` defaults to :func:`g_circle` with ``params``.  Integration
    runs on elapsed durations ``s in [0, T]``; blow-up is declared at the
    first step where the state exceeds ``cap`` or leaves float range, and the
    crossing is refined by bisection on the last step.  When ``u0 = 0`` and
    the comparison function vanishes there (a ``sqrt(u)`` degeneracy admits
    several solutions), the integrator takes one Euler micro-step with slope
    ``g(T, step)`` so the continued curve majorises every solution.
    """
    if g is None:
        g = lambda t, u: g_circle(t, u, params)  # noqa: E731
    if step is None:
        step = params.T / 4096.0
    if not (step > 0.0 and math.isfinite(step)):
        raise InvalidConfigError(f"step must be positive and finite, got {step!r}")
    if not cap > params.u0:
        raise InvalidConfigError(f"cap {cap!r} must exceed the initial value {params.u0!r}")
    T = params.T
    s, u = 0.0, float(params.u0)
    times, values = [s], [u]
    if u == 0.0 and g(T, 0.0) == 0.0:
        h0 = min(step, T)
        u = h0 * g(T, h0)
        s = h0
        times.append(s)
        values.append(u)
    blew_up = False
    alpha_g = T
    while s < T - 1e-15 * T:
        h = min(step, T - s)
        u_new = _rk4_step(g, T, s, u, h)
        if math.isnan(u_new) or u_new > cap:
            # bisect the largest accepted substep
            lo, hi = 0.0, h
            while hi - lo > 1e-4 * max(s + lo, step):
                mid = 0.5 * (lo + hi)
                u_mid = _rk4_step(g, T, s, u, mid)
                if math.isnan(u_mid) or u_mid > cap:
                    hi = mid
                else:
                    lo = mid
            if lo > 0.0:
                times.append(s + lo)
                values.append(_rk4_step(g, T, s, u, lo))
            blew_up = True
            alpha_g = s + lo
            break
        s += h
        u = u_new
        times.append(s)
        values.append(u)
    return HorizonResult(
        alpha_g=min(T, alpha_g),
        times=np.asarray(times),
        u_values=np.asarray(values),
        blew_up=blew_up,
        cap=cap,
    )


def lambda_bound_from_u(t, u_value, params):
    """Value-sup bound at calendar time ``t`` given the squared derivative
    bound ``u_value``: ``e^{d beta (T-t)} (xi_sum_sup + d (upsilon +
    kappa(sqrt(u)) sqrt(u)) (T-t))``."""
    if u_value < 0.0:
        raise InvalidInputError(f"u_value must be nonnegative, got {u_value!r}")
    root_u = math.sqrt(u_value)
    to_go = params.T - t
    return math.exp(params.d * params.beta * to_go) * (
        params.xi_sum_sup
        + params.d * (params.upsilon + params.kappa(root_u) * root_u) * to_go
    )


def subquadratic_alpha_g(alpha, C, u0):
    """Closed-form horizon for the reduced comparison ODE
    ``du/dt = C (1 + u)^{1 + alpha}``: ``1 / ((1 + u0)^alpha alpha C)``."""
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha!r}")
    if not C > 0.0:
        raise InvalidInputError(f"C must be positive, got {C!r}")
    if u0 < 0.0:
        raise InvalidInputError(f"u0 must be nonnegative, got {u0!r}")
    return 1.0 / ((1.0 + u0) ** alpha * alpha * C)


def params_from_problem(problem, ensemble=None):
    """Assemble :class:`HorizonParams` from declared problem bounds.

    Undeclared (infinite) terminal bounds fall back to sampled max-over-path
    proxies on ``ensemble`` (terminal gradient required for ``u0``); the
    returned provenance dict records ``"declared"`` or ``"sampled"`` per
    field so downstream reports can echo it.
    """
    meta = problem.driver.meta
    terminal = problem.terminal
    dims = problem.dims
    provenance = {}

    if math.isfinite(terminal.sup_bound):
        xi_sum_sup = dims.d * terminal.sup_bound
        provenance["xi_sum_sup"] = "declared"
    else:
        if ensemble is None:
            raise InvalidInputError(
                "terminal sup bound undeclared: pass an ensemble to sample a proxy"
            )
        xi = np.asarray(terminal.xi(ensemble.state(ensemble.grid.M)), dtype=float)
        xi_sum_sup = float(np.abs(xi).sum(axis=1).max())
        provenance["xi_sum_sup"] = "sampled"

    if math.isfinite(terminal.malliavin_sup_bound):
        u0 = terminal.malliavin_sup_bound**2
        provenance["u0"] = "declared"
    else:
        if ensemble is None or terminal.grad is None:
            raise InvalidInputError(
                "terminal derivative bound undeclared: pass an ensemble and a "
                "terminal gradient to sample a proxy"
            )
        grad = np.asarray(terminal.grad(ensemble.state(ensemble.grid.M)), dtype=float)
        u0 = float(np.square(grad).reshape(grad.shape[0], -1).sum(axis=1).max())
        provenance["u0"] = "sampled"

    params = HorizonParams(
        d=dims.d,
        n=dims.n,
        T=problem.T,
        beta=meta.lipschitz_y,
        upsilon=meta.root_bound,
        beta_hat=meta.malliavin_lipschitz_y,
        upsilon_hat=meta.malliavin_root_bound,
        xi_sum_sup=xi_sum_sup,
        kappa=meta.z_rate,
        kappa_hat=meta.malliavin_z_rate,
        u0=u0,
    )
    return params, provenance


def continuation_solve(problem, ensemble, restart_budget=16, config=None,
                       basis_degree=3, safety=0.9, step=None, cap=1.0e12):
    """Solve leftward by restarting inside certified horizons.

    Each restart integrates the comparison ODE from the current terminal data
    (value-sum sup and squared-derivative bound), solves on a window of at
    most ``safety`` times the certified horizon via the truncation solver,
    and adopts the window's left-edge fitted values as the next terminal.
    Returns ``(bundle, b0)``: the stitched solution (NaN left of the reached
    index) and the left endpoint reached — ``0.0`` when the whole interval
    was covered, the collapse point when a certified window shrank below one
    grid step, or the progress point when the restart budget ran out.
    """
    if restart_budget < 1:
        raise InvalidInputError(f"restart budget must be >= 1, got {restart_budget!r}")
    grid = ensemble.grid
    dims = problem.dims
    config = config or SliceConfig()
    base_params, provenance = params_from_problem(problem, ensemble)

    P, M = ensemble.P, grid.M
    Y = np.full((P, M + 1, dims.d), np.nan)
    Z = np.full((P, M, dims.d, dims.n), np.nan)
    terminal_samples = np.asarray(problem.terminal.xi(ensemble.state(M)), dtype=float)
    Y[:, M] = terminal_samples
    xi_sum_sup = base_params.xi_sum_sup
    u0 = base_params.u0
    right = M
    restarts = []
    b0 = float(grid.times[right])
    collapsed = False

    for _ in range(restart_budget):
        if right == 0:
            break
        b = float(grid.times[right])
        params_r = HorizonParams(
            d=dims.d, n=dims.n, T=b,
            beta=base_params.beta, upsilon=base_params.upsilon,
            beta_hat=base_params.beta_hat, upsilon_hat=base_params.upsilon_hat,
            xi_sum_sup=xi_sum_sup, kappa=base_params.kappa,
            kappa_hat=base_params.kappa_hat, u0=u0,
        )
        result = integrate_horizon_ode(params_r, step=step, cap=cap)
        # finite u on all of [0, b] certifies the whole window; the safety
        # margin only discounts an *estimated* blow-up time
        window = b if not result.blew_up else min(b, safety * result.alpha_g)
        width_steps = min(int(window / grid.dt + 1e-9), right)
        if width_steps < 1:
            collapsed = True
            b0 = b
            break
        k_lo = right - width_steps
        bundle_w, N = solve_with_truncation(
            problem, ensemble, config=config, basis_degree=basis_degree,
            k_lo=k_lo, k_hi=right, terminal_samples=terminal_samples,
        )
        Y[:, k_lo:right + 1] = bundle_w.Y[:, k_lo:right + 1]
        Z[:, k_lo:right] = bundle_w.Z[:, k_lo:right]
        reached = float(grid.times[right] - grid.times[k_lo])
        restarts.append({
            "k_lo": k_lo, "k_hi": right, "alpha_g": result.alpha_g,
            "truncation_N": N, "u0": u0, "xi_sum_sup": xi_sum_sup,
        })
        terminal_samples = bundle_w.Y[:, k_lo]
        xi_sum_sup = float(np.abs(terminal_samples).sum(axis=1).max())
        u0 = result.u_at(reached)
        right = k_lo
        b0 = float(grid.times[right])

    flags = {
        "b0": b0,
        "restarts": restarts,
        "collapsed": collapsed,
        "provenance": provenance,
    }
    bundle = SolutionBundle(
        problem=problem, grid=grid, Y=Y, Z=Z, slice_diagnostics=[],
        start_index=right, flags=flags,
    )
    return bundle, b0
