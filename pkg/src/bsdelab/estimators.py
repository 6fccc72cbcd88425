"""Conditional tail-integral norms, sliceability certificates, and the
exponential-integrability screen.

This module measures processes sampled on a path ensemble against the
quantities the solvability and integrability criteria consume:

* :func:`bmo_norm` -- grid BMO norm: square root of the sup over grid times of
  the max-over-paths fitted conditional expectation of the remaining squared
  norm integral.
* :func:`potential_bound` -- same tail construction with ``|.|`` instead of the
  squared norm, maximised over components.
* :func:`sliceability_profile` / :func:`slice_exponential_bound` -- how small
  slice-restricted BMO norms get as the slice width shrinks, and the resulting
  ``2^N`` conditional exponential-moment certificate obtained by peeling
  ``N`` slices whose norm squared is at most ``1/2``.
* :func:`exp_functional_rho` -- conditional exponential moments
  ``sup_t max-path E[exp(p * int_t^T ||h_s||^2 ds) | F_t]`` evaluated in log
  space so that astronomically large moments stay comparable.
* :func:`exp_integrability_check` -- the two-sequence boundedness screen over
  a ladder of driver truncation levels.
* :func:`subquadratic_slice_bound` / :func:`np_exponential_parameters` --
  closed-form slice estimates for sub-quadratically growing martingale
  coefficients, with companion sampled audits.

Conventions: process samples are ``(P, M, ...)`` arrays holding the value on
``[t_k, t_{k+1})``; trailing axes are contracted with a Frobenius norm.  Every
sup norm is a max over simulated paths with a 99th-percentile companion, and
conditional expectations are polynomial regressions on the Brownian state
(see :class:`bsdelab.engine.RegressionOperator`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .engine import RegressionOperator, bootstrap_key, bootstrap_se
from .errors import BsdelabError, InvalidInputError
from .model import AuditRow, frobenius_norm, truncated_driver
from .picard import solve_global

__all__ = [
    "RHO_CAP",
    "BMOEstimate",
    "PotentialEstimate",
    "SliceabilityProfile",
    "SliceExponentialCertificate",
    "RhoEstimate",
    "NpParameters",
    "ExpIntegrabilityReport",
    "bmo_norm",
    "potential_bound",
    "sliceability_profile",
    "slice_exponential_bound",
    "slice_certificate_row",
    "exp_functional_rho",
    "np_exponential_parameters",
    "np_exponential_check",
    "subquadratic_slice_bound",
    "subquadratic_slice_check",
    "exp_integrability_check",
]

#: Conditional exponential moments above this are reported as "effectively
#: infinite": the criteria only need finiteness, and larger regression
#: estimates carry no usable precision.
RHO_CAP = 1.0e6
_LOG_RHO_CAP = math.log(RHO_CAP)
_TINY = 1e-300


def _ceil_slice_count(x):
    """Integer ceiling with a relative 1e-9 guard against float fuzz."""
    if not math.isfinite(x) or x <= 0.0:
        raise InvalidInputError(f"slice count ratio must be positive and finite, got {x!r}")
    return max(1, math.ceil(x * (1.0 - 1e-9)))


def _squared_norm_samples(ensemble, X):
    """Return ``(P, M)`` samples of the squared (Frobenius) norm of ``X``."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim < 2 or arr.shape[0] != ensemble.P or arr.shape[1] != ensemble.grid.M:
        raise InvalidInputError(
            "process samples must have shape (P, M, ...) matching the ensemble; "
            f"got {arr.shape} for P={ensemble.P}, M={ensemble.grid.M}"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("process samples must be finite")
    if arr.ndim == 2:
        return arr * arr
    return np.square(arr).reshape(arr.shape[0], arr.shape[1], -1).sum(axis=2)


def _resolve_interval(ensemble, interval):
    M = ensemble.grid.M
    if interval is None:
        return 0, M
    k_lo, k_hi = int(interval[0]), int(interval[1])
    if not 0 <= k_lo < k_hi <= M:
        raise InvalidInputError(f"interval must satisfy 0 <= a < b <= M={M}, got {interval!r}")
    return k_lo, k_hi


def _sup_conditional_tail(ensemble, integrand, k_lo, k_hi, basis_degree):
    """Fitted curve of ``E[sum_{l=k}^{k_hi-1} integrand_l * dt | F_{t_k}]``.

    Returns ``(per_time, path_sup)``: ``per_time[i]`` is the max over paths of
    the fitted tail at grid index ``k_lo + i`` (the final entry, at ``k_hi``,
    is exactly 0), and ``path_sup[p]`` is path ``p``'s max over those times of
    its fitted tails clipped at 0 -- the frozen per-path statistic used to
    bootstrap the max.
    """
    dt = ensemble.grid.dt
    width = k_hi - k_lo
    per_time = np.zeros(width + 1)
    path_sup = np.zeros(ensemble.P)
    running = np.zeros(ensemble.P)
    for i in range(width - 1, -1, -1):
        running += integrand[:, k_lo + i] * dt
        fit = RegressionOperator(ensemble, k_lo + i, basis_degree).fit_values(running)
        np.maximum(fit, 0.0, out=fit)
        per_time[i] = float(fit.max())
        np.maximum(path_sup, fit, out=path_sup)
    return per_time, path_sup


@dataclass(frozen=True)
class BMOEstimate:
    """Grid BMO norm of a process.

    ``value`` is the square root of the sup over grid times in ``interval`` of
    the max-over-paths fitted conditional tail integral of the squared norm;
    ``per_time`` holds that squared-scale curve (one entry per grid time in
    the closed interval, the last being 0).  ``path_sup`` keeps each path's
    largest fitted tail for bootstrap resampling, and ``p99`` is the
    99th-percentile companion of ``value``.
    """

    value: float
    per_time: np.ndarray
    interval: tuple
    paths: int
    path_sup: np.ndarray
    p99: float


def bmo_norm(ensemble, X, interval=None, basis_degree=3):
    """Estimate the BMO norm of process samples ``X`` over a grid interval."""
    sq = _squared_norm_samples(ensemble, X)
    k_lo, k_hi = _resolve_interval(ensemble, interval)
    per_time, path_sup = _sup_conditional_tail(ensemble, sq, k_lo, k_hi, basis_degree)
    return BMOEstimate(
        value=math.sqrt(float(per_time.max())),
        per_time=per_time,
        interval=(k_lo, k_hi),
        paths=ensemble.P,
        path_sup=path_sup,
        p99=math.sqrt(float(np.percentile(path_sup, 99.0))),
    )


@dataclass(frozen=True)
class PotentialEstimate:
    """Sup over grid times of ``E[int_t^T |x_s| ds | F_t]``, max over components."""

    value: float
    per_time: np.ndarray
    interval: tuple
    paths: int
    path_sup: np.ndarray
    p99: float
    components: int


def potential_bound(ensemble, samples, interval=None, basis_degree=3):
    """Estimate the potential norm of scalar or per-component samples.

    ``samples`` is ``(P, M)`` or ``(P, M, d)``; for the latter the reported
    value is the max over components of the per-component potential.
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] != ensemble.P or arr.shape[1] != ensemble.grid.M:
        raise InvalidInputError(
            "samples must have shape (P, M) or (P, M, d) matching the ensemble; "
            f"got {np.asarray(samples).shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("samples must be finite")
    k_lo, k_hi = _resolve_interval(ensemble, interval)
    per_time = np.zeros(k_hi - k_lo + 1)
    path_sup = np.zeros(ensemble.P)
    for i in range(arr.shape[2]):
        pt, ps = _sup_conditional_tail(ensemble, np.abs(arr[:, :, i]), k_lo, k_hi, basis_degree)
        np.maximum(per_time, pt, out=per_time)
        np.maximum(path_sup, ps, out=path_sup)
    return PotentialEstimate(
        value=float(per_time.max()),
        per_time=per_time,
        interval=(k_lo, k_hi),
        paths=ensemble.P,
        path_sup=path_sup,
        p99=float(np.percentile(path_sup, 99.0)),
        components=arr.shape[2],
    )


@dataclass(frozen=True)
class SliceabilityProfile:
    """Worst slice-restricted BMO norm squared per slice width.

    Entry ``i`` estimates the sup over slices of width at most ``deltas[i]``
    of the slice-restricted BMO norm squared; since those slice families are
    nested, the profile is nondecreasing (a running max enforces this on the
    estimated entries).
    """

    deltas: np.ndarray
    worst_slice_norm_sq: np.ndarray
    paths: int


def _worst_window_norm_sq(ensemble, sq, starts, width, basis_degree):
    worst = 0.0
    for k_a in starts:
        k_b = min(k_a + width, ensemble.grid.M)
        per_time, _ = _sup_conditional_tail(ensemble, sq, k_a, k_b, basis_degree)
        worst = max(worst, float(per_time.max()))
    return worst


def sliceability_profile(ensemble, X, deltas, basis_degree=3):
    """Sweep slice widths and record the worst slice-restricted BMO norm squared.

    For each width the sweep places windows at half-width strides across the
    whole grid (windows clipped at ``T``), so neighbouring anchors overlap.
    """
    sq = _squared_norm_samples(ensemble, X)
    grid = ensemble.grid
    deltas_arr = np.sort(np.asarray(list(deltas), dtype=float))
    if deltas_arr.size == 0:
        raise InvalidInputError("deltas must be nonempty")
    if np.any(deltas_arr <= 0.0) or np.any(deltas_arr > grid.T * (1.0 + 1e-9)):
        raise InvalidInputError("slice widths must lie in (0, T]")
    worst = np.zeros(deltas_arr.size)
    for i, delta in enumerate(deltas_arr):
        width = min(max(1, int(round(delta / grid.dt))), grid.M)
        stride = max(1, width // 2)
        starts = range(0, grid.M, stride)
        worst[i] = _worst_window_norm_sq(ensemble, sq, starts, width, basis_degree)
    np.maximum.accumulate(worst, out=worst)
    return SliceabilityProfile(deltas=deltas_arr, worst_slice_norm_sq=worst, paths=ensemble.P)


@dataclass(frozen=True)
class SliceExponentialCertificate:
    """Outcome of the slice-peeling exponential-moment bound at one anchor.

    When ``certified`` is true, ``delta`` is the largest searched width whose
    consecutive windows all have slice BMO norm squared at most ``1/2``,
    ``n_slices = ceil((T - t_a)/delta)`` and ``bound = 2**n_slices`` dominates
    the conditional exponential moment at the anchor.  ``mc_estimate`` (with
    ``mc_log`` and its bootstrap SE) is the direct regression estimate of
    ``max-path E[exp(int_a^T ||X||^2 ds) | F_a]`` for comparison.  When no
    searched width qualifies the result reports ``certified=False`` with an
    infinite bound -- a no-certificate outcome, not an error.
    """

    certified: bool
    delta: float
    n_slices: int
    bound: float
    mc_estimate: float
    mc_log: float
    mc_log_se: float
    a_index: int
    tried: tuple


def slice_exponential_bound(ensemble, X, a_index=0, delta_ladder=None, basis_degree=3):
    """Search slice widths for a ``2^N`` conditional exponential-moment bound.

    Widths are tried in descending order (default ladder: ``(T - t_a)/2**j``
    for ``j = 0..7``) and the first width whose consecutive windows anchored
    at ``a`` all have slice norm squared at most ``1/2`` (plus a 1e-9 boundary
    tolerance) is certified.
    """
    sq = _squared_norm_samples(ensemble, X)
    grid = ensemble.grid
    a_index = int(a_index)
    if not 0 <= a_index < grid.M:
        raise InvalidInputError(f"anchor index must lie in [0, M), got {a_index}")
    t_rem = (grid.M - a_index) * grid.dt
    if delta_ladder is None:
        ladder = [t_rem / 2**j for j in range(8)]
    else:
        ladder = sorted((float(x) for x in delta_ladder), reverse=True)
        if not ladder:
            raise InvalidInputError("delta ladder must be nonempty")
        if ladder[-1] <= 0.0 or ladder[0] > t_rem * (1.0 + 1e-9):
            raise InvalidInputError(f"slice widths must lie in (0, {t_rem}]")

    tried = []
    chosen = None
    for delta in ladder:
        width = max(1, int(round(delta / grid.dt)))
        starts = range(a_index, grid.M, width)
        worst = _worst_window_norm_sq(ensemble, sq, starts, width, basis_degree)
        tried.append((float(delta), worst))
        if worst <= 0.5 + 1e-9:
            chosen = float(delta)
            break

    total = sq[:, a_index:].sum(axis=1) * grid.dt
    w_star = float(total.max())
    fit = RegressionOperator(ensemble, a_index, basis_degree).fit_values(np.exp(total - w_star))
    np.clip(fit, _TINY, None, out=fit)
    mc_log = w_star + math.log(float(fit.max()))
    key = bootstrap_key(ensemble.seed, f"slice_exp_mc:{a_index}")
    mc_log_se = bootstrap_se(fit, key, statistic=lambda a: w_star + math.log(float(np.max(a))))
    mc_estimate = math.exp(mc_log) if mc_log <= 700.0 else float("inf")

    if chosen is None:
        return SliceExponentialCertificate(
            certified=False, delta=float("nan"), n_slices=0, bound=float("inf"),
            mc_estimate=mc_estimate, mc_log=mc_log, mc_log_se=mc_log_se,
            a_index=a_index, tried=tuple(tried),
        )
    n_slices = _ceil_slice_count(t_rem / chosen)
    bound = 2.0**n_slices if n_slices < 1024 else float("inf")
    return SliceExponentialCertificate(
        certified=True, delta=chosen, n_slices=n_slices, bound=bound,
        mc_estimate=mc_estimate, mc_log=mc_log, mc_log_se=mc_log_se,
        a_index=a_index, tried=tuple(tried),
    )


def slice_certificate_row(certificate):
    """Audit row comparing the peeled ``2^N`` bound against the direct MC
    exponential-moment estimate, in log scale."""
    rhs = certificate.n_slices * math.log(2.0) if certificate.certified else float("inf")
    return AuditRow(
        check_id="slice_exp_certificate",
        lhs=certificate.mc_log,
        rhs=rhs,
        se=certificate.mc_log_se,
        note=(
            f"log scale; delta={certificate.delta:.6g}, slices={certificate.n_slices}, "
            f"anchor index {certificate.a_index}"
        ),
    )


@dataclass(frozen=True)
class RhoEstimate:
    """Conditional exponential moment ``sup_t max-path E[e^{p int_t^T ||h||^2}|F_t]``.

    ``log_value`` is always meaningful; ``value`` is capped at :data:`RHO_CAP`
    with ``effectively_infinite`` set when the cap binds.  ``path_log_values``
    holds the per-path fitted log moments at the maximising grid time
    (``argmax_index``) for bootstrap resampling of the max.
    """

    value: float
    log_value: float
    effectively_infinite: bool
    per_time_log: np.ndarray
    p: float
    argmax_index: int
    path_log_values: np.ndarray


def exp_functional_rho(ensemble, h, p, basis_degree=3):
    """Estimate the conditional exponential moment functional of ``h``.

    ``h`` is a process sample array ``(P, M, ...)``; trailing axes are summed
    as squared norms (a matrix stack ``(P, M, d, d, n)`` yields the sum of the
    per-``j`` squared Frobenius norms).  The regression runs in log space:
    per grid time the exponent is shifted by its max over paths before
    exponentiating, so integrands far beyond float range still compare.
    """
    p = float(p)
    if p <= 0.0:
        raise InvalidInputError(f"p must be positive, got {p}")
    sq = _squared_norm_samples(ensemble, h)
    grid = ensemble.grid
    per_time_log = np.zeros(grid.M + 1)
    running = np.zeros(ensemble.P)
    best_log = 0.0
    best_k = grid.M
    best_paths = np.zeros(ensemble.P)
    for k in range(grid.M - 1, -1, -1):
        running += sq[:, k] * grid.dt
        w = p * running
        w_star = float(w.max())
        if w_star == 0.0:
            # zero exponent on every path: the conditional moment is exactly 1
            per_time_log[k] = 0.0
            continue
        fit = RegressionOperator(ensemble, k, basis_degree).fit_values(np.exp(w - w_star))
        np.clip(fit, _TINY, None, out=fit)
        log_k = w_star + math.log(float(fit.max()))
        per_time_log[k] = log_k
        if log_k >= best_log:
            best_log = log_k
            best_k = k
            best_paths = w_star + np.log(fit)
    effectively_infinite = best_log > _LOG_RHO_CAP
    return RhoEstimate(
        value=RHO_CAP if effectively_infinite else float(math.exp(best_log)),
        log_value=best_log,
        effectively_infinite=effectively_infinite,
        per_time_log=per_time_log,
        p=p,
        argmax_index=best_k,
        path_log_values=best_paths,
    )


def subquadratic_slice_bound(c_alpha, alpha, b, b_prime):
    """Closed-form slice estimate ``(b' - b)^(1-alpha) * c_alpha^(2 alpha)``."""
    c_alpha, alpha, b, b_prime = float(c_alpha), float(alpha), float(b), float(b_prime)
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    if b >= b_prime:
        raise InvalidInputError(f"window must satisfy b < b', got [{b}, {b_prime}]")
    if c_alpha < 0.0:
        raise InvalidInputError(f"c_alpha must be nonnegative, got {c_alpha}")
    return (b_prime - b) ** (1.0 - alpha) * c_alpha ** (2.0 * alpha)


def subquadratic_slice_check(ensemble, X, c_alpha, alpha, interval=None, basis_degree=3):
    """Audit row: fitted ``E[int_b^b' ||X||^(2 alpha) ds | F_b]`` (max over
    paths) against :func:`subquadratic_slice_bound` for the window."""
    sq = _squared_norm_samples(ensemble, X)
    k_lo, k_hi = _resolve_interval(ensemble, interval)
    total = (sq[:, k_lo:k_hi] ** float(alpha)).sum(axis=1) * ensemble.grid.dt
    fit = RegressionOperator(ensemble, k_lo, basis_degree).fit_values(total)
    np.maximum(fit, 0.0, out=fit)
    times = ensemble.grid.times
    rhs = subquadratic_slice_bound(c_alpha, alpha, float(times[k_lo]), float(times[k_hi]))
    key = bootstrap_key(ensemble.seed, f"subquadratic_slice_norm:{k_lo}:{k_hi}")
    se = bootstrap_se(fit, key, statistic=lambda a: float(np.max(a)))
    return AuditRow(
        check_id="subquadratic_slice_norm",
        lhs=float(fit.max()),
        rhs=rhs,
        se=se,
        note=f"window [{times[k_lo]:.6g}, {times[k_hi]:.6g}], alpha={alpha}, c_alpha={float(c_alpha):.6g}",
    )


@dataclass(frozen=True)
class NpParameters:
    """Slice width, slice count, and ``2^N`` bound for the conditional
    exponential moment of ``p int ||X||^(2 alpha)`` given a slice constant."""

    p: float
    c_alpha: float
    alpha: float
    horizon: float
    delta: float
    n_slices: int
    bound: float


def np_exponential_parameters(p, c_alpha, alpha, T):
    """Exact slice parameters ``delta = (1/(2 p c^(2 alpha)))^(1/(1-alpha))``,
    ``N = ceil(T/delta)``, ``bound = 2^N``."""
    p, c_alpha, alpha, T = float(p), float(c_alpha), float(alpha), float(T)
    if p < 1.0:
        raise InvalidInputError(f"p must be at least 1, got {p}")
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    if c_alpha <= 0.0:
        raise InvalidInputError(f"c_alpha must be positive, got {c_alpha}")
    if T <= 0.0:
        raise InvalidInputError(f"horizon must be positive, got {T}")
    delta = (1.0 / (2.0 * p * c_alpha ** (2.0 * alpha))) ** (1.0 / (1.0 - alpha))
    n_slices = _ceil_slice_count(T / delta)
    bound = 2.0**n_slices if n_slices < 1024 else float("inf")
    return NpParameters(p=p, c_alpha=c_alpha, alpha=alpha, horizon=T,
                        delta=delta, n_slices=n_slices, bound=bound)


def np_exponential_check(ensemble, X, p, c_alpha, alpha, basis_degree=3):
    """Audit row: log of the estimated ``sup_t max-path E[e^{p int_t^T
    ||X||^(2 alpha)}|F_t]`` against ``N_p * log 2`` from
    :func:`np_exponential_parameters`."""
    params = np_exponential_parameters(p, c_alpha, alpha, ensemble.grid.T)
    sq = _squared_norm_samples(ensemble, X)
    rho = exp_functional_rho(ensemble, sq ** (float(alpha) / 2.0), p, basis_degree)
    key = bootstrap_key(ensemble.seed, "subquadratic_exp_bound")
    se = bootstrap_se(rho.path_log_values, key, statistic=lambda a: float(np.max(a)))
    return AuditRow(
        check_id="subquadratic_exp_bound",
        lhs=rho.log_value,
        rhs=params.n_slices * math.log(2.0),
        se=se,
        note=f"log scale; p={params.p:g}, delta={params.delta:.6g}, slices={params.n_slices}",
    )


def _running_max_stabilises(seq):
    vals = np.asarray(seq, dtype=float)
    if not np.all(np.isfinite(vals)):
        return False
    if vals.size == 1:
        return True
    running = np.maximum.accumulate(vals)
    mid = (vals.size - 1) // 2
    change = running[-1] - running[mid]
    return change <= 0.05 * max(1.0, abs(float(running[-1])))


def _constant_tail(seq):
    vals = np.asarray(seq, dtype=float)
    if not np.all(np.isfinite(vals)):
        return False
    ref = float(vals[-1])
    tol = 0.01 * max(1.0, abs(ref))
    return bool(np.all(np.abs(vals[vals.size // 2:] - ref) <= tol))


@dataclass(frozen=True)
class ExpIntegrabilityReport:
    """Boundedness screen across truncation levels.

    For each level ``N`` the truncated problem is solved and two sequences are
    recorded: ``exp_log_values`` -- log of the conditional exponential moment
    of ``p_factor * int kappa(2 ||Z_N||)^2`` -- and ``root_potentials`` -- the
    worst potential norm over probe ``(j, theta)`` of the per-component
    derivative-direction root ``|grad_y f . DY + grad_z f . DZ + direct|``.
    The verdict is "bounded trend" when the running max of both sequences
    stabilises (relative change below 5% over the last half of the ladder),
    "diverging" otherwise.  A finite ladder only gives evidence, not a proof,
    of either behaviour.
    """

    levels: tuple
    p_factor: float
    exp_log_values: tuple
    root_potentials: tuple
    z_sup: tuple
    verdict: str
    exp_constant_tail: bool
    root_constant_tail: bool
    probes: tuple


def exp_integrability_check(problem, ensemble, N_list, p_factor=None,
                            basis_degree=3, theta_indices=None):
    """Run the two-sequence exponential-integrability screen.

    Solver failures at a level are re-raised annotated with that level.  For
    drivers with a constant rate function and truncation-inactive levels the
    sequences are constant by construction (the truncated solutions agree).
    """
    levels = [float(N) for N in N_list]
    if not levels:
        raise InvalidInputError("N_list must be nonempty")
    if any(not math.isfinite(N) or N <= 0.0 for N in levels):
        raise InvalidInputError(f"truncation levels must be positive, got {levels}")
    dims = problem.dims
    if p_factor is None:
        p_factor = 28.0 * dims.d**2 * dims.n
    if theta_indices is None:
        M = ensemble.grid.M
        theta_indices = sorted({0, M // 4, M // 2, (3 * M) // 4})
    probes = tuple((j, int(theta)) for j in range(dims.n) for theta in theta_indices)
    rate = problem.driver.meta.z_rate

    exp_logs, root_pots, z_sups = [], [], []
    for N in levels:
        problem_N = replace(problem, driver=truncated_driver(problem.driver, N))
        try:
            bundle = solve_global(problem_N, ensemble, basis_degree=basis_degree)
            z_frob = frobenius_norm(bundle.Z)
            rho = exp_functional_rho(ensemble, rate(2.0 * z_frob), p_factor, basis_degree)
            from .malliavin import malliavin_root_potential

            pot = malliavin_root_potential(problem_N, bundle, ensemble, probes, basis_degree)
        except BsdelabError as exc:
            raise type(exc)(f"truncation level N={N:g}: {exc}") from exc
        exp_logs.append(rho.log_value)
        root_pots.append(float(pot))
        z_sups.append(float(z_frob.max()))

    bounded = _running_max_stabilises(exp_logs) and _running_max_stabilises(root_pots)
    return ExpIntegrabilityReport(
        levels=tuple(levels),
        p_factor=float(p_factor),
        exp_log_values=tuple(exp_logs),
        root_potentials=tuple(root_pots),
        z_sup=tuple(z_sups),
        verdict="bounded trend" if bounded else "diverging",
        exp_constant_tail=_constant_tail(exp_logs),
        root_constant_tail=_constant_tail(root_pots),
        probes=probes,
    )
