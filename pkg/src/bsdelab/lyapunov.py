"""Lyapunov-function certification and the explicit bounds it induces.

A nonnegative C^2 function h is a (global) Lyapunov function for a driver f,
with lower-bound function k(t, y) >= 0, when for all t, y, z

    1/2 sum_{i,i'} d2h(y)[i,i'] (z z^T)[i,i'] - sum_i dh(y)[i] f(i,t,y,z)
        >= ||z||^2 - k(t, y).

Such a function controls the martingale coefficient by the value process: the
conditional Z energy over any window is dominated by the h increment plus the
k integral, which in turn yields uniform value/energy bounds and a recentred
window bound for sub-quadratic drivers.

Everything here is sampling-based.  Residual certification reports "no
violation found" at a stated resolution; it is never a proof, since the
defining inequality is global in (t, y, z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .engine import (RegressionOperator, bootstrap_key, bootstrap_se,
                     martingale_representation)
from .errors import InvalidInputError, NoCertificateError
from .estimators import bmo_norm
from .model import AuditReport, AuditRow, SampleSpec

__all__ = [
    "LyapunovSpec",
    "LyapunovSpecReport",
    "LyapunovResidualReport",
    "LyapunovBounds",
    "ScaledLyapunov",
    "quadratic_lyapunov",
    "validate_lyapunov_spec",
    "lyapunov_residual",
    "scale_convex_to_lyapunov",
    "gamma_from_rate",
    "lyapunov_solution_bounds",
    "c1_from_bounds",
    "lyapunov_z_energy_check",
    "recentered_window_bound",
    "recentered_z_window_check",
    "audit_lyapunov_bounds",
]


@dataclass(frozen=True)
class LyapunovSpec:
    """Candidate Lyapunov data: h with gradient/Hessian, and the lower bound k.

    Evaluator conventions (P is a path/sample batch):

    * ``h(y)``      : (P, d) -> (P,)   nonnegative
    * ``grad_h(y)`` : (P, d) -> (P, d)
    * ``hess_h(y)`` : (P, d) -> (P, d, d)
    * ``k(t, y)``   : scalar t, (P, d) -> (P,)  nonnegative

    ``beta_bar`` is the growth index of k (|k(t,y) - k(t,0)| <= beta_bar *
    sum_i |y_i|) and ``k_potential`` bounds the time potential of |k(., 0)|.
    """

    h: Callable
    grad_h: Callable
    hess_h: Callable
    k: Callable
    beta_bar: float = 0.0
    k_potential: float = 0.0

    def __post_init__(self):
        if self.beta_bar < 0 or self.k_potential < 0:
            raise InvalidInputError("beta_bar and k_potential must be nonnegative")
        if not (math.isfinite(self.beta_bar) and math.isfinite(self.k_potential)):
            raise InvalidInputError("beta_bar and k_potential must be finite")


def quadratic_lyapunov(d, k=None, beta_bar=0.0, k_potential=0.0):
    """The sum-of-squares candidate h(y) = sum_i y_i^2 (convexity constant 2).

    ``k`` defaults to the zero lower-bound function.
    """
    if d < 1:
        raise InvalidInputError("dimension must be >= 1")
    eye2 = 2.0 * np.eye(d)

    def h(y):
        return np.sum(np.square(np.asarray(y, dtype=float)), axis=1)

    def grad_h(y):
        return 2.0 * np.asarray(y, dtype=float)

    def hess_h(y):
        return np.broadcast_to(eye2, (np.asarray(y).shape[0], d, d))

    if k is None:
        def k(t, y):  # noqa: ARG001 - signature fixed by the spec type
            return np.zeros(np.asarray(y).shape[0])

    return LyapunovSpec(h=h, grad_h=grad_h, hess_h=hess_h, k=k,
                        beta_bar=beta_bar, k_potential=k_potential)


@dataclass(frozen=True)
class LyapunovSpecReport:
    """Sampling validation of a LyapunovSpec against its declared structure."""

    passed: bool
    min_h: float
    min_k: float
    worst_grad_error: float
    worst_hess_error: float
    worst_k_growth_excess: float


def validate_lyapunov_spec(spec, d, sample_spec=None, grad_tol=1e-4, growth_tol=1e-9):
    """Check h >= 0, k >= 0, finite-difference gradient/Hessian agreement, and
    the k growth condition |k(t,y) - k(t,0)| <= beta_bar sum|y_i| on samples.

    ``d`` is the y-dimension the evaluators expect.  Never raises on a failed
    check; the report carries the worst excesses.
    """
    if d < 1:
        raise InvalidInputError("dimension must be >= 1")
    ss = sample_spec or SampleSpec()
    rng = np.random.Generator(np.random.Philox(key=ss.seed))
    ts = rng.uniform(0.0, ss.t_max, size=4)
    y = rng.uniform(-ss.y_radius, ss.y_radius, size=(ss.count, d))

    hv = np.asarray(spec.h(y), dtype=float)
    min_h = float(hv.min())
    gv = np.asarray(spec.grad_h(y), dtype=float)
    Hv = np.asarray(spec.hess_h(y), dtype=float)
    if gv.shape != (ss.count, d) or Hv.shape != (ss.count, d, d):
        raise InvalidInputError(
            f"grad_h/hess_h must return (P, {d}) and (P, {d}, {d}); "
            f"got {gv.shape} and {Hv.shape}")

    step = 1e-5 * max(1.0, ss.y_radius)
    worst_g = 0.0
    worst_H = 0.0
    for i in range(d):
        bump = np.zeros((ss.count, d))
        bump[:, i] = step
        fd_g = (np.asarray(spec.h(y + bump)) - np.asarray(spec.h(y - bump))) / (2 * step)
        worst_g = max(worst_g, float(np.max(np.abs(fd_g - gv[:, i]))))
        fd_H = (np.asarray(spec.grad_h(y + bump)) - np.asarray(spec.grad_h(y - bump))) / (2 * step)
        worst_H = max(worst_H, float(np.max(np.abs(fd_H - Hv[:, :, i]))))

    min_k = math.inf
    worst_excess = 0.0
    zeros = np.zeros((1, d))
    for t in ts:
        kv = np.asarray(spec.k(float(t), y), dtype=float)
        k0 = float(np.asarray(spec.k(float(t), zeros), dtype=float)[0])
        min_k = min(min_k, float(kv.min()), k0)
        allowed = spec.beta_bar * np.abs(y).sum(axis=1)
        worst_excess = max(worst_excess, float(np.max(np.abs(kv - k0) - allowed)))

    scale = max(1.0, abs(spec.beta_bar) * d * ss.y_radius)
    passed = (min_h >= -1e-12 and min_k >= -1e-12
              and worst_g <= grad_tol and worst_H <= grad_tol
              and worst_excess <= growth_tol * scale + 1e-12)
    return LyapunovSpecReport(passed=passed, min_h=min_h, min_k=min_k,
                              worst_grad_error=worst_g, worst_hess_error=worst_H,
                              worst_k_growth_excess=worst_excess)


@dataclass(frozen=True)
class LyapunovResidualReport:
    """Minimum sampled slack of the defining inequality, with its argmin.

    ``passed`` means no violation was found at this sampling resolution; it is
    evidence, not proof, since the inequality quantifies over all (t, y, z).
    """

    min_slack: float
    arg_t: float
    arg_y: np.ndarray
    arg_z: np.ndarray
    n_samples: int
    tol: float
    note: str = ""

    @property
    def passed(self):
        return bool(self.min_slack >= -self.tol)


def _sample_batches(dims_d, dims_n, samples, time_points, ladder_size):
    """Deterministic (t, y, z) sample batches: y uniform in a box, z random
    directions scaled by a log ladder of magnitudes (plus the zero matrix)."""
    if samples.z_radius <= 0 or samples.y_radius <= 0:
        raise InvalidInputError("sample radii must be positive")
    rng = np.random.Generator(np.random.Philox(key=samples.seed))
    ts = np.linspace(0.0, samples.t_max, time_points)
    mags = np.concatenate([[0.0],
                           np.geomspace(samples.z_radius * 1e-3,
                                        samples.z_radius, ladder_size)])
    L = mags.size
    batches = []
    for t in ts:
        y = rng.uniform(-samples.y_radius, samples.y_radius,
                        size=(samples.count, dims_d))
        dirs = rng.normal(size=(samples.count, dims_d, dims_n))
        norms = np.sqrt(np.sum(dirs * dirs, axis=(1, 2), keepdims=True))
        np.maximum(norms, 1e-12, out=norms)
        dirs /= norms
        yb = np.repeat(y, L, axis=0)
        zb = np.repeat(dirs, L, axis=0) * np.tile(mags, samples.count)[:, None, None]
        batches.append((float(t), yb, zb))
    return batches


def _residual_slack(spec, driver, t, yb, zb):
    """Slack of the defining inequality at each sample of one batch."""
    fv = np.asarray(driver.f(t, yb, zb), dtype=float)
    gv = np.asarray(spec.grad_h(yb), dtype=float)
    Hv = np.asarray(spec.hess_h(yb), dtype=float)
    kv = np.asarray(spec.k(t, yb), dtype=float)
    quad = 0.5 * np.einsum("pab,paj,pbj->p", Hv, zb, zb)
    drift = np.einsum("pa,pa->p", gv, fv)
    zsq = np.sum(zb * zb, axis=(1, 2))
    slack = quad - drift - zsq + kv
    if not np.all(np.isfinite(slack)):
        raise InvalidInputError("non-finite residual slack; check the evaluators")
    return slack


def lyapunov_residual(spec, driver, samples=None, tol=1e-9,
                      time_points=8, ladder_size=12):
    """Sampled minimum slack of the Lyapunov inequality for (spec, driver).

    ``samples`` is a :class:`~bsdelab.model.SampleSpec`: y is drawn uniformly
    in the box of radius ``y_radius``, z combines random directions with a log
    ladder of magnitudes up to ``z_radius`` (the binding regime of the
    inequality is large ||z||), and t runs over ``time_points`` values in
    ``[0, t_max]``.  Passing means min slack >= -tol at this resolution.
    """
    ss = samples or SampleSpec()
    d, n = driver.dims.d, driver.dims.n
    batches = _sample_batches(d, n, ss, time_points, ladder_size)
    best = math.inf
    arg = (0.0, np.zeros(d), np.zeros((d, n)))
    total = 0
    for t, yb, zb in batches:
        slack = _residual_slack(spec, driver, t, yb, zb)
        total += slack.size
        i = int(np.argmin(slack))
        if slack[i] < best:
            best = float(slack[i])
            arg = (t, yb[i].copy(), zb[i].copy())
    if best >= -tol:
        note = (f"no violation found at resolution {total} samples "
                f"({time_points} time points, ladder to |z| = {ss.z_radius:g})")
    else:
        note = (f"violation of {best:.6g} at t={arg[0]:.6g}, "
                f"|y|={float(np.abs(arg[1]).max()):.6g}, "
                f"|z|={float(np.sqrt(np.sum(arg[2] ** 2))):.6g}")
    return LyapunovResidualReport(min_slack=best, arg_t=arg[0], arg_y=arg[1],
                                  arg_z=arg[2], n_samples=total, tol=tol, note=note)


@dataclass(frozen=True)
class ScaledLyapunov:
    """Result of the convex-scaling search: h(scale * y) with constant k."""

    scale: float
    k_const: float
    spec: LyapunovSpec
    residual: LyapunovResidualReport
    attempts: int
    premise_worst: float


def _scaled_spec(h_base, scale, k_const, horizon):
    s = float(scale)

    def h(y):
        return np.asarray(h_base.h(s * np.asarray(y, dtype=float)), dtype=float)

    def grad_h(y):
        return s * np.asarray(h_base.grad_h(s * np.asarray(y, dtype=float)), dtype=float)

    def hess_h(y):
        return (s * s) * np.asarray(h_base.hess_h(s * np.asarray(y, dtype=float)),
                                    dtype=float)

    def k(t, y):  # noqa: ARG001 - constant lower bound per the scaling lemma
        return np.full(np.asarray(y).shape[0], k_const)

    return LyapunovSpec(h=h, grad_h=grad_h, hess_h=hess_h, k=k,
                        beta_bar=0.0, k_potential=k_const * horizon)


def scale_convex_to_lyapunov(h_base, driver, growth_constant, samples=None,
                             convexity=None, max_doublings=20, tol=1e-9,
                             time_points=8, ladder_size=12):
    """Doubling search for a scale k such that h_base(k y) is Lyapunov for f.

    Premise (verified on the samples, at every tested scale): the total drift
    coupling sum_i |dh_i(k y) f(i, t, y, z)|, which equals
    sum_i |dh_i(y') f(i, t, y'/k, z)| at y' = k y, stays below
    ``growth_constant * (1 + ||z||^2)``.  Each candidate scale is certified by
    :func:`lyapunov_residual` with the constant lower-bound function
    ``k(t, y) = scale * growth_constant``; the first passing scale (starting
    at 1, doubling) is returned.  The scaled spec's ``k_potential`` is taken
    over the sampled horizon ``samples.t_max``.

    Raises :class:`NoCertificateError` when the premise fails on the samples
    or when no scale up to ``2**max_doublings`` passes.  ``convexity``, when
    given, is checked as a lower bound on the sampled Hessian eigenvalues of
    the base candidate.
    """
    if growth_constant < 0:
        raise InvalidInputError("growth constant must be nonnegative")
    if max_doublings < 0:
        raise InvalidInputError("max_doublings must be nonnegative")
    ss = samples or SampleSpec()
    d, n = driver.dims.d, driver.dims.n
    batches = _sample_batches(d, n, ss, time_points, ladder_size)

    if convexity is not None:
        worst_eig = math.inf
        for _, yb, _ in batches:
            Hv = np.asarray(h_base.hess_h(yb), dtype=float)
            worst_eig = min(worst_eig, float(np.linalg.eigvalsh(Hv)[:, 0].min()))
        if worst_eig < convexity * (1.0 - 1e-9) - 1e-12:
            raise InvalidInputError(
                f"declared uniform convexity {convexity} violated: smallest "
                f"sampled Hessian eigenvalue is {worst_eig:.6g}")

    # the driver values do not depend on the scale; evaluate them once
    cached = []
    for t, yb, zb in batches:
        fv = np.asarray(driver.f(t, yb, zb), dtype=float)
        denom = 1.0 + np.sum(zb * zb, axis=(1, 2))
        cached.append((t, yb, zb, fv, denom))

    scale = 1.0
    attempts = 0
    for _ in range(max_doublings + 1):
        attempts += 1
        worst = 0.0
        for t, yb, zb, fv, denom in cached:
            gv = np.asarray(h_base.grad_h(scale * yb), dtype=float)
            coupling = np.sum(np.abs(gv * fv), axis=1)
            worst = max(worst, float(np.max(coupling / denom)))
        if worst > growth_constant * (1.0 + 1e-9) + 1e-12:
            raise NoCertificateError(
                f"growth premise fails at scale {scale:g}: sampled "
                f"sum_i |dh_i(k y) f_i| reaches {worst:.6g} x (1 + |z|^2) "
                f"> C = {growth_constant:g}")
        k_const = scale * growth_constant
        candidate = _scaled_spec(h_base, scale, k_const, ss.t_max)
        report = lyapunov_residual(candidate, driver, samples=ss, tol=tol,
                                   time_points=time_points,
                                   ladder_size=ladder_size)
        if report.passed:
            return ScaledLyapunov(scale=scale, k_const=k_const, spec=candidate,
                                  residual=report, attempts=attempts,
                                  premise_worst=worst)
        scale *= 2.0
    raise NoCertificateError(
        f"no Lyapunov certificate found up to scale 2^{max_doublings}")


def gamma_from_rate(rate):
    """Smallest convenient gamma with kappa(r) r <= gamma (1 + r^2) for r >= 0.

    Exact for a constant rate (eta/2, tight at r=1).  For an affine rate
    g0 + g1 r the split bound g0/2 + g1 is returned (valid for all r, exact
    closed form).  Other kinds are handled by a dense log-grid sup of
    kappa(r) r / (1 + r^2) with a bounded golden-section refinement; rates
    whose ratio is still increasing at r = 1e12 are rejected.
    """
    if rate.kind == "constant":
        return rate.params[0] / 2.0
    if rate.kind == "affine":
        g0, g1 = rate.params
        return g0 / 2.0 + g1

    def ratio(r):
        return float(rate(float(r))) * float(r) / (1.0 + float(r) ** 2)

    grid = np.concatenate([[0.0], np.geomspace(1e-8, 1e8, 3201)])
    vals = np.array([ratio(r) for r in grid])
    if not np.all(np.isfinite(vals)):
        raise InvalidInputError("rate produced non-finite values on the probe grid")
    i = int(np.argmax(vals))
    gamma = float(vals[i])
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    if hi > lo:
        res = minimize_scalar(lambda r: -ratio(r), bounds=(lo, hi), method="bounded")
        gamma = max(gamma, float(-res.fun))
    tail1, tail2 = ratio(1e10), ratio(1e12)
    if max(tail1, tail2) > gamma:
        if tail2 > tail1 * (1.0 + 1e-6):
            raise InvalidInputError(
                "no finite gamma found: kappa(r) r / (1 + r^2) is still "
                "increasing at r = 1e12")
        # ratio approaches a finite limit from below; add headroom so the
        # returned constant dominates the monotone tail
        gamma = max(tail1, tail2) * (1.0 + 1e-6)
    return gamma


@dataclass(frozen=True)
class LyapunovBounds:
    """Uniform bounds induced by a Lyapunov function: either a solution's
    value process is unbounded, or it obeys these constants."""

    y_bound: float
    z_star_sq_bound: float


def lyapunov_solution_bounds(d, beta, gamma, beta_bar, T, xi_sum, f_potential,
                             h_xi_sup, k_potential):
    """Exact evaluation of the Lyapunov value/energy bounds.

    For a driver Lipschitz in y with index ``beta``, z-rate dominated by
    ``kappa(r) r <= gamma (1 + r^2)``, and a Lyapunov pair (h, k) with growth
    index ``beta_bar``:

        sup_t ||sum_i |Y_i|||_inf <= e^{d (beta + gamma beta_bar) T}
            (xi_sum + d (f_potential + gamma T + gamma h_xi_sup
                         + gamma k_potential)),
        ||Z||_star^2 <= h_xi_sup + k_potential + beta_bar T * (the Y bound).
    """
    if d < 1:
        raise InvalidInputError("dimension must be >= 1")
    vals = {"beta": beta, "gamma": gamma, "beta_bar": beta_bar, "T": T,
            "xi_sum": xi_sum, "f_potential": f_potential,
            "h_xi_sup": h_xi_sup, "k_potential": k_potential}
    for name, v in vals.items():
        if not math.isfinite(v) or v < 0:
            raise InvalidInputError(f"{name} must be finite and nonnegative, got {v!r}")
    y_bound = math.exp(d * (beta + gamma * beta_bar) * T) * (
        xi_sum + d * (f_potential + gamma * T + gamma * h_xi_sup
                      + gamma * k_potential))
    z_sq = h_xi_sup + k_potential + beta_bar * T * y_bound
    return LyapunovBounds(y_bound=y_bound, z_star_sq_bound=z_sq)


def c1_from_bounds(bounds):
    """One constant dominating both the value sup and the BMO norm of Z."""
    return max(bounds.y_bound, math.sqrt(bounds.z_star_sq_bound))


def _refit_slack_se(ensemble, t_index, lhs_targets, rhs_targets, label,
                    basis_degree, n_boot=200):
    """Bootstrap SE of max(fit rhs) - max(fit lhs) with the regression refit
    inside each resample, so the fit's own coefficient noise is priced in."""
    op = RegressionOperator(ensemble, t_index, basis_degree)
    X = op.features
    if X is None:
        cols = np.stack([lhs_targets, rhs_targets], axis=1)

        def stat(v):
            return float(v[:, 1].mean() - v[:, 0].mean())
    else:
        m = X.shape[1]
        cols = np.hstack([X, lhs_targets[:, None], rhs_targets[:, None]])

        def stat(v):
            Xr = v[:, :m]
            t = v[:, m:]
            gram = Xr.T @ Xr
            try:
                coef = np.linalg.solve(gram, Xr.T @ t)
            except np.linalg.LinAlgError:
                coef = np.linalg.lstsq(Xr, t, rcond=None)[0]
            fit = Xr @ coef
            return float(fit[:, 1].max() - fit[:, 0].max())

    return bootstrap_se(cols, bootstrap_key(ensemble.seed, label),
                        statistic=stat, n_boot=n_boot)


def _refit_max_se(ensemble, t_index, targets, label, basis_degree, n_boot=200):
    """Bootstrap SE of max(fit targets), refitting inside each resample."""
    zeros = np.zeros_like(targets)
    return _refit_slack_se(ensemble, t_index, targets, zeros, label,
                           basis_degree, n_boot=n_boot)


def _default_intervals(start, M):
    mid = (start + M) // 2
    out = []
    for pair in [(start, mid), (mid, M), (start, M)]:
        if pair[0] < pair[1] and pair not in out:
            out.append(pair)
    return out


def lyapunov_z_energy_check(spec, bundle, ensemble, intervals=None,
                            basis_degree=3, n_boot=200):
    """Audit of the window energy bound: for deterministic intervals [t, t'],

        E[int_t^{t'} ||Z_s||^2 ds | F_t]
            <= E[h(Y_{t'}) - h(Y_t) + int_t^{t'} k(s, Y_s) ds | F_t].

    One ``z_energy_window`` row per interval compares the max over paths of
    the fitted conditional sides; the SE bootstraps the slack with the
    regression refit per resample (both sides share each resample, so an
    exact-equality case prices only the fit noise, not a max-of-noise bias).
    """
    grid = bundle.grid
    M, dt = grid.M, grid.dt
    start = bundle.start_index
    probes = intervals if intervals is not None else _default_intervals(start, M)
    if not probes:
        raise InvalidInputError("need at least one probe interval")
    rows = []
    for k_lo, k_hi in probes:
        k_lo, k_hi = int(k_lo), int(k_hi)
        if not start <= k_lo < k_hi <= M:
            raise InvalidInputError(
                f"interval ({k_lo}, {k_hi}) must satisfy "
                f"{start} <= a < b <= {M}")
        zsq = np.sum(bundle.Z[:, k_lo:k_hi] ** 2, axis=(1, 2, 3)) * dt
        k_int = np.zeros(ensemble.P)
        for k in range(k_lo, k_hi):
            k_int += np.asarray(spec.k(grid.times[k], bundle.Y[:, k]), dtype=float)
        k_int *= dt
        h_hi = np.asarray(spec.h(bundle.Y[:, k_hi]), dtype=float)
        h_lo = np.asarray(spec.h(bundle.Y[:, k_lo]), dtype=float)
        rhs_targets = h_hi - h_lo + k_int

        op = RegressionOperator(ensemble, k_lo, basis_degree)
        fit_lhs = op.fit_values(zsq)
        fit_rhs = op.fit_values(rhs_targets)
        label = f"audit:z_energy_window:{k_lo}:{k_hi}"
        rows.append(AuditRow(
            check_id="z_energy_window",
            lhs=float(fit_lhs.max()),
            rhs=float(fit_rhs.max()),
            se=_refit_slack_se(ensemble, k_lo, zsq, rhs_targets, label,
                               basis_degree, n_boot=n_boot),
            note=(f"window [{grid.times[k_lo]:.6g}, {grid.times[k_hi]:.6g}]: "
                  "conditional Z energy vs h increment plus k integral, "
                  "max over paths of the fitted sides")))
    return AuditReport(rows=rows)


def recentered_window_bound(C1, rho, alpha, width):
    """The sub-quadratic recentred-window bound
    ``4 C1 rho ((1 + C1) w + C1^{1+alpha} w^{(1-alpha)/2})`` at w = width."""
    if not 0.0 <= alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1), got {alpha!r}")
    if C1 < 0 or rho < 0 or width < 0:
        raise InvalidInputError("C1, rho and width must be nonnegative")
    return 4.0 * C1 * rho * ((1.0 + C1) * width
                             + C1 ** (1.0 + alpha) * width ** ((1.0 - alpha) / 2.0))


def recentered_z_window_check(bundle, ensemble, b, windows, C1, rho, alpha,
                              basis_degree=3, n_boot=200):
    """Audit of the recentred window bound for sub-quadratic drivers.

    ``mu^b`` is the martingale representation integrand of Y_b.  For each
    window start t in ``windows`` (grid times strictly before the grid time
    ``b``), the per-component conditional energy

        E[int_t^b |Z_{i,s} - mu^b_{i,s}|^2 ds | F_t]

    is fitted, its worst component compared against
    :func:`recentered_window_bound` with arguments (C1, rho, alpha, b - t);
    C1 should dominate both the value sup and the BMO norm of Z (see
    :func:`c1_from_bounds`), rho and alpha are the declared growth metadata
    of the driver.  One ``recentered_z_window`` row per window.
    """
    if not windows:
        raise InvalidInputError("need at least one window start")
    grid = bundle.grid
    dt = grid.dt
    start = bundle.start_index
    k_b = grid.index_of(b)
    if not start < k_b <= grid.M:
        raise InvalidInputError(
            f"b must lie on the solved window: need index in ({start}, {grid.M}], "
            f"got {k_b}")
    d = bundle.Y.shape[2]
    # Y[:, k_b] is (P, d), so the representation keeps its component axis and
    # mu comes back as (P, M, d, n)
    _, mu = martingale_representation(ensemble, bundle.Y[:, k_b], basis_degree)

    rows = []
    for t in windows:
        k_t = grid.index_of(t)
        if not start <= k_t < k_b:
            raise InvalidInputError(
                f"window start {t!r} must satisfy start <= t < b on the grid")
        rhs = recentered_window_bound(C1, rho, alpha, grid.times[k_b] - grid.times[k_t])
        op = RegressionOperator(ensemble, k_t, basis_degree)
        lhs = -math.inf
        worst_i = 0
        worst_targets = None
        for i in range(d):
            diff = bundle.Z[:, k_t:k_b, i, :] - mu[:, k_t:k_b, i, :]
            energy = np.sum(diff * diff, axis=(1, 2)) * dt
            fitted = op.fit_values(energy)
            top = float(fitted.max())
            if top > lhs:
                lhs, worst_i, worst_targets = top, i, energy
        label = f"audit:recentered_z_window:{k_t}:{k_b}"
        rows.append(AuditRow(
            check_id="recentered_z_window",
            lhs=lhs,
            rhs=rhs,
            se=_refit_max_se(ensemble, k_t, worst_targets, label,
                             basis_degree, n_boot=n_boot),
            note=(f"window [{grid.times[k_t]:.6g}, {grid.times[k_b]:.6g}], "
                  f"component {worst_i}: conditional energy of Z - mu^b vs "
                  f"the sub-quadratic bound (C1={C1:.6g}, rho={rho:.6g}, "
                  f"alpha={alpha:.6g})")))
    return AuditReport(rows=rows)


def audit_lyapunov_bounds(bundle, ensemble, spec, gamma=None, h_xi_sup=None,
                          basis_degree=3):
    """Rows ``lyapunov_value_bound`` and ``lyapunov_z_star``: the realized
    value sup and Z energy norm against :func:`lyapunov_solution_bounds`.

    Needs a declared finite terminal sup bound (otherwise no rows: a sampled
    sup of unbounded data proves nothing).  ``gamma`` defaults to
    :func:`gamma_from_rate` on the declared z-rate; ``h_xi_sup`` defaults to
    the sampled max of h over the terminal values (exact for constant data,
    a proxy otherwise -- pass the known bound when available).
    """
    problem = bundle.problem
    grid = bundle.grid
    start = bundle.start_index
    meta = problem.driver.meta
    d = problem.dims.d
    xi_sup = problem.terminal.sup_bound
    if not math.isfinite(xi_sup):
        return AuditReport(rows=[])
    if gamma is None:
        gamma = gamma_from_rate(meta.z_rate)
    xi_samples = np.asarray(problem.terminal.xi(ensemble.state(grid.M)), dtype=float)
    if h_xi_sup is None:
        h_xi_sup = float(np.asarray(spec.h(xi_samples), dtype=float).max())
        h_note = "sampled h(xi) sup"
    else:
        h_note = "declared h(xi) sup"
    f_potential = meta.root_bound * problem.T
    bounds = lyapunov_solution_bounds(
        d, meta.lipschitz_y, gamma, spec.beta_bar, problem.T,
        d * xi_sup, f_potential, h_xi_sup, spec.k_potential)

    seed = ensemble.seed
    y_l1 = bundle.y_l1_paths()
    rows = [AuditRow(
        check_id="lyapunov_value_bound",
        lhs=float(y_l1.max()),
        rhs=bounds.y_bound,
        se=bootstrap_se(y_l1, bootstrap_key(seed, "audit:lyapunov_value_bound"),
                        statistic=lambda v: -float(v.max())),
        note=f"value sup vs Lyapunov bound (gamma={gamma:.6g}, {h_note})")]

    zfrob = np.zeros((ensemble.P, grid.M))
    zfrob[:, start:] = np.sqrt(np.sum(bundle.Z[:, start:] ** 2, axis=(2, 3)))
    bmo = bmo_norm(ensemble, zfrob, interval=(start, grid.M),
                   basis_degree=basis_degree)
    rows.append(AuditRow(
        check_id="lyapunov_z_star",
        lhs=bmo.value ** 2,
        rhs=bounds.z_star_sq_bound,
        se=bootstrap_se(bmo.path_sup, bootstrap_key(seed, "audit:lyapunov_z_star"),
                        statistic=lambda v: -float(v.max())),
        note=f"squared energy norm of Z vs Lyapunov bound ({h_note})"))
    return AuditReport(rows=rows)
