"""Linear BSDEs: matrix flows, explicit representation solver, and bounds.

A linear BSDE has driver ``f(t, y, z) = root_t + g_t y + sum_j h_{j,t} z_{.,j}``
with bounded matrix coefficients ``g (d x d)`` and ``h_j (d x d)``.  Its
solution admits an explicit representation through the matrix flow ``phi``:

* ``phi`` solves ``d phi = phi g dt + sum_j phi h_j dB_j`` (increments multiply
  on the right), ``psi`` solves ``d psi = (-g psi + sum_j h_j h_j psi) dt -
  sum_j h_j psi dB_j`` (increments multiply on the left, minus sign on the
  Brownian term) and is the pathwise inverse of ``phi``.
* ``Y_a = E[phi_{a,T} xi + int_a^T phi_{a,s} root_s ds | F_a]``.

Both flows are integrated with fixed-step Euler (no higher-order corrections):
the inverse and norm-identity residuals quantify the discretisation error
explicitly, and both shrink under grid refinement.

:func:`solve_linear` evaluates the representation at every grid time in a
single backward sweep: the one-step Euler factors ``E_k = I + g_k dt +
sum_j h_{j,k} dB_{j,k}`` compose to the simulated flow exactly, so the
recursion ``X_k = root_k dt + E_k X_{k+1}`` carries ``phi_{k,T} xi +
sum_{s>=k} phi_{k,s} root_s dt`` without re-anchoring simulations, and a
regression at ``t_k`` yields ``Y_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import RegressionOperator, bootstrap_key, bootstrap_se
from .errors import BlowUpError, InvalidInputError
from .estimators import bmo_norm, exp_functional_rho, potential_bound
from .model import AuditReport, AuditRow, Dimensions, TerminalCondition, frobenius_norm
from .picard import SolutionBundle

__all__ = [
    "LinearCoefficients",
    "LinearProblem",
    "PhiProcess",
    "InverseResidual",
    "VarrhoBounds",
    "simulate_phi_psi",
    "phi_inverse_residual",
    "phi_norm_identity_residual",
    "backward_linear_solve",
    "solve_linear",
    "varrho_bounds",
    "phi_local_martingale_check",
    "audit_linear_bounds",
]

_TINY = 1e-300


@dataclass(frozen=True)
class LinearCoefficients:
    """Coefficient evaluators of a linear driver.

    ``root(t, state) -> (P, d)``, ``g(t, state) -> (P, d, d)`` and
    ``h(t, state) -> (P, d, d, n)`` receive the scalar time and the ``(P, n)``
    Brownian state.  ``beta`` bounds ``max(||g||, max_j ||h_j||)`` per
    component and feeds the exponential factors of the value bounds.
    """

    dims: Dimensions
    root: object
    g: object
    h: object
    beta: float

    def __post_init__(self):
        if not self.beta >= 0.0:
            raise InvalidInputError(f"beta must be nonnegative, got {self.beta!r}")

    @classmethod
    def constant(cls, dims, root, g, h, beta=None):
        """Coefficients from constant arrays ``root (d,)``, ``g (d, d)``,
        ``h (d, d, n)``; ``beta`` defaults to the largest entry magnitude."""
        root_arr = np.broadcast_to(np.asarray(root, dtype=float), (dims.d,)).copy()
        g_arr = np.broadcast_to(np.asarray(g, dtype=float), (dims.d, dims.d)).copy()
        h_arr = np.broadcast_to(np.asarray(h, dtype=float), (dims.d, dims.d, dims.n)).copy()
        if beta is None:
            beta = max(float(np.abs(g_arr).max()), float(np.abs(h_arr).max()))

        def root_eval(t, state):
            return np.broadcast_to(root_arr, (state.shape[0], dims.d))

        def g_eval(t, state):
            return np.broadcast_to(g_arr, (state.shape[0], dims.d, dims.d))

        def h_eval(t, state):
            return np.broadcast_to(h_arr, (state.shape[0], dims.d, dims.d, dims.n))

        return cls(dims=dims, root=root_eval, g=g_eval, h=h_eval, beta=float(beta))


@dataclass(frozen=True)
class LinearProblem:
    """Linear BSDE data: horizon, terminal condition, and coefficients."""

    T: float
    terminal: TerminalCondition
    coeffs: LinearCoefficients

    def __post_init__(self):
        if not self.T > 0.0:
            raise InvalidInputError(f"horizon must be positive, got {self.T!r}")

    @property
    def dims(self):
        return self.coeffs.dims


@dataclass(frozen=True)
class PhiProcess:
    """Simulated flow ``phi`` and its inverse flow ``psi`` on a path ensemble.

    Both are ``(P, M + 1, d, d)`` arrays anchored at ``anchor_index``: they
    equal the identity at and before the anchor, and ``psi_k phi_k`` stays
    within Euler error of the identity afterwards.
    """

    anchor_index: int
    phi: np.ndarray
    psi: np.ndarray


def _coefficients_at(coeffs, ensemble, k):
    t = float(ensemble.grid.times[k])
    state = ensemble.state(k)
    P, dims = ensemble.P, coeffs.dims
    g_k = np.asarray(coeffs.g(t, state), dtype=float)
    h_k = np.asarray(coeffs.h(t, state), dtype=float)
    if g_k.shape != (P, dims.d, dims.d) or h_k.shape != (P, dims.d, dims.d, dims.n):
        raise InvalidInputError(
            f"coefficient shapes at k={k} must be (P,d,d) and (P,d,d,n); "
            f"got {g_k.shape} and {h_k.shape}"
        )
    return g_k, h_k


def simulate_phi_psi(coeffs, ensemble, anchor_index=0):
    """Euler-integrate the flow pair ``(phi, psi)`` from an anchor time.

    Raises :class:`BlowUpError` (with the first failing grid index) if either
    flow leaves float range.
    """
    grid = ensemble.grid
    anchor_index = int(anchor_index)
    if not 0 <= anchor_index < grid.M:
        raise InvalidInputError(f"anchor index must lie in [0, M), got {anchor_index}")
    d = coeffs.dims.d
    dt = grid.dt
    eye = np.eye(d)
    phi = np.empty((ensemble.P, grid.M + 1, d, d))
    psi = np.empty_like(phi)
    phi[:, : anchor_index + 1] = eye
    psi[:, : anchor_index + 1] = eye
    for k in range(anchor_index, grid.M):
        g_k, h_k = _coefficients_at(coeffs, ensemble, k)
        dB = ensemble.increments[:, k]
        noise = np.einsum("pijl,pl->pij", h_k, dB)
        forward = eye + g_k * dt + noise
        phi[:, k + 1] = np.einsum("pij,pjk->pik", phi[:, k], forward)
        h_sq = np.einsum("pijl,pjkl->pik", h_k, h_k)
        backward = eye - g_k * dt + h_sq * dt - noise
        psi[:, k + 1] = np.einsum("pij,pjk->pik", backward, psi[:, k])
        if not (np.all(np.isfinite(phi[:, k + 1])) and np.all(np.isfinite(psi[:, k + 1]))):
            raise BlowUpError(
                f"flow simulation left float range at grid index {k + 1}",
                first_bad_index=k + 1,
            )
    return PhiProcess(anchor_index=anchor_index, phi=phi, psi=psi)


@dataclass(frozen=True)
class InverseResidual:
    """Deviation of ``psi_k phi_k`` from the identity.

    ``pathwise_max`` is the max over paths and grid times of the Frobenius
    norm of ``psi phi - I`` (dominated by the Brownian part of the Euler
    error, order ``sqrt(dt)`` per path); ``averaged_max`` is the max over grid
    times of the Frobenius norm of the path-averaged deviation, in which the
    zero-mean Brownian part cancels and the order-``dt`` drift error remains.
    """

    pathwise_max: float
    averaged_max: float


def phi_inverse_residual(phi_process):
    """Measure ``psi phi - I`` pathwise and in path average."""
    phi, psi = phi_process.phi, phi_process.psi
    d = phi.shape[2]
    eye = np.eye(d)
    pathwise = 0.0
    averaged = 0.0
    for k in range(phi_process.anchor_index, phi.shape[1]):
        res = np.einsum("pij,pjk->pik", psi[:, k], phi[:, k]) - eye
        pathwise = max(pathwise, float(frobenius_norm(res).max()))
        averaged = max(averaged, float(frobenius_norm(res.mean(axis=0)[None])[0]))
    return InverseResidual(pathwise_max=pathwise, averaged_max=averaged)


def phi_norm_identity_residual(phi_process, coeffs, ensemble):
    """Relative deviation of ``||phi_k||_F`` from its drift-times-Doleans form.

    The reconstruction uses the normalised flow ``phibar = phi/||phi||`` and
    ``o_j = phibar h_j``: the drift exponent integrand is
    ``<phibar | phibar g> + 1/2 sum_j ||o_j||^2 (1 - <phibar | o_j/||o_j||>^2)``
    (left-endpoint sums over the same increments as the simulation), and the
    Doleans factor is accumulated as the Euler product
    ``prod_k (1 + sum_j <phibar | o_j> dB_{j,k})`` so that its discretisation
    error matches the flow's own Euler error order.  Returns the max over
    paths and grid times of ``|LHS - RHS| / LHS``.
    """
    grid = ensemble.grid
    phi = phi_process.phi
    d = coeffs.dims.d
    sqrt_d = math.sqrt(d)
    dt = grid.dt
    integral = np.zeros(ensemble.P)
    doleans = np.ones(ensemble.P)
    worst = 0.0
    for k in range(phi_process.anchor_index, grid.M + 1):
        lhs = frobenius_norm(phi[:, k])
        rhs = sqrt_d * np.exp(integral) * doleans
        rel = np.abs(lhs - rhs) / np.maximum(lhs, _TINY)
        worst = max(worst, float(rel.max()))
        if k == grid.M:
            break
        g_k, h_k = _coefficients_at(coeffs, ensemble, k)
        dB = ensemble.increments[:, k]
        phibar = phi[:, k] / np.maximum(lhs, _TINY)[:, None, None]
        drift = np.einsum("pij,pik,pkj->p", phibar, phibar, g_k)
        noise = np.zeros(ensemble.P)
        for j in range(coeffs.dims.n):
            o_j = np.einsum("pij,pjk->pik", phibar, h_k[:, :, :, j])
            o_sq = np.einsum("pij,pij->p", o_j, o_j)
            c_j = np.einsum("pij,pij->p", phibar, o_j)
            # 1/2 ||o_j||^2 (1 - <phibar|o_j/||o_j||>^2) = 1/2 (||o_j||^2 - c_j^2)
            drift += 0.5 * (o_sq - c_j**2)
            noise += c_j * dB[:, j]
        integral += drift * dt
        doleans *= 1.0 + noise
    return worst


def backward_linear_solve(ensemble, d, root_at, g_at, h_at, terminal_samples,
                          k_lo=0, basis_degree=3):
    """Shared backward recursion on the one-step Euler factors.

    ``root_at(k) -> (P, d)``, ``g_at(k) -> (P, d, d)``, ``h_at(k) ->
    (P, d, d, n)`` evaluate the coefficients on the ensemble at grid index
    ``k``.  Returns ``(Y, Z)`` with ``Y`` of shape ``(P, M + 1, d)`` (zeros
    before ``k_lo``, the raw terminal samples at ``M``) and ``Z`` of shape
    ``(P, M, d, n)``; ``Y_k`` is the regression at ``t_k`` of the transported
    representation value, and ``Z_k`` the regression of the variance-reduced
    increment target ``(Y_{k+1} - E_k Y_{k+1}) dB_k / dt``.
    """
    grid = ensemble.grid
    P, n = ensemble.P, ensemble.n
    dt = grid.dt
    terminal = np.asarray(terminal_samples, dtype=float)
    if terminal.shape != (P, d):
        raise InvalidInputError(f"terminal samples must have shape (P, {d}), got {terminal.shape}")
    if not 0 <= int(k_lo) < grid.M:
        raise InvalidInputError(f"k_lo must lie in [0, M), got {k_lo}")
    k_lo = int(k_lo)
    eye = np.eye(d)
    Y = np.zeros((P, grid.M + 1, d))
    Z = np.zeros((P, grid.M, d, n))
    Y[:, grid.M] = terminal
    X = terminal.copy()
    for k in range(grid.M - 1, k_lo - 1, -1):
        g_k = np.asarray(g_at(k), dtype=float)
        h_k = np.asarray(h_at(k), dtype=float)
        root_k = np.asarray(root_at(k), dtype=float)
        dB = ensemble.increments[:, k]
        factor = eye + g_k * dt + np.einsum("pijl,pl->pij", h_k, dB)
        X = root_k * dt + np.einsum("pij,pj->pi", factor, X)
        if not np.all(np.isfinite(X)):
            raise BlowUpError(
                f"backward linear recursion left float range at grid index {k}",
                first_bad_index=k,
            )
        op = RegressionOperator(ensemble, k, basis_degree)
        Y[:, k] = op.fit_values(X)
        y_next = Y[:, k + 1]
        y_hat = op.fit_values(y_next)
        z_target = (y_next - y_hat)[:, :, None] * dB[:, None, :] / dt
        Z[:, k] = op.fit_values(z_target.reshape(P, d * n)).reshape(P, d, n)
    return Y, Z


def solve_linear(problem, ensemble, basis_degree=3):
    """Solve a linear BSDE by the flow representation, anchored at every grid
    time in one backward sweep.

    The returned bundle's flags carry the conditional exponential-moment gate
    of the ``h`` coefficients at exponent 28 (``rho28_log``); ``rho_warning``
    is set when that estimate exceeds the reporting cap, i.e. when the
    representation's integrability hypothesis looks doubtful.
    """
    dims = problem.dims
    grid = ensemble.grid
    if ensemble.n != dims.n:
        raise InvalidInputError(
            f"ensemble Brownian dimension {ensemble.n} != coefficient dimension {dims.n}"
        )
    coeffs = problem.coeffs

    h_sq = np.zeros((ensemble.P, grid.M))
    g_cache = {}

    def g_at(k):
        if k not in g_cache:
            g_cache.clear()
            g_cache[k] = _coefficients_at(coeffs, ensemble, k)
        return g_cache[k][0]

    def h_at(k):
        g_at(k)
        h_k = g_cache[k][1]
        h_sq[:, k] = np.square(h_k).reshape(ensemble.P, -1).sum(axis=1)
        return h_k

    def root_at(k):
        return coeffs.root(float(grid.times[k]), ensemble.state(k))

    terminal = np.asarray(problem.terminal.xi(ensemble.state(grid.M)), dtype=float)
    if terminal.ndim == 1:
        terminal = terminal[:, None]
    Y, Z = backward_linear_solve(
        ensemble, dims.d, root_at, g_at, h_at, terminal, k_lo=0, basis_degree=basis_degree
    )
    rho28 = exp_functional_rho(ensemble, np.sqrt(h_sq), 28.0, basis_degree=basis_degree)
    flags = {
        "rho28_log": rho28.log_value,
        "rho_warning": bool(rho28.effectively_infinite),
    }
    return SolutionBundle(
        problem=problem, grid=grid, Y=Y, Z=Z, slice_diagnostics=[], flags=flags
    )


@dataclass(frozen=True)
class VarrhoBounds:
    """Explicit value and energy bounds for linear BSDEs from the exponential
    moments of the ``h`` coefficients."""

    y_bound: float
    z_star_sq_bound: float


def varrho_bounds(d, beta, T, a, xi_sup, f_potential, rho2, rho28,
                  h_bmo_sq_sum, xi_sq_sum):
    """Evaluate the explicit linear-BSDE bounds.

    ``sum_i |Y_{i,a}|`` is bounded by ``d e^{d beta (T-a)} rho2^{1/4} (4/3)
    rho28^{1/8} (xi_sup + sqrt(2) d f_potential)``; the squared BMO norm of
    ``Z`` by ``2 xi_sq_sum + 2 d^2 f_potential^2 + 2 y(0)^2 (1 + 2 beta d T +
    2 d h_bmo_sq_sum)`` where ``y(0)`` is the value bound at ``a = 0``.
    """
    if min(d, T) <= 0 or a < 0 or a > T:
        raise InvalidInputError(f"need d >= 1, 0 <= a <= T, T > 0; got d={d}, a={a}, T={T}")
    if min(beta, xi_sup, f_potential, h_bmo_sq_sum, xi_sq_sum) < 0:
        raise InvalidInputError("bounds inputs must be nonnegative")
    if rho2 < 1.0 or rho28 < 1.0:
        raise InvalidInputError(
            f"exponential moments are at least 1, got rho2={rho2}, rho28={rho28}"
        )

    def y_at(start):
        return (
            d * math.exp(d * beta * (T - start)) * rho2**0.25 * (4.0 / 3.0)
            * rho28**0.125 * (xi_sup + math.sqrt(2.0) * d * f_potential)
        )

    y0 = y_at(0.0)
    z_sq = (
        2.0 * xi_sq_sum
        + 2.0 * d**2 * f_potential**2
        + 2.0 * y0**2 * (1.0 + 2.0 * beta * d * T + 2.0 * d * h_bmo_sq_sum)
    )
    return VarrhoBounds(y_bound=y_at(a), z_star_sq_bound=z_sq)


def phi_local_martingale_check(phi_process, coeffs, bundle, ensemble, n_probes=5):
    """Statistical zero-increment check of ``phi_{a,t} Y_t + int_a^t phi root``.

    For a solved bundle the transported value process is a (local) martingale;
    at ``n_probes`` evenly spaced probe intervals the sampled increment means
    must vanish within three standard errors.  Returns an
    :class:`bsdelab.model.AuditReport` with one row per probe interval
    (lhs = largest component mean magnitude, rhs = 0).
    """
    grid = ensemble.grid
    a = phi_process.anchor_index
    d = coeffs.dims.d
    dt = grid.dt
    if grid.M - a < n_probes:
        raise InvalidInputError(f"needs at least {n_probes} steps after the anchor")
    # transported value process V_k at the probe boundaries
    probes = np.linspace(a, grid.M, n_probes + 1).round().astype(int)
    value = np.zeros((ensemble.P, n_probes + 1, d))
    integral = np.zeros((ensemble.P, d))
    for k in range(a, grid.M + 1):
        hits = np.nonzero(probes == k)[0]
        for idx in hits:
            value[:, idx] = (
                np.einsum("pij,pj->pi", phi_process.phi[:, k], bundle.Y[:, k]) + integral
            )
        if k == grid.M:
            break
        root_k = np.asarray(
            coeffs.root(float(grid.times[k]), ensemble.state(k)), dtype=float
        )
        integral += np.einsum("pij,pj->pi", phi_process.phi[:, k], root_k) * dt
    rows = []
    for idx in range(n_probes):
        diff = value[:, idx + 1] - value[:, idx]
        means = diff.mean(axis=0)
        ses = diff.std(axis=0, ddof=1) / math.sqrt(ensemble.P)
        comp = int(np.argmax(np.abs(means)))
        rows.append(
            AuditRow(
                check_id="linear_local_martingale",
                lhs=float(abs(means[comp])),
                rhs=0.0,
                se=float(ses[comp]),
                note=(
                    f"probe interval [{grid.times[probes[idx]]:.6g}, "
                    f"{grid.times[probes[idx + 1]]:.6g}], component {comp}"
                ),
            )
        )
    return AuditReport(rows=rows)


def audit_linear_bounds(bundle, ensemble, basis_degree=3):
    """Audit a solved linear bundle against :func:`varrho_bounds`.

    Emits ``linear_value_bound`` (realised max over paths and grid times of
    ``sum_i |Y_i|`` against the value bound) and ``linear_z_star`` (realised
    squared BMO norm of ``Z`` against the energy bound).  Standard errors are
    path bootstrap of the max statistics with frozen fitted regressions.
    Requires a declared finite terminal sup bound.
    """
    problem = bundle.problem
    dims = problem.dims
    grid = ensemble.grid
    xi_sup = problem.terminal.sup_bound
    if not math.isfinite(xi_sup):
        raise InvalidInputError("varrho audit needs a declared finite terminal sup bound")
    coeffs = problem.coeffs

    h_samples = np.empty((ensemble.P, grid.M, dims.d, dims.d, dims.n))
    root_samples = np.empty((ensemble.P, grid.M, dims.d))
    for k in range(grid.M):
        _, h_k = _coefficients_at(coeffs, ensemble, k)
        h_samples[:, k] = h_k
        root_samples[:, k] = np.asarray(
            coeffs.root(float(grid.times[k]), ensemble.state(k)), dtype=float
        )

    rho2 = exp_functional_rho(ensemble, h_samples, 2.0, basis_degree=basis_degree)
    rho28 = exp_functional_rho(ensemble, h_samples, 28.0, basis_degree=basis_degree)
    f_pot = potential_bound(ensemble, root_samples, basis_degree=basis_degree)
    h_bmo_sq_sum = sum(
        bmo_norm(ensemble, h_samples[:, :, i], basis_degree=basis_degree).value ** 2
        for i in range(dims.d)
    )
    bounds = varrho_bounds(
        d=dims.d,
        beta=coeffs.beta,
        T=problem.T,
        a=0.0,
        xi_sup=xi_sup,
        f_potential=f_pot.value,
        rho2=max(rho2.value, 1.0),
        rho28=max(rho28.value, 1.0),
        h_bmo_sq_sum=h_bmo_sq_sum,
        xi_sq_sum=dims.d * xi_sup**2,
    )

    y_paths = bundle.y_l1_paths()
    z_est = bmo_norm(ensemble, bundle.Z, basis_degree=basis_degree)
    max_stat = lambda a: float(np.max(a))  # noqa: E731
    rows = [
        AuditRow(
            check_id="linear_value_bound",
            lhs=float(y_paths.max()),
            rhs=bounds.y_bound,
            se=bootstrap_se(
                y_paths, bootstrap_key(ensemble.seed, "audit:linear_value_bound"),
                statistic=max_stat,
            ),
            note=f"rho2={rho2.value:.6g}, rho28={rho28.value:.6g}",
        ),
        AuditRow(
            check_id="linear_z_star",
            lhs=z_est.value**2,
            rhs=bounds.z_star_sq_bound,
            se=bootstrap_se(
                z_est.path_sup, bootstrap_key(ensemble.seed, "audit:linear_z_star"),
                statistic=max_stat,
            ),
            note=f"h BMO^2 sum={h_bmo_sq_sum:.6g}",
        ),
    ]
    return AuditReport(rows=rows)
