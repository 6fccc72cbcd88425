"""Path simulation and regression-based conditional expectations.

A ``PathEnsemble`` carries P Brownian paths on a uniform grid.  Conditional
expectations given the time-t state are least-squares projections onto
monomials of the scaled state B_t / sqrt(t); at t = 0 the projection collapses
to the sample mean.  All randomness flows through counter-based Philox keys,
so identical inputs give bit-identical ensembles and bootstrap draws.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import cho_factor, cho_solve

from .errors import CapacityError, InvalidInputError

DEFAULT_MEMORY_BUDGET = 4 * 2**30
_MAX_SEED = 2**128


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_M = T."""

    T: float
    M: int
    times: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T <= 0:
            raise InvalidInputError("grid horizon T must be positive")
        if self.M < 1:
            raise InvalidInputError("grid needs at least one step")
        object.__setattr__(self, "times", np.linspace(0.0, self.T, self.M + 1))

    @property
    def dt(self):
        return self.T / self.M

    def index_of(self, t):
        """Grid index of a time that must sit on the grid (relative 1e-9)."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.M or abs(t - k * self.dt) > 1e-9 * max(1.0, self.T):
            raise InvalidInputError(f"time {t} is not a grid point of {self}")
        return k


class PathEnsemble:
    """P simulated n-dimensional Brownian paths plus regression caches."""

    def __init__(self, grid, n, P, seed, increments, values):
        self.grid = grid
        self.n = n
        self.P = P
        self.seed = seed
        self.increments = increments  # (P, M, n)
        self.values = values          # (P, M+1, n)
        self._gram_cache = {}

    def state(self, k):
        """Brownian state at grid index k, shape (P, n)."""
        return self.values[:, k, :]

    def __repr__(self):
        return (f"PathEnsemble(P={self.P}, n={self.n}, M={self.grid.M}, "
                f"T={self.grid.T}, seed={self.seed})")


def generate_paths(n, grid, P, seed, memory_budget=None):
    """Simulate P paths of n-dimensional Brownian motion on the grid.

    The ensemble is a deterministic function of (n, grid, P, seed).  Raises
    ``CapacityError`` before allocating if the arrays would exceed the budget
    (default 4 GiB).
    """
    if n < 1 or P < 1:
        raise InvalidInputError(f"need n >= 1 and P >= 1, got n={n}, P={P}")
    if not 0 <= seed < _MAX_SEED:
        raise InvalidInputError("seed must fit in 128 bits")
    budget = DEFAULT_MEMORY_BUDGET if memory_budget is None else memory_budget
    needed = P * n * (2 * grid.M + 1) * 8
    if needed > budget:
        raise CapacityError(
            f"ensemble needs {needed} bytes, budget is {budget}; "
            "lower P or M or raise memory_budget")
    rng = np.random.Generator(np.random.Philox(key=seed))
    increments = rng.normal(0.0, math.sqrt(grid.dt), size=(P, grid.M, n))
    values = np.zeros((P, grid.M + 1, n))
    np.cumsum(increments, axis=1, out=values[:, 1:, :])
    return PathEnsemble(grid, n, P, seed, increments, values)


def _monomial_exponents(n, degree):
    exps = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), total):
            alpha = [0] * n
            for j in combo:
                alpha[j] += 1
            exps.append(tuple(alpha))
    return exps


class RegressionOperator:
    """Projection onto monomials of the scaled state at one grid index.

    Reusable for many targets at the same index; the Cholesky factor of the
    Gram matrix is cached on the ensemble.  Rank problems fall back to a tiny
    ridge on the non-intercept diagonal and set ``ridge_used``.
    """

    def __init__(self, ensemble, t_index, degree):
        if not 0 <= t_index <= ensemble.grid.M:
            raise InvalidInputError(f"t_index {t_index} out of range")
        if degree < 0:
            raise InvalidInputError("basis degree must be nonnegative")
        self.ensemble = ensemble
        self.t_index = t_index
        self.degree = degree
        self.ridge_used = False
        self._mean_mode = t_index == 0 or degree == 0
        if self._mean_mode:
            self._X = None
            self._cho = None
            return
        grid = ensemble.grid
        scale = 1.0 / math.sqrt(max(grid.times[t_index], grid.dt))
        state = ensemble.state(t_index) * scale
        exps = _monomial_exponents(ensemble.n, degree)
        P = ensemble.P
        X = np.empty((P, len(exps)))
        pow_cache = {}
        for col, alpha in enumerate(exps):
            acc = np.ones(P)
            for j, p in enumerate(alpha):
                if p == 0:
                    continue
                if (j, p) not in pow_cache:
                    pow_cache[(j, p)] = state[:, j] ** p
                acc = acc * pow_cache[(j, p)]
            X[:, col] = acc
        self._X = X
        key = (t_index, degree)
        cached = ensemble._gram_cache.get(key)
        if cached is None:
            cached = self._factor_gram(X)
            ensemble._gram_cache[key] = cached
        self._cho, self.ridge_used = cached

    @property
    def features(self):
        """Scaled monomial design rows, ``(P, m)``; ``None`` in plain-mean mode.

        Exposed so audits can bootstrap a refit of the regression (resample
        feature rows together with targets) instead of freezing the fit.
        """
        return self._X

    @staticmethod
    def _factor_gram(X):
        gram = X.T @ X
        try:
            return cho_factor(gram, lower=True, check_finite=False), False
        except LinAlgError:
            pass
        K = gram.shape[0]
        lam = 1e-10 * np.trace(gram) / K
        bump = np.ones(K)
        bump[0] = 0.0  # keep the intercept exact
        for _ in range(6):
            try:
                cho = cho_factor(gram + lam * np.diag(bump), lower=True,
                                 check_finite=False)
                return cho, True
            except LinAlgError:
                lam *= 100.0
        raise InvalidInputError("Gram matrix is numerically singular even with ridge")

    def fit_values(self, targets):
        """Fitted conditional expectations, same shape as ``targets``."""
        targets = np.asarray(targets, dtype=float)
        squeeze = targets.ndim == 1
        if squeeze:
            targets = targets[:, None]
        if targets.shape[0] != self.ensemble.P:
            raise InvalidInputError("targets must have one row per path")
        if self._mean_mode:
            fitted = np.broadcast_to(targets.mean(axis=0), targets.shape).copy()
        else:
            coef = cho_solve(self._cho, self._X.T @ targets, check_finite=False)
            fitted = self._X @ coef
        return fitted[:, 0] if squeeze else fitted


def fit_conditional_expectation(ensemble, t_index, targets, basis_degree=3):
    """E[targets | state at t_index] as fitted values per path."""
    return RegressionOperator(ensemble, t_index, basis_degree).fit_values(targets)


def conditional_integral_tail(ensemble, integrand, t_index, basis_degree=3):
    """E[ int_{t_k}^T X_s ds | F_{t_k} ] from left-endpoint integrand samples.

    ``integrand`` has shape (P, M), one sample per path per step.
    """
    integrand = np.asarray(integrand, dtype=float)
    M = ensemble.grid.M
    if integrand.shape != (ensemble.P, M):
        raise InvalidInputError(f"integrand must be (P, M) = ({ensemble.P}, {M})")
    if t_index == M:
        return np.zeros(ensemble.P)
    tail = integrand[:, t_index:].sum(axis=1) * ensemble.grid.dt
    return fit_conditional_expectation(ensemble, t_index, tail, basis_degree)


def martingale_representation(ensemble, terminal_targets, basis_degree=3):
    """Closed martingale M_k = E[xi | F_k] and its integrand against dB.

    Returns ``(mart, mu)``: for scalar targets (P,), mart is (P, M+1) and mu
    is (P, M, n); for vector targets (P, d) the shapes gain a d axis, giving
    mu of shape (P, M, d, n).  The integrand at step k is the projection of
    (M_{k+1} - M_k) dB_k / dt; subtracting the F_k-measurable M_k costs
    nothing in expectation and cuts the sampling variance.
    """
    targets = np.asarray(terminal_targets, dtype=float)
    squeeze = targets.ndim == 1
    if squeeze:
        targets = targets[:, None]
    P, d = targets.shape
    if P != ensemble.P:
        raise InvalidInputError("terminal targets must have one row per path")
    M, n = ensemble.grid.M, ensemble.n
    dt = ensemble.grid.dt

    mart = np.empty((P, M + 1, d))
    mart[:, M] = targets
    for k in range(M):
        mart[:, k] = fit_conditional_expectation(ensemble, k, targets, basis_degree)

    mu = np.empty((P, M, d, n))
    for k in range(M):
        dM = mart[:, k + 1] - mart[:, k]
        prod = dM[:, :, None] * ensemble.increments[:, k, None, :] / dt
        fitted = fit_conditional_expectation(
            ensemble, k, prod.reshape(P, d * n), basis_degree)
        mu[:, k] = fitted.reshape(P, d, n)
    if squeeze:
        return mart[:, :, 0], mu[:, :, 0, :]
    return mart, mu


def mean_se(values):
    """Standard error of the sample mean along the first axis."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 2:
        return math.inf
    return float(np.std(values, ddof=1, axis=0).max() / math.sqrt(values.shape[0]))


def max_and_p99(values):
    """(max, 99th percentile) of a sample, as plain floats."""
    values = np.asarray(values, dtype=float)
    return float(values.max()), float(np.percentile(values, 99.0))


def path_p99(values, axis=0):
    """99th percentile across paths, the sup-norm companion statistic.

    Regression-fitted surfaces are extrapolation-dominated at the sample
    extremes, so their pathwise max does not estimate the essential supremum
    consistently; audits use this percentile proxy on the statistic side and
    keep realized maxima on the bound side.
    """
    return np.percentile(np.asarray(values, dtype=float), 99.0, axis=axis)


def bootstrap_key(seed, label):
    """128-bit Philox key derived from an ensemble seed and a text label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def bootstrap_se(values, seed_key, statistic=None, n_boot=200):
    """Path-resampling standard error of a statistic of per-path values.

    ``values`` is (P,) or (P, m); rows are resampled with replacement, the
    statistic (default: mean of everything) evaluated per resample, and the
    spread across resamples returned.  The draw is deterministic in
    ``seed_key`` (build one with ``bootstrap_key``).
    """
    values = np.asarray(values, dtype=float)
    P = values.shape[0]
    if P < 2:
        return math.inf
    stat = statistic if statistic is not None else (lambda v: float(np.mean(v)))
    rng = np.random.Generator(np.random.Philox(key=seed_key))
    out = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, P, size=P)
        out[b] = stat(values[idx])
    return float(np.std(out, ddof=1))
