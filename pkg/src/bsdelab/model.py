"""Domain types and shared numerics for backward equations.

Value processes are d-dimensional, the Brownian motion is n-dimensional, and
the martingale coefficient is a d x n matrix per path.  All evaluators are
vectorized over a leading path axis P:

* terminal map        xi(b)            : (P, n) -> (P, d)
* terminal gradient   grad(b)          : (P, n) -> (P, d, n)
* driver              f(t, y, z)       : scalar t, (P, d), (P, d, n) -> (P, d)
* driver y-gradient   grad_y(t, y, z)  : -> (P, d, d)    [i, i'] = df_i/dy_i'
* driver z-gradient   grad_z(t, y, z)  : -> (P, d, d, n) [i, i', j'] = df_i/dz_i'j'
* direct derivative   malliavin_df(j, theta, t, y, z) -> (P, d)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInputError

# quintic blend on [v, v+4] written in u = x - v; matches value/slope/curvature
# (v, 1, 0) at u=0 and (v+1, 0, 0) at u=4.  All coefficients are dyadic, so the
# plateau value v+1 is reached exactly in float arithmetic.
_BLEND_C3 = -7.0 / 32.0
_BLEND_C4 = 17.0 / 256.0
_BLEND_C5 = -3.0 / 512.0


@dataclass(frozen=True)
class Dimensions:
    """Problem dimensions: d value components, n Brownian components."""

    d: int
    n: int

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise InvalidInputError(f"dimensions must be >= 1, got d={self.d}, n={self.n}")


class RateFunction:
    """Nondecreasing nonnegative rate r -> kappa(r) used for z-increment bounds.

    Supported kinds: ``constant`` eta, ``affine`` g0 + g1*r, ``power``
    c*(1+r**alpha) with 0 <= alpha <= 1, and ``custom`` (opaque evaluator).
    """

    def __init__(self, kind, params=None, evaluator=None):
        self.kind = kind
        self.params = tuple(params) if params is not None else ()
        if kind == "constant":
            (eta,) = self.params
            if eta < 0:
                raise InvalidInputError("constant rate must be nonnegative")
            self._fn = lambda r: np.full_like(np.asarray(r, dtype=float), eta)
        elif kind == "affine":
            g0, g1 = self.params
            if g0 < 0 or g1 < 0:
                raise InvalidInputError("affine rate coefficients must be nonnegative")
            self._fn = lambda r: g0 + g1 * np.asarray(r, dtype=float)
        elif kind == "power":
            c, alpha = self.params
            if c < 0 or not 0.0 <= alpha <= 1.0:
                raise InvalidInputError("power rate needs c >= 0 and 0 <= alpha <= 1")
            self._fn = lambda r: c * (1.0 + np.asarray(r, dtype=float) ** alpha)
        elif kind == "custom":
            if evaluator is None:
                raise InvalidInputError("custom rate needs an evaluator")
            self._fn = evaluator
        else:
            raise InvalidInputError(f"unknown rate kind {kind!r}")

    @classmethod
    def constant(cls, eta):
        return cls("constant", (float(eta),))

    @classmethod
    def affine(cls, g0, g1):
        return cls("affine", (float(g0), float(g1)))

    @classmethod
    def power(cls, c, alpha):
        return cls("power", (float(c), float(alpha)))

    @classmethod
    def custom(cls, evaluator):
        return cls("custom", (), evaluator)

    def __call__(self, r):
        out = self._fn(r)
        if np.isscalar(r) or np.ndim(r) == 0:
            return float(out)
        return np.asarray(out, dtype=float)

    def uniform_bound(self):
        """sup_r kappa(r); finite only for the constant kind."""
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "affine" and self.params[1] == 0.0:
            return self.params[0]
        return math.inf

    def __repr__(self):
        return f"RateFunction({self.kind}, {self.params})"


@dataclass(frozen=True)
class DriverMeta:
    """Declared regularity bounds of a driver.

    ``growth`` is an optional (rho, alpha) pair for drivers bounded by
    rho*(1 + |y| + |z|**(1+alpha)); alpha must stay strictly below 1 when the
    sub-quadratic machinery consumes it.
    """

    lipschitz_y: float
    root_bound: float
    z_rate: RateFunction
    malliavin_lipschitz_y: float = 0.0
    malliavin_root_bound: float = 0.0
    malliavin_z_rate: RateFunction = field(default_factory=lambda: RateFunction.constant(0.0))
    growth: Optional[tuple] = None

    def __post_init__(self):
        for name in ("lipschitz_y", "root_bound", "malliavin_lipschitz_y", "malliavin_root_bound"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")
        if self.growth is not None:
            rho, alpha = self.growth
            if rho < 0 or not 0.0 <= alpha < 1.0:
                raise InvalidInputError("growth needs rho >= 0 and 0 <= alpha < 1")


@dataclass(frozen=True)
class Driver:
    """Driver f with optional gradient and direct-derivative evaluators."""

    dims: Dimensions
    f: Callable
    meta: DriverMeta
    grad_y: Optional[Callable] = None
    grad_z: Optional[Callable] = None
    malliavin_df: Optional[Callable] = None


@dataclass(frozen=True)
class TerminalCondition:
    """Markovian terminal data xi = Phi(B_T) with declared sup bounds.

    ``sup_bound`` bounds every component |xi_i|; ``malliavin_sup_bound`` bounds
    every entry |D_{j,theta} xi_i|.  Either may be ``inf`` for unbounded maps,
    in which case consumers fall back to sampled proxies.
    """

    xi: Callable
    sup_bound: float
    malliavin_sup_bound: float
    grad: Optional[Callable] = None

    def __post_init__(self):
        if self.sup_bound < 0 or self.malliavin_sup_bound < 0:
            raise InvalidInputError("terminal sup bounds must be nonnegative")


@dataclass(frozen=True)
class BSDEProblem:
    """Backward problem with parameters (T, terminal, driver)."""

    T: float
    terminal: TerminalCondition
    driver: Driver

    def __post_init__(self):
        if self.T <= 0:
            raise InvalidInputError("terminal time T must be positive")

    @property
    def dims(self):
        return self.driver.dims


@dataclass(frozen=True)
class AuditRow:
    """One verified inequality: pass iff slack >= -3*se.

    A relative float-dust guard keeps exact-equality rows (slack a few ulp
    below zero with a zero bootstrap SE) from reading as violations.
    """

    check_id: str
    lhs: float
    rhs: float
    se: float
    note: str = ""

    @property
    def slack(self):
        return self.rhs - self.lhs

    @property
    def passed(self):
        dust = 1e-12 * max(abs(self.lhs), abs(self.rhs), 1.0)
        return bool(self.slack >= -3.0 * self.se - dust)

    def as_dict(self):
        return {
            "check_id": self.check_id,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack": self.slack,
            "se": self.se,
            "passed": self.passed,
            "note": self.note,
        }


@dataclass
class AuditReport:
    """A list of audit rows with an aggregate verdict."""

    rows: list

    @property
    def passed(self):
        return all(row.passed for row in self.rows)

    def extend(self, other):
        self.rows.extend(other.rows)

    def as_dict(self):
        return {"passed": self.passed, "rows": [row.as_dict() for row in self.rows]}


def frobenius_norm(z):
    """Frobenius norm over the last two axes; leading axes are preserved.

    A plain (d, n) matrix gives a scalar, a (P, d, n) batch gives a (P,) array.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim < 2:
        raise InvalidInputError("frobenius_norm expects at least a 2-d array")
    if not np.isfinite(z).all():
        raise InvalidInputError("frobenius_norm: non-finite entry")
    out = np.sqrt(np.sum(z * z, axis=(-2, -1)))
    return float(out) if out.ndim == 0 else out


def stopping_function(v, x):
    """Smooth clamp r_v: identity on [-v, v], plateau +-(v+1) beyond |x| >= v+4.

    Odd, C2, 1-Lipschitz; inside [-v, v] the input is returned bit-exactly.
    """
    if v <= 0:
        raise InvalidInputError("stopping_function needs v > 0")
    x_arr = np.asarray(x, dtype=float)
    ax = np.abs(x_arr)
    u = np.clip(ax - v, 0.0, 4.0)
    blend = v + u * (1.0 + u * u * (_BLEND_C3 + u * (_BLEND_C4 + u * _BLEND_C5)))
    out = np.where(ax <= v, x_arr, np.sign(x_arr) * blend)
    return float(out) if out.ndim == 0 else out


def stopping_function_derivative(v, x):
    """Derivative of the smooth clamp; 1 inside, 0 on the plateau."""
    if v <= 0:
        raise InvalidInputError("stopping_function_derivative needs v > 0")
    x_arr = np.asarray(x, dtype=float)
    ax = np.abs(x_arr)
    u = np.clip(ax - v, 0.0, 4.0)
    # p'(u) = 1 - (21/32)u^2 + (17/64)u^3 - (15/512)u^4, even in x
    dp = 1.0 + u * u * (-21.0 / 32.0 + u * (17.0 / 64.0 + u * (-15.0 / 512.0)))
    out = np.where(ax <= v, 1.0, dp)
    return float(out) if out.ndim == 0 else out


def truncate_matrix(v, z):
    """Entrywise smooth clamp of a matrix (or batch of matrices)."""
    return stopping_function(v, z)


def truncated_driver(driver, N):
    """Compose a driver with the entrywise clamp r_N in its z argument.

    The returned driver is uniformly Lipschitz in z with index
    kappa(2*sqrt(d*n)*(N+1)) since every clamped entry is bounded near N+1;
    the direct-derivative and gradient evaluators are composed with the clamp
    (chain rule on the z gradient).
    """
    if N <= 0:
        raise InvalidInputError("truncation level must be positive")
    N = float(N)
    dims = driver.dims
    base_f, base_gy, base_gz, base_df = driver.f, driver.grad_y, driver.grad_z, driver.malliavin_df

    def f_bar(t, y, z):
        return base_f(t, y, truncate_matrix(N, z))

    grad_y_bar = None
    if base_gy is not None:
        def grad_y_bar(t, y, z):
            return base_gy(t, y, truncate_matrix(N, z))

    grad_z_bar = None
    if base_gz is not None:
        def grad_z_bar(t, y, z):
            zc = truncate_matrix(N, z)
            inner = base_gz(t, y, zc)
            chain = stopping_function_derivative(N, z)
            return inner * chain[:, None, :, :]

    df_bar = None
    if base_df is not None:
        def df_bar(j, theta, t, y, z):
            return base_df(j, theta, t, y, truncate_matrix(N, z))

    cap = 2.0 * math.sqrt(dims.d * dims.n) * (N + 1.0)
    meta = replace(
        driver.meta,
        z_rate=RateFunction.constant(driver.meta.z_rate(cap)),
        malliavin_z_rate=RateFunction.constant(driver.meta.malliavin_z_rate(cap)),
    )
    return Driver(dims=dims, f=f_bar, meta=meta, grad_y=grad_y_bar,
                  grad_z=grad_z_bar, malliavin_df=df_bar)


@dataclass(frozen=True)
class SampleSpec:
    """Sampling plan for metadata validation: counts and box bounds."""

    count: int = 256
    t_max: float = 1.0
    y_radius: float = 2.0
    z_radius: float = 2.0
    seed: int = 20260814

    def __post_init__(self):
        if self.count < 1:
            raise InvalidInputError("sample count must be >= 1")


@dataclass(frozen=True)
class MetaValidationReport:
    passed: bool
    worst_y_ratio: float
    declared_lipschitz_y: float
    worst_z_ratio: float
    worst_root: float
    declared_root_bound: float
    worst_grad_y_error: float
    worst_grad_z_error: float
    notes: str = ""


def validate_driver_meta(driver, sample_spec=None, tol=1e-6, grad_tol=1e-4):
    """Sampling check of declared Lipschitz/rate/root bounds and gradients.

    Failures never raise; the report carries the worst observed ratios so a
    caller can decide.  Gradients, when present, are compared against central
    finite differences.
    """
    spec = sample_spec or SampleSpec()
    d, n = driver.dims.d, driver.dims.n
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    P = spec.count
    ts = rng.uniform(0.0, spec.t_max, size=4)

    worst_y = 0.0
    worst_z = 0.0
    worst_root = 0.0
    worst_gy = 0.0
    worst_gz = 0.0
    kappa = driver.meta.z_rate
    for t in ts:
        y = rng.uniform(-spec.y_radius, spec.y_radius, size=(P, d))
        y2 = rng.uniform(-spec.y_radius, spec.y_radius, size=(P, d))
        z = rng.normal(0.0, spec.z_radius, size=(P, d, n))
        z2 = rng.normal(0.0, spec.z_radius, size=(P, d, n))

        base = driver.f(t, y, z)
        # per-component Lipschitz in y against the l1 distance of y
        dy = np.sum(np.abs(y2 - y), axis=1)
        df_y = np.max(np.abs(driver.f(t, y2, z) - base), axis=1)
        ok = dy > 1e-12
        if ok.any():
            worst_y = max(worst_y, float(np.max(df_y[ok] / dy[ok])))

        # z-increment against kappa(|z|+|z2|)*|z-z2|
        dz = np.sqrt(np.sum((z2 - z) ** 2, axis=(1, 2)))
        rad = np.sqrt(np.sum(z * z, axis=(1, 2))) + np.sqrt(np.sum(z2 * z2, axis=(1, 2)))
        denom = kappa(rad) * dz
        df_z = np.max(np.abs(driver.f(t, y, z2) - base), axis=1)
        ok = denom > 1e-12
        if ok.any():
            worst_z = max(worst_z, float(np.max(df_z[ok] / denom[ok])))

        root = driver.f(t, np.zeros((1, d)), np.zeros((1, d, n)))
        worst_root = max(worst_root, float(np.max(np.abs(root))))

        if driver.grad_y is not None:
            g = driver.grad_y(t, y, z)
            h = 1e-5
            for i2 in range(d):
                bump = np.zeros((P, d))
                bump[:, i2] = h
                fd = (driver.f(t, y + bump, z) - driver.f(t, y - bump, z)) / (2 * h)
                worst_gy = max(worst_gy, float(np.max(np.abs(fd - g[:, :, i2]))))
        if driver.grad_z is not None:
            g = driver.grad_z(t, y, z)
            h = 1e-5
            for i2 in range(d):
                for j2 in range(n):
                    bump = np.zeros((P, d, n))
                    bump[:, i2, j2] = h
                    fd = (driver.f(t, y, z + bump) - driver.f(t, y, z - bump)) / (2 * h)
                    worst_gz = max(worst_gz, float(np.max(np.abs(fd - g[:, :, i2, j2]))))

    beta = driver.meta.lipschitz_y
    upsilon = driver.meta.root_bound
    passed = (
        worst_y <= beta * (1.0 + tol) + 1e-12
        and worst_z <= 1.0 + tol
        and worst_root <= upsilon * (1.0 + tol) + 1e-12
        and worst_gy <= grad_tol
        and worst_gz <= grad_tol
    )
    return MetaValidationReport(
        passed=passed,
        worst_y_ratio=worst_y,
        declared_lipschitz_y=beta,
        worst_z_ratio=worst_z,
        worst_root=worst_root,
        declared_root_bound=upsilon,
        worst_grad_y_error=worst_gy,
        worst_grad_z_error=worst_gz,
    )


def gronwall_bound(c, u, h, t, T, step=None):
    """Evaluate exp(int_t^T h) * (c + int_t^T u) by composite trapezoid.

    ``u`` and ``h`` are scalar functions of time; default quadrature step is
    T/1024.
    """
    if t > T:
        raise InvalidInputError("gronwall_bound needs t <= T")
    if c < 0:
        raise InvalidInputError("gronwall_bound needs c >= 0")
    if t == T:
        return float(c)
    if step is None:
        step = T / 1024.0
    m = max(1, int(math.ceil((T - t) / step)))
    s = np.linspace(t, T, m + 1)
    hv = np.array([h(si) for si in s], dtype=float)
    uv = np.array([u(si) for si in s], dtype=float)
    H = np.trapezoid(hv, s)
    U = np.trapezoid(uv, s)
    return float(math.exp(H) * (c + U))
