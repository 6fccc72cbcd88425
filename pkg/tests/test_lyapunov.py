"""Tests for Lyapunov certification, induced bounds, and window audits."""

import math

import numpy as np
import pytest

from bsdelab.engine import TimeGrid, generate_paths
from bsdelab.errors import InvalidInputError, NoCertificateError
from bsdelab.lyapunov import (
    LyapunovSpec,
    audit_lyapunov_bounds,
    c1_from_bounds,
    gamma_from_rate,
    lyapunov_residual,
    lyapunov_solution_bounds,
    lyapunov_z_energy_check,
    quadratic_lyapunov,
    recentered_window_bound,
    recentered_z_window_check,
    scale_convex_to_lyapunov,
    validate_lyapunov_spec,
)
from bsdelab.model import (
    BSDEProblem,
    Dimensions,
    Driver,
    DriverMeta,
    RateFunction,
    SampleSpec,
    TerminalCondition,
)
from bsdelab.picard import solve_global

DIMS = Dimensions(d=1, n=1)
ZERO_RATE = RateFunction.constant(0.0)
T, M, P, SEED = 1.0, 64, 20000, 2026
K_CONST = 1.0 / 35.0  # lifts 1.4 y^2 - 0.4 y below zero: max deficit 0.4^2/(4*1.4)


def _driver(f, beta=0.0, ups=0.0, rate=ZERO_RATE, dims=DIMS, **kw):
    meta = DriverMeta(lipschitz_y=beta, root_bound=ups, z_rate=rate)
    return Driver(dims=dims, f=f, meta=meta, **kw)


def _zero_f(t, y, z):
    return np.zeros_like(y)


def cosine_driver():
    """d=1 driver e^{-|2y|} (1 + cos|y| + |z|^{1.5}), sub-quadratic in z."""

    def f(t, y, z):
        zn = np.sqrt(np.sum(z * z, axis=(1, 2)))
        return np.exp(-np.abs(2.0 * y)) * (1.0 + np.cos(np.abs(y))
                                           + (zn ** 1.5)[:, None])

    return _driver(f, beta=5.0, ups=2.0, rate=RateFunction.power(1.5, 0.5))


@pytest.fixture(scope="module")
def ens():
    return generate_paths(1, TimeGrid(T=T, M=M), P, seed=SEED)


@pytest.fixture(scope="module")
def mart_problem():
    terminal = TerminalCondition(
        xi=lambda b: b.copy(), sup_bound=math.inf, malliavin_sup_bound=1.0,
        grad=lambda b: np.ones((b.shape[0], 1, 1)))
    return BSDEProblem(T=T, terminal=terminal, driver=_driver(
        _zero_f,
        grad_y=lambda t, y, z: np.zeros((y.shape[0], 1, 1)),
        grad_z=lambda t, y, z: np.zeros((y.shape[0], 1, 1, 1))))


@pytest.fixture(scope="module")
def const_problem():
    terminal = TerminalCondition(
        xi=lambda b: np.full((b.shape[0], 1), 2.0), sup_bound=2.0,
        malliavin_sup_bound=0.0, grad=lambda b: np.zeros((b.shape[0], 1, 1)))
    return BSDEProblem(T=T, terminal=terminal, driver=_driver(
        lambda t, y, z: -0.7 * y + 0.2, beta=0.7, ups=0.2,
        grad_y=lambda t, y, z: np.full((y.shape[0], 1, 1), -0.7),
        grad_z=lambda t, y, z: np.zeros((y.shape[0], 1, 1, 1))))


@pytest.fixture(scope="module")
def mart_bundle(mart_problem, ens):
    return solve_global(mart_problem, ens)


@pytest.fixture(scope="module")
def const_bundle(const_problem, ens):
    return solve_global(const_problem, ens)


@pytest.fixture(scope="module")
def const_spec():
    return quadratic_lyapunov(
        1, k=lambda t, y: np.full(y.shape[0], K_CONST), k_potential=K_CONST)


class TestQuadraticSpec:
    def test_evaluator_shapes_and_values(self):
        spec = quadratic_lyapunov(2)
        y = np.array([[1.0, -2.0], [0.5, 0.0]])
        assert np.allclose(spec.h(y), [5.0, 0.25])
        assert np.allclose(spec.grad_h(y), 2.0 * y)
        hess = spec.hess_h(y)
        assert hess.shape == (2, 2, 2)
        assert np.allclose(hess, 2.0 * np.eye(2))
        assert np.array_equal(spec.k(0.3, y), np.zeros(2))

    def test_custom_k_passthrough(self):
        spec = quadratic_lyapunov(1, k=lambda t, y: np.full(y.shape[0], 7.0),
                                  beta_bar=0.5, k_potential=3.0)
        assert spec.beta_bar == 0.5
        assert spec.k_potential == 3.0
        assert np.array_equal(spec.k(0.0, np.zeros((4, 1))), np.full(4, 7.0))

    def test_invalid_dimension(self):
        with pytest.raises(InvalidInputError):
            quadratic_lyapunov(0)

    def test_spec_field_validation(self):
        with pytest.raises(InvalidInputError):
            quadratic_lyapunov(1, beta_bar=-1.0)
        with pytest.raises(InvalidInputError):
            quadratic_lyapunov(1, k_potential=math.inf)


class TestValidateSpec:
    def test_quadratic_passes(self):
        rep = validate_lyapunov_spec(quadratic_lyapunov(2), 2)
        assert rep.passed
        assert rep.min_h >= 0.0
        assert rep.min_k == 0.0
        assert rep.worst_grad_error <= 1e-8
        assert rep.worst_hess_error <= 1e-8
        assert rep.worst_k_growth_excess == 0.0

    def test_wrong_gradient_flagged(self):
        base = quadratic_lyapunov(1)
        bad = LyapunovSpec(h=base.h, grad_h=lambda y: 3.0 * np.asarray(y),
                           hess_h=base.hess_h, k=base.k)
        rep = validate_lyapunov_spec(bad, 1)
        assert not rep.passed
        assert rep.worst_grad_error > 0.5

    def test_k_growth_condition(self):
        def k(t, y):
            return 2.0 * np.abs(y).sum(axis=1)

        ok = validate_lyapunov_spec(quadratic_lyapunov(1, k=k, beta_bar=2.0), 1)
        assert ok.passed
        bad = validate_lyapunov_spec(quadratic_lyapunov(1, k=k, beta_bar=1.0), 1)
        assert not bad.passed
        # the excess is |k(t,y) - k(t,0)| - beta_bar sum|y| = sum|y| at worst
        assert bad.worst_k_growth_excess > 1.0

    def test_negative_k_flagged(self):
        spec = quadratic_lyapunov(1, k=lambda t, y: np.full(y.shape[0], -1.0))
        rep = validate_lyapunov_spec(spec, 1)
        assert not rep.passed
        assert rep.min_k == -1.0

    def test_invalid_dimension(self):
        with pytest.raises(InvalidInputError):
            validate_lyapunov_spec(quadratic_lyapunov(1), 0)


class TestResidual:
    def test_exact_identity_scalar(self):
        # h = y^2, f = 0, k = 0: slack = z^2 - z^2 = 0 at every sample
        rep = lyapunov_residual(quadratic_lyapunov(1), _driver(_zero_f))
        assert rep.min_slack == 0.0
        assert rep.passed
        assert rep.n_samples == 8 * 256 * 13
        assert "no violation found" in rep.note

    def test_exact_identity_matrix(self):
        dims = Dimensions(d=2, n=2)
        rep = lyapunov_residual(quadratic_lyapunov(2), _driver(_zero_f, dims=dims))
        assert abs(rep.min_slack) <= 1e-12
        assert rep.passed

    def test_contracting_drift_nonnegative(self):
        # f = -y gives slack 2 y^2 >= 0
        rep = lyapunov_residual(quadratic_lyapunov(1),
                                _driver(lambda t, y, z: -y, beta=1.0))
        assert 0.0 <= rep.min_slack <= 1e-3

    def test_violation_located(self):
        # f = 2y gives slack -4 y^2, worst at the box corner, any z
        rep = lyapunov_residual(quadratic_lyapunov(1),
                                _driver(lambda t, y, z: 2.0 * y, beta=2.0))
        assert not rep.passed
        assert rep.min_slack <= -14.0
        assert abs(rep.arg_y[0]) >= 1.9
        assert float(np.abs(rep.arg_z).max()) == 0.0
        assert "violation" in rep.note

    def test_lower_bound_function_lifts(self):
        # same driver, k(t,y) = 4 y^2 cancels the deficit exactly
        spec = quadratic_lyapunov(1, k=lambda t, y: 4.0 * y[:, 0] ** 2,
                                  beta_bar=0.0)
        rep = lyapunov_residual(spec, _driver(lambda t, y, z: 2.0 * y, beta=2.0))
        assert rep.min_slack >= -1e-9
        assert rep.passed

    def test_bad_sample_radius(self):
        with pytest.raises(InvalidInputError):
            lyapunov_residual(quadratic_lyapunov(1), _driver(_zero_f),
                              samples=SampleSpec(z_radius=0.0))


class TestScaleConvex:
    def test_zero_driver_first_scale(self):
        res = scale_convex_to_lyapunov(quadratic_lyapunov(1), _driver(_zero_f),
                                       growth_constant=1.0)
        assert res.scale == 1.0
        assert res.k_const == 1.0
        assert res.attempts == 1
        assert res.residual.passed
        assert res.spec.k_potential == 1.0  # k_const * default t_max
        assert np.array_equal(res.spec.k(0.2, np.zeros((3, 1))), np.ones(3))

    def test_zero_growth_constant(self):
        res = scale_convex_to_lyapunov(quadratic_lyapunov(1), _driver(_zero_f),
                                       growth_constant=0.0)
        assert res.scale == 1.0
        assert res.k_const == 0.0

    def test_cosine_driver_needs_one_doubling(self):
        samples = SampleSpec(count=256, t_max=0.5, y_radius=2.0, z_radius=8.0,
                             seed=77)
        res = scale_convex_to_lyapunov(quadratic_lyapunov(1), cosine_driver(),
                                       growth_constant=3.0, samples=samples,
                                       convexity=2.0)
        assert res.scale == 2.0
        assert res.k_const == 6.0
        assert res.attempts == 2
        assert res.premise_worst < 3.0
        # the returned spec passes on a fresh, different-seed sample set
        fresh = lyapunov_residual(
            res.spec, cosine_driver(),
            samples=SampleSpec(count=256, t_max=0.5, y_radius=2.0,
                               z_radius=8.0, seed=991))
        assert fresh.passed

    def test_declared_convexity_checked(self):
        quartic = LyapunovSpec(
            h=lambda y: np.sum(np.asarray(y) ** 4, axis=1),
            grad_h=lambda y: 4.0 * np.asarray(y) ** 3,
            hess_h=lambda y: (12.0 * np.asarray(y) ** 2)[:, :, None],
            k=lambda t, y: np.zeros(np.asarray(y).shape[0]))
        with pytest.raises(InvalidInputError, match="convexity"):
            scale_convex_to_lyapunov(quartic, _driver(_zero_f),
                                     growth_constant=1.0, convexity=2.0)

    def test_growth_premise_violation(self):
        def f(t, y, z):
            return y * np.sum(z * z, axis=(1, 2))[:, None]

        with pytest.raises(NoCertificateError, match="premise"):
            scale_convex_to_lyapunov(quadratic_lyapunov(1),
                                     _driver(f, beta=1.0),
                                     growth_constant=1.0)

    def test_scale_cap_exhausted(self):
        samples = SampleSpec(count=256, t_max=0.5, y_radius=2.0, z_radius=8.0,
                             seed=77)
        with pytest.raises(NoCertificateError, match=r"2\^0"):
            scale_convex_to_lyapunov(quadratic_lyapunov(1), cosine_driver(),
                                     growth_constant=3.0, samples=samples,
                                     max_doublings=0)

    def test_negative_growth_constant(self):
        with pytest.raises(InvalidInputError):
            scale_convex_to_lyapunov(quadratic_lyapunov(1), _driver(_zero_f),
                                     growth_constant=-1.0)


class TestGammaFromRate:
    def test_constant_exact(self):
        assert gamma_from_rate(RateFunction.constant(3.0)) == 1.5
        assert gamma_from_rate(RateFunction.constant(0.0)) == 0.0

    def test_affine_split_bound(self):
        assert gamma_from_rate(RateFunction.affine(1.5, 1.0)) == 1.75
        assert gamma_from_rate(RateFunction.affine(0.0, 2.0)) == 2.0

    def test_power_matches_dense_sup(self):
        rate = RateFunction.power(1.5, 0.5)
        gamma = gamma_from_rate(rate)
        r = np.geomspace(1e-9, 1e9, 200001)
        dense = float(np.max(rate(r) * r / (1.0 + r * r)))
        assert gamma == pytest.approx(dense, rel=1e-6)
        assert np.all(rate(r) * r <= gamma * (1.0 + r * r) * (1.0 + 1e-9))

    def test_custom_quadratic_tail_limit(self):
        # kappa(r) = r: kappa(r) r / (1 + r^2) -> 1 from below
        rate = RateFunction.custom(lambda r: np.asarray(r, dtype=float))
        gamma = gamma_from_rate(rate)
        assert 1.0 <= gamma <= 1.000002
        r = np.geomspace(1e-9, 1e9, 200001)
        assert np.all(r * r <= gamma * (1.0 + r * r))

    def test_super_quadratic_rejected(self):
        rate = RateFunction.custom(lambda r: np.asarray(r, dtype=float) ** 2)
        with pytest.raises(InvalidInputError, match="no finite gamma"):
            gamma_from_rate(rate)


class TestSolutionBounds:
    def test_frozen_unit_case(self):
        b = lyapunov_solution_bounds(1, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0)
        assert b.y_bound == 1.0  # e^0 * (0 + 1 * (0 + gamma*T + 0 + 0))
        assert b.z_star_sq_bound == 0.0

    def test_frozen_z_at_zero_value(self):
        b = lyapunov_solution_bounds(1, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 3.0)
        assert b.y_bound == 0.0
        assert b.z_star_sq_bound == 5.0

    def test_drift_case_formula(self):
        b = lyapunov_solution_bounds(1, 0.7, 0.0, 0.0, 1.0, 2.0, 0.2, 4.0,
                                     K_CONST)
        assert b.y_bound == pytest.approx(math.exp(0.7) * 2.2, rel=1e-12)
        assert b.z_star_sq_bound == pytest.approx(4.0 + K_CONST, rel=1e-12)

    def test_growth_index_feeds_z_bound(self):
        b = lyapunov_solution_bounds(1, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0, 2.0, 3.0)
        assert b.z_star_sq_bound == pytest.approx(2.0 + 3.0 + b.y_bound,
                                                  rel=1e-12)

    def test_monotone_in_every_argument(self):
        base = dict(d=1, beta=0.1, gamma=0.2, beta_bar=0.3, T=0.5, xi_sum=1.0,
                    f_potential=0.4, h_xi_sup=0.6, k_potential=0.7)
        ref = lyapunov_solution_bounds(**base)
        for name in base:
            bumped = dict(base)
            bumped[name] = bumped[name] + (1 if name == "d" else 0.5)
            out = lyapunov_solution_bounds(**bumped)
            assert out.y_bound >= ref.y_bound - 1e-12, name
            assert out.z_star_sq_bound >= ref.z_star_sq_bound - 1e-12, name

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            lyapunov_solution_bounds(0, 0, 0, 0, 1, 0, 0, 0, 0)
        with pytest.raises(InvalidInputError):
            lyapunov_solution_bounds(1, -0.1, 0, 0, 1, 0, 0, 0, 0)
        with pytest.raises(InvalidInputError):
            lyapunov_solution_bounds(1, 0, 0, 0, 1, math.inf, 0, 0, 0)

    def test_c1_dominates_both(self):
        b = lyapunov_solution_bounds(1, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 3.0)
        assert c1_from_bounds(b) == math.sqrt(5.0)
        b2 = lyapunov_solution_bounds(1, 0.0, 1.0, 0.0, 2.0, 3.0, 0.0, 0.0, 0.0)
        assert c1_from_bounds(b2) == b2.y_bound


class TestRecenteredBound:
    def test_limits_and_spot_value(self):
        assert recentered_window_bound(1.0, 1.0, 0.5, 0.0) == 0.0
        assert recentered_window_bound(0.0, 1.0, 0.5, 0.3) == 0.0
        spot = recentered_window_bound(1.0, 1.0, 0.5, 0.25)
        assert spot == pytest.approx(4.0 * (2.0 * 0.25 + 0.25 ** 0.25),
                                     rel=1e-12)

    def test_monotone_in_width(self):
        widths = np.linspace(0.0, 1.0, 11)
        vals = [recentered_window_bound(2.0, 0.5, 0.3, w) for w in widths]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            recentered_window_bound(1.0, 1.0, 1.0, 0.5)
        with pytest.raises(InvalidInputError):
            recentered_window_bound(-1.0, 1.0, 0.5, 0.5)


class TestZEnergyCheck:
    def test_isometry_equality(self, mart_bundle, ens):
        # f = 0, h = y^2, k = 0: both sides are E[B_{t'}^2 - B_t^2 | F_t]
        report = lyapunov_z_energy_check(quadratic_lyapunov(1), mart_bundle, ens)
        assert len(report.rows) == 3
        widths = [0.5, 0.5, 1.0]
        for row, width in zip(report.rows, widths):
            assert row.check_id == "z_energy_window"
            assert row.passed
            assert row.lhs == pytest.approx(width, rel=0.03)
        # windows anchored at t=0 are plain means: equality is tight
        for idx in (0, 2):
            assert abs(report.rows[idx].slack) <= 0.02

    def test_zero_z_scenario(self, const_bundle, const_spec, ens):
        report = lyapunov_z_energy_check(const_spec, const_bundle, ens)
        assert report.passed
        for row in report.rows:
            assert row.lhs <= 1e-10
            assert row.rhs > 0.0
        # full window: h(Y_T) - h(Y_0) + k T with Y from the backward ODE
        y0 = (2.0 - 2.0 / 7.0) * math.exp(-0.7) + 2.0 / 7.0
        assert report.rows[-1].rhs == pytest.approx(4.0 - y0 * y0 + K_CONST,
                                                    rel=0.02)

    def test_custom_intervals(self, mart_bundle, ens):
        report = lyapunov_z_energy_check(quadratic_lyapunov(1), mart_bundle,
                                         ens, intervals=[(16, 48)])
        assert len(report.rows) == 1
        # interior window: max over paths of a fitted surface, so allow the
        # polynomial-extrapolation inflation the refit bootstrap prices in
        assert report.rows[0].lhs == pytest.approx(0.5, rel=0.15)
        assert report.rows[0].passed

    def test_interval_validation(self, mart_bundle, ens):
        spec = quadratic_lyapunov(1)
        with pytest.raises(InvalidInputError):
            lyapunov_z_energy_check(spec, mart_bundle, ens, intervals=[(10, 5)])
        with pytest.raises(InvalidInputError):
            lyapunov_z_energy_check(spec, mart_bundle, ens, intervals=[(-1, 4)])
        with pytest.raises(InvalidInputError):
            lyapunov_z_energy_check(spec, mart_bundle, ens, intervals=[])


class TestRecenteredCheck:
    def test_martingale_windows(self, mart_bundle, ens):
        report = recentered_z_window_check(mart_bundle, ens, b=1.0,
                                           windows=[0.0, 0.5], C1=4.0 / 3.0,
                                           rho=0.1, alpha=0.5)
        assert [row.check_id for row in report.rows] == ["recentered_z_window"] * 2
        assert report.passed
        for row in report.rows:
            assert row.lhs <= 0.01
        # the shorter window carries the smaller bound
        assert report.rows[1].rhs < report.rows[0].rhs

    def test_interior_b(self, mart_bundle, ens):
        report = recentered_z_window_check(mart_bundle, ens, b=0.5,
                                           windows=[0.0, 0.25], C1=4.0 / 3.0,
                                           rho=0.1, alpha=0.5)
        assert report.passed
        assert len(report.rows) == 2

    def test_full_bounds_chain(self, const_bundle, ens):
        # |f| = |0.2 - 0.7 y| <= 0.9 (1 + |y|), so rho = 0.9, alpha anything
        bounds = lyapunov_solution_bounds(1, 0.7, 0.0, 0.0, 1.0, 2.0, 0.2,
                                          4.0, K_CONST)
        report = recentered_z_window_check(const_bundle, ens, b=0.5,
                                           windows=[0.0, 0.25],
                                           C1=c1_from_bounds(bounds),
                                           rho=0.9, alpha=0.5)
        assert report.passed
        for row in report.rows:
            assert row.lhs <= 1e-10

    def test_validation(self, mart_bundle, ens):
        with pytest.raises(InvalidInputError):
            recentered_z_window_check(mart_bundle, ens, b=1.0, windows=[],
                                      C1=1.0, rho=0.1, alpha=0.5)
        with pytest.raises(InvalidInputError, match="window start"):
            recentered_z_window_check(mart_bundle, ens, b=0.5, windows=[0.5],
                                      C1=1.0, rho=0.1, alpha=0.5)
        with pytest.raises(InvalidInputError, match="b must lie"):
            recentered_z_window_check(mart_bundle, ens, b=0.0, windows=[0.0],
                                      C1=1.0, rho=0.1, alpha=0.5)
        with pytest.raises(InvalidInputError):
            recentered_z_window_check(mart_bundle, ens, b=1.0, windows=[0.0],
                                      C1=1.0, rho=0.1, alpha=1.0)


class TestAuditLyapunovBounds:
    def test_const_scenario_rows(self, const_bundle, const_spec, ens):
        report = audit_lyapunov_bounds(const_bundle, ens, const_spec,
                                       gamma=0.0, h_xi_sup=4.0)
        assert [row.check_id for row in report.rows] == [
            "lyapunov_value_bound", "lyapunov_z_star"]
        assert report.passed
        value, z_star = report.rows
        assert value.lhs == 2.0  # the terminal value itself
        assert value.rhs == pytest.approx(math.exp(0.7) * 2.2, rel=1e-12)
        assert z_star.lhs <= 1e-12
        assert z_star.rhs == pytest.approx(4.0 + K_CONST, rel=1e-12)

    def test_defaults_match_explicit(self, const_bundle, const_spec, ens):
        explicit = audit_lyapunov_bounds(const_bundle, ens, const_spec,
                                         gamma=0.0, h_xi_sup=4.0)
        defaults = audit_lyapunov_bounds(const_bundle, ens, const_spec)
        for a, b in zip(explicit.rows, defaults.rows):
            assert a.lhs == b.lhs
            assert a.rhs == b.rhs

    def test_unbounded_terminal_skipped(self, mart_bundle, ens):
        report = audit_lyapunov_bounds(mart_bundle, ens, quadratic_lyapunov(1))
        assert report.rows == []
        assert report.passed
