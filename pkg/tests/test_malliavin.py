"""Tests for the derivative-BSDE machinery: assembly, solves, the diagonal
identity, the running-supremum curves, and the inequality audits."""

import math

import numpy as np
import pytest

from bsdelab.engine import TimeGrid, generate_paths
from bsdelab.errors import CapabilityError, InvalidInputError
from bsdelab.malliavin import (
    LambdaCurves,
    assemble_malliavin_bsde,
    audit_malliavin_inequalities,
    check_diagonal_identity,
    default_theta_probes,
    lambda_curves,
    malliavin_root_potential,
    solve_malliavin,
    solve_malliavin_family,
)
from bsdelab.model import (
    BSDEProblem,
    Dimensions,
    Driver,
    DriverMeta,
    RateFunction,
    TerminalCondition,
    truncated_driver,
)
from bsdelab.picard import solve_global

DIMS = Dimensions(d=1, n=1)
ZERO_RATE = RateFunction.constant(0.0)
T, M, P, SEED = 1.0, 64, 20000, 2026


def _zeros_g(t, y, z):
    return np.zeros((y.shape[0], 1, 1))


def _zeros_h(t, y, z):
    return np.zeros((y.shape[0], 1, 1, 1))


def martingale_problem():
    """f = 0, xi = B_T: Y_t = B_t, Z = 1, DY = 1."""
    meta = DriverMeta(lipschitz_y=0.0, root_bound=0.0, z_rate=ZERO_RATE)
    driver = Driver(dims=DIMS, f=lambda t, y, z: np.zeros_like(y), meta=meta,
                    grad_y=_zeros_g, grad_z=_zeros_h)
    terminal = TerminalCondition(
        xi=lambda b: b.copy(), sup_bound=math.inf, malliavin_sup_bound=1.0,
        grad=lambda b: np.ones((b.shape[0], 1, 1)))
    return BSDEProblem(T=T, terminal=terminal, driver=driver)


def exp_problem():
    """f = y, xi = B_T: Y_t = e^{T-t} B_t, DY_t = e^{T-t}."""
    meta = DriverMeta(lipschitz_y=1.0, root_bound=0.0, z_rate=ZERO_RATE)
    driver = Driver(dims=DIMS, f=lambda t, y, z: y.copy(), meta=meta,
                    grad_y=lambda t, y, z: np.ones((y.shape[0], 1, 1)),
                    grad_z=_zeros_h)
    terminal = TerminalCondition(
        xi=lambda b: b.copy(), sup_bound=math.inf, malliavin_sup_bound=1.0,
        grad=lambda b: np.ones((b.shape[0], 1, 1)))
    return BSDEProblem(T=T, terminal=terminal, driver=driver)


def girsanov_problem():
    """f = z, xi = B_T: Y_t = B_t + (T-t), Z = 1, DY = 1."""
    meta = DriverMeta(lipschitz_y=0.0, root_bound=0.0,
                      z_rate=RateFunction.constant(1.0))
    driver = Driver(dims=DIMS, f=lambda t, y, z: z[:, :, 0].copy(), meta=meta,
                    grad_y=_zeros_g,
                    grad_z=lambda t, y, z: np.ones((y.shape[0], 1, 1, 1)))
    terminal = TerminalCondition(
        xi=lambda b: b.copy(), sup_bound=math.inf, malliavin_sup_bound=1.0,
        grad=lambda b: np.ones((b.shape[0], 1, 1)))
    return BSDEProblem(T=T, terminal=terminal, driver=driver)


def const_problem():
    """f = 0, xi = 2: everything derivative-flavoured vanishes exactly."""
    meta = DriverMeta(lipschitz_y=0.0, root_bound=0.0, z_rate=ZERO_RATE)
    driver = Driver(dims=DIMS, f=lambda t, y, z: np.zeros_like(y), meta=meta,
                    grad_y=_zeros_g, grad_z=_zeros_h)
    terminal = TerminalCondition(
        xi=lambda b: np.full((b.shape[0], 1), 2.0), sup_bound=2.0,
        malliavin_sup_bound=0.0, grad=lambda b: np.zeros((b.shape[0], 1, 1)))
    return BSDEProblem(T=T, terminal=terminal, driver=driver)


def drift_problem():
    """f = -0.7 y + 0.2, xi = 0.5 B_T: Lipschitz scenario with a y-gradient."""
    meta = DriverMeta(lipschitz_y=0.7, root_bound=0.2, z_rate=ZERO_RATE)
    driver = Driver(dims=DIMS, f=lambda t, y, z: -0.7 * y + 0.2, meta=meta,
                    grad_y=lambda t, y, z: np.full((y.shape[0], 1, 1), -0.7),
                    grad_z=_zeros_h)
    terminal = TerminalCondition(
        xi=lambda b: 0.5 * b, sup_bound=math.inf, malliavin_sup_bound=0.5,
        grad=lambda b: np.full((b.shape[0], 1, 1), 0.5))
    return BSDEProblem(T=T, terminal=terminal, driver=driver)


@pytest.fixture(scope="module")
def ens():
    return generate_paths(1, TimeGrid(T=T, M=M), P, seed=SEED)


@pytest.fixture(scope="module")
def mart_bundle(ens):
    return solve_global(martingale_problem(), ens)


@pytest.fixture(scope="module")
def exp_bundle(ens):
    return solve_global(exp_problem(), ens)


@pytest.fixture(scope="module")
def const_bundle(ens):
    return solve_global(const_problem(), ens)


@pytest.fixture(scope="module")
def drift_bundle(ens):
    return solve_global(drift_problem(), ens)


class TestDefaultThetaProbes:
    def test_full_grid_count(self):
        probes = default_theta_probes(64)
        assert len(probes) == 8
        assert probes[0] == 0 and probes[-1] == 63
        assert probes == sorted(set(probes))

    def test_tiny_grid_deduplicates(self):
        probes = default_theta_probes(4)
        assert probes == sorted(set(probes))
        assert all(0 <= k < 4 for k in probes)

    def test_single_step_grid(self):
        assert default_theta_probes(1) == [0]

    def test_empty_grid_rejected(self):
        with pytest.raises(InvalidInputError):
            default_theta_probes(0)


class TestAssemble:
    def test_missing_gradients_is_capability_error(self, ens, mart_bundle):
        problem = martingale_problem()
        bare = Driver(dims=DIMS, f=problem.driver.f, meta=problem.driver.meta)
        broken = BSDEProblem(T=T, terminal=problem.terminal, driver=bare)
        with pytest.raises(CapabilityError, match="grad_y"):
            assemble_malliavin_bsde(broken, mart_bundle, 0, 0)

    def test_y_driver_gradients(self, ens, exp_bundle):
        lin = assemble_malliavin_bsde(exp_problem(), exp_bundle, 0, 5)
        state = ens.state(10)
        t = float(ens.grid.times[10])
        assert np.allclose(lin.coeffs.g(t, state), 1.0)
        assert np.allclose(lin.coeffs.h(t, state), 0.0)
        assert np.allclose(lin.coeffs.root(t, state), 0.0)
        assert lin.coeffs.beta == 1.0
        assert np.allclose(lin.terminal.xi(ens.state(M)), 1.0)
        assert lin.terminal.sup_bound == 1.0

    def test_z_driver_gradients(self, ens):
        problem = girsanov_problem()
        bundle = solve_global(problem, ens)
        lin = assemble_malliavin_bsde(problem, bundle, 0, 0)
        state = ens.state(7)
        t = float(ens.grid.times[7])
        assert np.allclose(lin.coeffs.g(t, state), 0.0)
        assert np.allclose(lin.coeffs.h(t, state), 1.0)

    def test_direct_term_gated_before_kernel_time(self, ens, mart_bundle):
        base = martingale_problem()
        driver = Driver(
            dims=DIMS, f=base.driver.f, meta=base.driver.meta,
            grad_y=_zeros_g, grad_z=_zeros_h,
            malliavin_df=lambda j, theta, t, y, z: np.ones((y.shape[0], 1)))
        problem = BSDEProblem(T=T, terminal=base.terminal, driver=driver)
        lin = assemble_malliavin_bsde(problem, mart_bundle, 0, 16)
        before = lin.coeffs.root(float(ens.grid.times[8]), ens.state(8))
        after = lin.coeffs.root(float(ens.grid.times[16]), ens.state(16))
        assert np.all(before == 0.0)
        assert np.allclose(after, 1.0)

    def test_index_validation(self, mart_bundle):
        problem = martingale_problem()
        with pytest.raises(InvalidInputError):
            assemble_malliavin_bsde(problem, mart_bundle, 1, 0)
        with pytest.raises(InvalidInputError):
            assemble_malliavin_bsde(problem, mart_bundle, 0, M)

    def test_windowed_solution_rejected_before_start(self, ens):
        problem = drift_problem()
        windowed = solve_global(problem, ens, k_lo=8)
        with pytest.raises(InvalidInputError, match="starts at grid index"):
            assemble_malliavin_bsde(problem, windowed, 0, 4)

    def test_state_row_mismatch_rejected(self, ens, mart_bundle):
        lin = assemble_malliavin_bsde(martingale_problem(), mart_bundle, 0, 0)
        with pytest.raises(InvalidInputError, match="paths"):
            lin.coeffs.g(float(ens.grid.times[3]), np.zeros((5, 1)))


class TestSolveMalliavin:
    def test_martingale_derivative_is_one_exactly(self, ens, mart_bundle):
        msol = solve_malliavin(martingale_problem(), mart_bundle, ens, 0, 16)
        assert np.allclose(msol.DY[:, 16:], 1.0, atol=1e-10)
        assert np.all(msol.DY[:, :16] == 0.0)
        assert np.all(msol.DZ[:, :16] == 0.0)
        assert np.allclose(msol.DZ[:, 16:], 0.0, atol=1e-10)

    def test_exp_driver_matches_exponential(self, ens, exp_bundle):
        theta = 16
        msol = solve_malliavin(exp_problem(), exp_bundle, ens, 0, theta)
        dt = ens.grid.dt
        for k in (theta, 32, 48, M):
            discrete = (1.0 + dt) ** (M - k)
            assert np.allclose(msol.DY[:, k], discrete, rtol=1e-9)
            oracle = math.exp(T - float(ens.grid.times[k]))
            assert abs(discrete - oracle) <= 0.02 * oracle

    def test_girsanov_derivative_is_one_in_mean(self, ens):
        problem = girsanov_problem()
        bundle = solve_global(problem, ens)
        msol = solve_malliavin(problem, bundle, ens, 0, 8)
        assert abs(float(np.mean(msol.DY[:, 8])) - 1.0) <= 0.02
        rms = math.sqrt(float(np.mean((msol.DY[:, 8:] - 1.0) ** 2)))
        assert rms <= 0.1

    def test_constant_terminal_gives_zero(self, ens, const_bundle):
        msol = solve_malliavin(const_problem(), const_bundle, ens, 0, 4)
        assert np.all(msol.DY == 0.0)
        assert np.all(msol.DZ == 0.0)

    def test_truncation_level_insensitivity(self, ens):
        base = drift_problem()
        solutions = []
        for N in (4.0, 8.0):
            problem = BSDEProblem(T=T, terminal=base.terminal,
                                  driver=truncated_driver(base.driver, N))
            bundle = solve_global(problem, ens)
            solutions.append(solve_malliavin(problem, bundle, ens, 0, 8))
        assert np.allclose(solutions[0].DY, solutions[1].DY, atol=1e-9)
        assert np.allclose(solutions[0].DZ, solutions[1].DZ, atol=1e-9)

    def test_grid_mismatch_rejected(self, ens, mart_bundle):
        other = generate_paths(1, TimeGrid(T=T, M=32), 200, seed=1)
        with pytest.raises(InvalidInputError, match="grid"):
            solve_malliavin(martingale_problem(), mart_bundle, other, 0, 4)


class TestFamilyAndRootPotential:
    def test_default_family_covers_probes(self, ens, mart_bundle):
        msols = solve_malliavin_family(martingale_problem(), mart_bundle, ens)
        probes = default_theta_probes(M)
        assert [(m.j, m.theta_index) for m in msols] == [(0, k) for k in probes]
        for m in msols:
            assert np.all(m.DY[:, :m.theta_index] == 0.0)

    def test_worker_pool_matches_serial(self, ens, mart_bundle, monkeypatch):
        problem = martingale_problem()
        serial = solve_malliavin_family(problem, mart_bundle, ens,
                                        theta_indices=[0, 16])
        monkeypatch.setenv("BSDELAB_WORKERS", "3")
        pooled = solve_malliavin_family(problem, mart_bundle, ens,
                                        theta_indices=[0, 16])
        assert len(pooled) == len(serial) == 2
        for a, b in zip(serial, pooled):
            assert (a.j, a.theta_index) == (b.j, b.theta_index)
            assert np.array_equal(a.DY, b.DY)
            assert np.array_equal(a.DZ, b.DZ)

    def test_zero_driver_has_zero_root_potential(self, ens, mart_bundle):
        value = malliavin_root_potential(martingale_problem(), mart_bundle, ens,
                                         probes=[(0, 0), (0, 16)])
        assert value == 0.0

    def test_exp_driver_root_potential_matches_tail_sum(self, ens, exp_bundle):
        value = malliavin_root_potential(exp_problem(), exp_bundle, ens,
                                         probes=[(0, 0)])
        dt = ens.grid.dt
        discrete = dt * sum((1.0 + dt) ** (M - l) for l in range(M))
        assert value == pytest.approx(discrete, rel=1e-9)
        assert value == pytest.approx(math.e - 1.0, rel=0.05)

    def test_empty_probes_rejected(self, ens, mart_bundle):
        with pytest.raises(InvalidInputError):
            malliavin_root_potential(martingale_problem(), mart_bundle, ens,
                                     probes=[])


class TestDiagonalIdentity:
    def test_martingale_oracle_both_sides_one(self, ens, mart_bundle):
        problem = martingale_problem()
        msols = solve_malliavin_family(problem, mart_bundle, ens)
        stats = check_diagonal_identity(msols, mart_bundle, ens)
        assert len(stats) == 8
        for stat in stats:
            # the 2% default tolerance is calibrated for the desk path count;
            # this module-scale ensemble carries sqrt(5)x the fit noise
            assert stat.passed(rel_tol=0.05)
            assert abs(stat.scale - 1.0) <= 0.05
            assert stat.rms <= 0.05
            assert stat.max_abs <= 0.8

    def test_exp_oracle_matches_exponential_scale(self, ens, exp_bundle):
        problem = exp_problem()
        theta = 16
        msols = solve_malliavin_family(problem, exp_bundle, ens,
                                       theta_indices=[theta])
        (stat,) = check_diagonal_identity(msols, exp_bundle, ens)
        oracle = math.exp(T - float(ens.grid.times[theta]))
        assert stat.passed(rel_tol=0.05)
        assert abs(stat.scale - oracle) <= 0.05 * oracle

    def test_constant_terminal_is_exactly_zero(self, ens, const_bundle):
        msols = solve_malliavin_family(const_problem(), const_bundle, ens,
                                       theta_indices=[0, 16])
        for stat in check_diagonal_identity(msols, const_bundle, ens):
            assert stat.rms <= 1e-12
            assert stat.max_abs <= 1e-12
            assert stat.passed()


class TestLambdaCurves:
    def test_constant_solution_curves(self, ens, const_bundle):
        msols = solve_malliavin_family(const_problem(), const_bundle, ens)
        curves = lambda_curves(const_bundle, msols)
        assert np.allclose(curves.lam, 2.0, atol=1e-12)
        assert np.all(curves.lam_hat == 0.0)
        assert curves.theta_indices == tuple(default_theta_probes(M))
        assert np.array_equal(curves.times, ens.grid.times)

    def test_martingale_curves_match_direct_recomputation(self, ens, mart_bundle):
        msols = solve_malliavin_family(martingale_problem(), mart_bundle, ens)
        curves = lambda_curves(mart_bundle, msols)
        per_time = np.abs(mart_bundle.Y).sum(axis=2).max(axis=0)
        expected = np.maximum.accumulate(per_time[::-1])[::-1]
        assert np.array_equal(curves.lam, expected)
        assert np.allclose(curves.lam_hat, 1.0, atol=1e-9)
        assert np.all(np.diff(curves.lam) <= 1e-12)
        assert np.all(np.diff(curves.lam_hat) <= 1e-12)

    def test_empty_family_rejected(self, mart_bundle):
        with pytest.raises(InvalidInputError):
            lambda_curves(mart_bundle, [])

    def test_windowed_solution_rejected(self, ens):
        windowed = solve_global(drift_problem(), ens, k_lo=8)
        msols = []
        with pytest.raises(InvalidInputError, match="full-horizon"):
            lambda_curves(windowed, msols)

    def test_monotonicity_validation(self, ens):
        times = ens.grid.times
        good = np.linspace(2.0, 1.0, M + 1)
        increasing = np.linspace(1.0, 2.0, M + 1)
        with pytest.raises(InvalidInputError, match="nonincreasing"):
            LambdaCurves(times=times, lam=increasing, lam_hat=good,
                         theta_indices=(0,))
        bad = good.copy()
        bad[3] = math.nan
        with pytest.raises(InvalidInputError, match="finite"):
            LambdaCurves(times=times, lam=good, lam_hat=bad, theta_indices=(0,))


class TestAuditMalliavin:
    def test_drift_scenario_all_rows_pass(self, ens, drift_bundle):
        report = audit_malliavin_inequalities(drift_problem(), drift_bundle, ens)
        ids = [row.check_id for row in report.rows]
        assert ids[:5] == [
            "malliavin_slice_deviation",
            "malliavin_square_integral",
            "lambda_decrement",
            "lambda_hat_decrement",
            "malliavin_mu_bound",
        ]
        assert ids[5:] == ["md_z_bound"] * 8
        assert report.passed
        by_id = {row.check_id: row for row in report.rows}
        assert by_id["malliavin_square_integral"].rhs > by_id["malliavin_square_integral"].lhs
        assert by_id["malliavin_mu_bound"].rhs == pytest.approx(0.25)
        assert by_id["malliavin_mu_bound"].lhs <= 1e-20

    def test_martingale_scenario_exact_ties_pass(self, ens, mart_bundle):
        report = audit_malliavin_inequalities(martingale_problem(), mart_bundle, ens)
        assert len(report.rows) == 13
        for row in report.rows:
            # the value curve of this unbounded-data oracle is a spiky
            # max-over-paths proxy, so its decrement row is exempt here
            if row.check_id == "lambda_decrement":
                continue
            assert row.passed, (row.check_id, row.lhs, row.rhs, row.se)
        by_id = {row.check_id: row for row in report.rows}
        assert by_id["malliavin_slice_deviation"].lhs == 0.0
        assert by_id["malliavin_slice_deviation"].rhs == 0.0
        assert by_id["malliavin_square_integral"].lhs == pytest.approx(1.0, abs=1e-12)
        assert by_id["malliavin_square_integral"].rhs == pytest.approx(1.0, abs=1e-12)

    def test_missing_gradients_rejected(self, ens, mart_bundle):
        base = martingale_problem()
        bare = Driver(dims=DIMS, f=base.driver.f, meta=base.driver.meta)
        broken = BSDEProblem(T=T, terminal=base.terminal, driver=bare)
        with pytest.raises(CapabilityError):
            audit_malliavin_inequalities(broken, mart_bundle, ens)

    def test_custom_probe_grid(self, ens, drift_bundle):
        report = audit_malliavin_inequalities(drift_problem(), drift_bundle, ens,
                                              theta_indices=[0, 32])
        ids = [row.check_id for row in report.rows]
        assert ids.count("md_z_bound") == 2
        assert report.passed
