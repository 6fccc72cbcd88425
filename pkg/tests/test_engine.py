import math

import numpy as np
import pytest

from bsdelab.engine import (
    RegressionOperator,
    TimeGrid,
    bootstrap_key,
    bootstrap_se,
    conditional_integral_tail,
    fit_conditional_expectation,
    generate_paths,
    martingale_representation,
    max_and_p99,
    mean_se,
)
from bsdelab.errors import CapacityError, InvalidInputError


@pytest.fixture(scope="module")
def ens():
    return generate_paths(1, TimeGrid(1.0, 64), 20000, 12345)


class TestTimeGrid:
    def test_basic(self):
        grid = TimeGrid(2.0, 8)
        assert grid.dt == 0.25
        assert grid.times[0] == 0.0 and grid.times[-1] == 2.0
        assert len(grid.times) == 9

    def test_index_of(self):
        grid = TimeGrid(1.0, 4)
        assert grid.index_of(0.5) == 2
        assert grid.index_of(1.0) == 4
        with pytest.raises(InvalidInputError):
            grid.index_of(0.3)
        with pytest.raises(InvalidInputError):
            grid.index_of(1.25)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            TimeGrid(0.0, 4)
        with pytest.raises(InvalidInputError):
            TimeGrid(1.0, 0)


class TestGeneratePaths:
    def test_deterministic(self):
        grid = TimeGrid(1.0, 16)
        a = generate_paths(2, grid, 500, 7)
        b = generate_paths(2, grid, 500, 7)
        assert np.array_equal(a.increments, b.increments)
        assert np.array_equal(a.values, b.values)

    def test_seeds_differ(self):
        grid = TimeGrid(1.0, 16)
        a = generate_paths(1, grid, 500, 7)
        b = generate_paths(1, grid, 500, 8)
        assert not np.array_equal(a.increments, b.increments)

    def test_cumsum_consistency(self, ens):
        k = 37
        recon = ens.increments[:, :k, :].sum(axis=1)
        assert np.allclose(recon, ens.state(k), atol=1e-12)
        assert np.all(ens.state(0) == 0.0)

    def test_moments(self, ens):
        dt = ens.grid.dt
        s = ens.increments.std()
        assert abs(s - math.sqrt(dt)) < 0.01 * math.sqrt(dt)
        assert abs(ens.increments.mean()) < 3 * math.sqrt(dt / ens.increments.size)

    def test_capacity_guard(self):
        with pytest.raises(CapacityError):
            generate_paths(1, TimeGrid(1.0, 256), 10**9, 1)

    def test_input_validation(self):
        with pytest.raises(InvalidInputError):
            generate_paths(0, TimeGrid(1.0, 4), 10, 1)
        with pytest.raises(InvalidInputError):
            generate_paths(1, TimeGrid(1.0, 4), 10, 2**130)


class TestRegression:
    def test_constant_reproduced(self, ens):
        target = np.full(ens.P, 2.5)
        for k in (0, 1, 32, 64):
            fitted = fit_conditional_expectation(ens, k, target, 3)
            assert np.max(np.abs(fitted - 2.5)) < 1e-10

    def test_mean_mode_at_zero(self, ens):
        target = ens.state(64)[:, 0] ** 2
        fitted = fit_conditional_expectation(ens, 0, target, 3)
        assert np.allclose(fitted, target.mean())

    def test_martingale_projection(self, ens):
        # E[B_T | B_t] = B_t
        k = 32
        target = ens.state(64)[:, 0]
        fitted = fit_conditional_expectation(ens, k, target, 3)
        rms = np.sqrt(np.mean((fitted - ens.state(k)[:, 0]) ** 2))
        assert rms < 0.05

    def test_square_projection(self, ens):
        # E[B_T^2 | B_t] = B_t^2 + (T - t)
        k = 32
        T, t = 1.0, ens.grid.times[k]
        b = ens.state(k)[:, 0]
        target = ens.state(64)[:, 0] ** 2
        fitted = fit_conditional_expectation(ens, k, target, 3)
        rms = np.sqrt(np.mean((fitted - (b * b + (T - t))) ** 2))
        assert rms < 0.1

    def test_matrix_targets(self, ens):
        targets = np.stack([np.full(ens.P, 1.0), ens.state(64)[:, 0]], axis=1)
        fitted = fit_conditional_expectation(ens, 16, targets, 3)
        assert fitted.shape == (ens.P, 2)
        assert np.max(np.abs(fitted[:, 0] - 1.0)) < 1e-10

    def test_ridge_fallback(self):
        # K = 4 basis functions but only 3 paths: singular Gram, ridge kicks in
        tiny = generate_paths(1, TimeGrid(1.0, 4), 3, 9)
        op = RegressionOperator(tiny, 2, 3)
        assert op.ridge_used
        big = generate_paths(1, TimeGrid(1.0, 4), 500, 9)
        assert not RegressionOperator(big, 2, 3).ridge_used

    def test_gram_cache_reused(self, ens):
        ens._gram_cache.clear()
        RegressionOperator(ens, 5, 3)
        assert (5, 3) in ens._gram_cache
        before = len(ens._gram_cache)
        RegressionOperator(ens, 5, 3)
        assert len(ens._gram_cache) == before

    def test_two_dim_state(self):
        ens2 = generate_paths(2, TimeGrid(1.0, 32), 20000, 3)
        # E[B1_T * B2_T | F_t] = B1_t * B2_t  (independent components)
        k = 16
        target = ens2.state(32)[:, 0] * ens2.state(32)[:, 1]
        fitted = fit_conditional_expectation(ens2, k, target, 3)
        truth = ens2.state(k)[:, 0] * ens2.state(k)[:, 1]
        rms = np.sqrt(np.mean((fitted - truth) ** 2))
        assert rms < 0.1


class TestIntegralTail:
    def test_deterministic_integrand(self, ens):
        ones = np.ones((ens.P, ens.grid.M))
        k = 16
        fitted = conditional_integral_tail(ens, ones, k, 3)
        expect = ens.grid.T - ens.grid.times[k]
        assert np.max(np.abs(fitted - expect)) < 1e-10
        assert np.all(conditional_integral_tail(ens, ones, ens.grid.M, 3) == 0.0)

    def test_squared_state_integrand(self, ens):
        grid = ens.grid
        integrand = ens.values[:, :-1, 0] ** 2
        k = 32
        fitted = conditional_integral_tail(ens, integrand, k, 3)
        b = ens.state(k)[:, 0]
        t_k = grid.times[k]
        # E[sum_{k'>=k} B_{k'}^2 dt | F_k] = sum (b^2 + (t_k' - t_k)) dt
        tail_times = grid.times[k:-1]
        truth = (b * b) * (grid.T - t_k) + np.sum(tail_times - t_k) * grid.dt
        rms = np.sqrt(np.mean((fitted - truth) ** 2))
        assert rms < 0.05

    def test_shape_guard(self, ens):
        with pytest.raises(InvalidInputError):
            conditional_integral_tail(ens, np.ones((ens.P, 3)), 0, 3)


class TestMartingaleRepresentation:
    def test_brownian_target(self, ens):
        # xi = B_T: M_k = B_k, mu = 1
        mart, mu = martingale_representation(ens, ens.state(64)[:, 0], 3)
        assert mart.shape == (ens.P, 65)
        assert mu.shape == (ens.P, 64, 1)
        k = 32
        assert np.sqrt(np.mean((mart[:, k] - ens.state(k)[:, 0]) ** 2)) < 0.05
        assert np.sqrt(np.mean((mu - 1.0) ** 2)) < 0.1

    def test_squared_target(self, ens):
        # xi = B_T^2: mu_t = 2 B_t.  The integrand picks up the derivative of
        # the stage-fit error, so the tolerance is looser than for the mean.
        b_T = ens.state(64)[:, 0]
        mart, mu = martingale_representation(ens, b_T ** 2, 3)
        k = 32
        truth = 2.0 * ens.state(k)[:, 0]
        assert np.sqrt(np.mean((mu[:, k, 0] - truth) ** 2)) < 0.35

    def test_terminal_exact(self, ens):
        target = np.sin(ens.state(64)[:, 0])
        mart, _ = martingale_representation(ens, target, 3)
        assert np.array_equal(mart[:, 64], target)

    def test_vector_targets(self, ens):
        targets = np.stack([ens.state(64)[:, 0], np.ones(ens.P)], axis=1)
        mart, mu = martingale_representation(ens, targets, 3)
        assert mart.shape == (ens.P, 65, 2)
        assert mu.shape == (ens.P, 64, 2, 1)
        # constant component: martingale 1, integrand 0
        assert np.max(np.abs(mart[:, 10, 1] - 1.0)) < 1e-10
        assert np.sqrt(np.mean(mu[:, :, 1, :] ** 2)) < 0.05


class TestStatistics:
    def test_mean_se(self):
        rng = np.random.Generator(np.random.Philox(key=5))
        x = rng.normal(0.0, 2.0, size=40000)
        se = mean_se(x)
        assert abs(se - 2.0 / 200.0) < 0.002

    def test_max_and_p99(self):
        x = np.arange(1000, dtype=float)
        hi, p99 = max_and_p99(x)
        assert hi == 999.0
        assert abs(p99 - 989.01) < 0.5

    def test_bootstrap_deterministic(self):
        rng = np.random.Generator(np.random.Philox(key=6))
        x = rng.normal(size=2000)
        key = bootstrap_key(7, "demo")
        a = bootstrap_se(x, key)
        b = bootstrap_se(x, key)
        assert a == b
        c = bootstrap_se(x, bootstrap_key(7, "other"))
        assert a != c

    def test_bootstrap_matches_formula(self):
        rng = np.random.Generator(np.random.Philox(key=8))
        x = rng.normal(0.0, 1.0, size=5000)
        se_boot = bootstrap_se(x, bootstrap_key(8, "mean"))
        se_formula = mean_se(x)
        assert 0.7 * se_formula < se_boot < 1.4 * se_formula

    def test_bootstrap_custom_statistic(self):
        x = np.linspace(0.0, 1.0, 1000)
        se = bootstrap_se(x, bootstrap_key(1, "max"), statistic=lambda v: float(v.max()))
        assert 0.0 <= se < 0.01
