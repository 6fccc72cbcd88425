import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsdelab import (
    AuditReport,
    AuditRow,
    BSDEProblem,
    Dimensions,
    Driver,
    DriverMeta,
    InvalidInputError,
    RateFunction,
    SampleSpec,
    TerminalCondition,
    frobenius_norm,
    gronwall_bound,
    stopping_function,
    stopping_function_derivative,
    truncate_matrix,
    truncated_driver,
    validate_driver_meta,
)


class TestStoppingFunction:
    def test_identity_region_bit_exact(self):
        x = np.array([-2.0, -1.999999, -0.3, 0.0, 0.7, 1.5, 2.0])
        out = stopping_function(2.0, x)
        assert np.array_equal(out, x)

    def test_plateau_values_exact(self):
        # beyond |x| >= v + 4 the clamp sits exactly at +-(v + 1)
        assert stopping_function(2.0, 10.0) == 3.0
        assert stopping_function(2.0, -10.0) == -3.0
        assert stopping_function(2.0, 6.0) == 3.0
        assert stopping_function(1.0, 5.0) == 2.0

    def test_scalar_midrange(self):
        # r_2(1.5) = 1.5 (inside), r_2(3) in (2, 3)
        assert stopping_function(2.0, 1.5) == 1.5
        mid = stopping_function(2.0, 3.0)
        assert 2.0 < mid < 3.0

    def test_derivative_endpoints(self):
        assert stopping_function_derivative(2.0, 1.0) == 1.0
        assert stopping_function_derivative(2.0, 2.0) == 1.0
        assert stopping_function_derivative(2.0, 6.0) == 0.0
        assert stopping_function_derivative(2.0, 60.0) == 0.0

    def test_derivative_matches_finite_difference(self):
        x = np.linspace(-8.0, 8.0, 4001)
        h = 1e-6
        fd = (stopping_function(2.0, x + h) - stopping_function(2.0, x - h)) / (2 * h)
        dp = stopping_function_derivative(2.0, x)
        assert np.max(np.abs(fd - dp)) < 1e-8

    def test_rejects_bad_v(self):
        with pytest.raises(InvalidInputError):
            stopping_function(0.0, 1.0)
        with pytest.raises(InvalidInputError):
            stopping_function_derivative(-1.0, 1.0)

    @given(st.floats(min_value=0.1, max_value=50.0),
           st.floats(min_value=-1e3, max_value=1e3, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_contraction_odd_bounded(self, v, x):
        rv = stopping_function(v, x)
        # odd, dominated by identity; the ramp overshoots the plateau v + 1
        # by at most 0.1264 before settling
        assert stopping_function(v, -x) == -rv
        assert abs(rv) <= abs(x) + 1e-12
        assert abs(rv) <= v + 1.1265

    @given(st.floats(min_value=0.1, max_value=50.0),
           st.floats(min_value=-100.0, max_value=100.0),
           st.floats(min_value=-100.0, max_value=100.0))
    @settings(max_examples=200, deadline=None)
    def test_one_lipschitz(self, v, a, b):
        fa = stopping_function(v, a)
        fb = stopping_function(v, b)
        assert abs(fa - fb) <= abs(a - b) * (1.0 + 1e-12) + 1e-12

    @given(st.floats(min_value=0.1, max_value=50.0),
           st.floats(min_value=-100.0, max_value=100.0))
    @settings(max_examples=200, deadline=None)
    def test_derivative_range(self, v, x):
        dp = stopping_function_derivative(v, x)
        assert -1.0 - 1e-9 <= dp <= 1.0 + 1e-9


class TestTruncateMatrix:
    def test_entrywise(self):
        z = np.array([[[10.0, 0.5], [-10.0, 1.0]]])
        out = truncate_matrix(1.0, z)
        assert out.shape == z.shape
        assert out[0, 0, 0] == 2.0
        assert out[0, 0, 1] == 0.5
        assert out[0, 1, 0] == -2.0
        assert out[0, 1, 1] == 1.0

    def test_identity_region_bit_exact(self):
        rng = np.random.Generator(np.random.Philox(key=1))
        z = rng.normal(0.0, 0.2, size=(50, 2, 3))
        assert np.array_equal(truncate_matrix(1.0, z), z)


def _linear_driver(c_y=0.5, c_z=0.25):
    dims = Dimensions(1, 1)

    def f(t, y, z):
        return -c_y * y + c_z * z[:, :, 0]

    def grad_y(t, y, z):
        return np.full((y.shape[0], 1, 1), -c_y)

    def grad_z(t, y, z):
        return np.full((y.shape[0], 1, 1, 1), c_z)

    meta = DriverMeta(lipschitz_y=c_y, root_bound=0.0, z_rate=RateFunction.constant(c_z))
    return Driver(dims=dims, f=f, meta=meta, grad_y=grad_y, grad_z=grad_z)


class TestTruncatedDriver:
    def test_values_composed(self):
        drv = _linear_driver(c_y=0.0, c_z=1.0)
        bar = truncated_driver(drv, 1.0)
        z = np.array([[[10.0]]])
        y = np.zeros((1, 1))
        # f(t, y, r_1(z)) = r_1(10) = 2
        assert bar.f(0.0, y, z)[0, 0] == 2.0
        # inside the identity region nothing changes
        z_small = np.array([[[0.5]]])
        assert bar.f(0.0, y, z_small)[0, 0] == 0.5

    def test_grad_z_chain_rule(self):
        drv = _linear_driver(c_y=0.0, c_z=1.0)
        bar = truncated_driver(drv, 1.0)
        y = np.zeros((1, 1))
        g_in = bar.grad_z(0.0, y, np.array([[[0.5]]]))
        g_out = bar.grad_z(0.0, y, np.array([[[99.0]]]))
        assert g_in[0, 0, 0, 0] == 1.0
        assert g_out[0, 0, 0, 0] == 0.0

    def test_meta_rate_capped(self):
        drv = Driver(
            dims=Dimensions(1, 1),
            f=lambda t, y, z: z[:, :, 0] ** 2,
            meta=DriverMeta(0.0, 0.0, RateFunction.affine(0.0, 1.0)),
        )
        bar = truncated_driver(drv, 4.0)
        # kappa_N = kappa(2*sqrt(d n)*(N+1)) = 2*(4+1) = 10
        assert bar.meta.z_rate.uniform_bound() == 10.0

    def test_rejects_bad_level(self):
        with pytest.raises(InvalidInputError):
            truncated_driver(_linear_driver(), 0.0)


class TestRateFunction:
    def test_kinds(self):
        assert RateFunction.constant(2.0)(137.0) == 2.0
        assert RateFunction.affine(1.5, 1.0)(2.0) == 3.5
        kp = RateFunction.power(1.0, 0.5)
        assert kp(4.0) == pytest.approx(3.0)
        kc = RateFunction.custom(lambda r: np.minimum(r, 5.0))
        assert kc(3.0) == 3.0 and kc(9.0) == 5.0

    def test_uniform_bound(self):
        assert RateFunction.constant(2.0).uniform_bound() == 2.0
        assert RateFunction.affine(2.0, 0.0).uniform_bound() == 2.0
        assert RateFunction.affine(0.0, 1.0).uniform_bound() == math.inf
        assert RateFunction.power(1.0, 0.5).uniform_bound() == math.inf

    def test_vectorized(self):
        r = np.array([0.0, 1.0, 2.0])
        out = RateFunction.affine(1.0, 2.0)(r)
        assert np.allclose(out, [1.0, 3.0, 5.0])

    def test_rejects_negative(self):
        with pytest.raises(InvalidInputError):
            RateFunction.constant(-1.0)
        with pytest.raises(InvalidInputError):
            RateFunction.power(1.0, 1.5)


class TestFrobenius:
    def test_values(self):
        assert frobenius_norm(np.array([[3.0, 4.0]])) == 5.0
        batch = np.array([[[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 0.0]]])
        out = frobenius_norm(batch)
        assert np.allclose(out, [math.sqrt(2.0), 2.0])

    def test_rejects_bad_input(self):
        with pytest.raises(InvalidInputError):
            frobenius_norm(np.array([1.0, 2.0]))
        with pytest.raises(InvalidInputError):
            frobenius_norm(np.array([[np.nan, 1.0]]))


class TestGronwall:
    def test_constant_coefficients(self):
        # c=1, u=0, h=1 on [0,1]: e^1
        val = gronwall_bound(1.0, lambda s: 0.0, lambda s: 1.0, 0.0, 1.0)
        assert val == pytest.approx(math.e, rel=1e-6)

    def test_zero_interval(self):
        assert gronwall_bound(3.0, lambda s: 1.0, lambda s: 1.0, 1.0, 1.0) == 3.0

    def test_linear_integrand(self):
        # c=0, u(s)=s, h=0 on [0,2]: integral = 2
        val = gronwall_bound(0.0, lambda s: s, lambda s: 0.0, 0.0, 2.0)
        assert val == pytest.approx(2.0, rel=1e-9)

    def test_rejects_reversed_interval(self):
        with pytest.raises(InvalidInputError):
            gronwall_bound(1.0, lambda s: 0.0, lambda s: 0.0, 2.0, 1.0)


class TestValidateDriverMeta:
    def test_honest_meta_passes(self):
        report = validate_driver_meta(_linear_driver(), SampleSpec(count=64))
        assert report.passed
        assert report.worst_y_ratio <= 0.5 + 1e-9
        assert report.worst_z_ratio <= 1.0 + 1e-9

    def test_understated_lipschitz_fails(self):
        drv = _linear_driver(c_y=0.5)
        bad_meta = DriverMeta(lipschitz_y=0.1, root_bound=0.0,
                              z_rate=RateFunction.constant(0.25))
        bad = Driver(dims=drv.dims, f=drv.f, meta=bad_meta,
                     grad_y=drv.grad_y, grad_z=drv.grad_z)
        report = validate_driver_meta(bad, SampleSpec(count=64))
        assert not report.passed
        assert report.worst_y_ratio > 0.1

    def test_wrong_gradient_flagged(self):
        drv = _linear_driver()
        lying = Driver(
            dims=drv.dims, f=drv.f, meta=drv.meta,
            grad_y=lambda t, y, z: np.full((y.shape[0], 1, 1), 7.0),
            grad_z=drv.grad_z,
        )
        report = validate_driver_meta(lying, SampleSpec(count=32))
        assert not report.passed
        assert report.worst_grad_y_error > 1.0


class TestDomainTypes:
    def test_dimensions_validation(self):
        with pytest.raises(InvalidInputError):
            Dimensions(0, 1)

    def test_problem_validation(self):
        term = TerminalCondition(xi=lambda b: b.copy(), sup_bound=math.inf,
                                 malliavin_sup_bound=1.0, grad=None)
        with pytest.raises(InvalidInputError):
            BSDEProblem(T=0.0, terminal=term, driver=_linear_driver())

    def test_audit_row_slack(self):
        row = AuditRow(check_id="demo", lhs=1.0, rhs=2.0, se=0.1)
        assert row.slack == 1.0 and row.passed
        near = AuditRow(check_id="demo", lhs=1.25, rhs=1.0, se=0.1)
        assert near.slack == -0.25 and near.passed  # within 3 se
        hard = AuditRow(check_id="demo", lhs=2.0, rhs=1.0, se=0.1)
        assert not hard.passed

    def test_audit_report_aggregation(self):
        good = AuditRow("a", 0.0, 1.0, 0.0)
        bad = AuditRow("b", 5.0, 1.0, 0.0)
        rep = AuditReport(rows=[good])
        assert rep.passed
        rep.extend(AuditReport(rows=[bad]))
        assert not rep.passed
        d = rep.as_dict()
        assert d["passed"] is False and len(d["rows"]) == 2

    def test_meta_growth_validation(self):
        with pytest.raises(InvalidInputError):
            DriverMeta(0.0, 0.0, RateFunction.constant(0.0), growth=(1.0, 1.0))
        ok = DriverMeta(0.0, 0.0, RateFunction.constant(0.0), growth=(2.0, 0.5))
        assert ok.growth == (2.0, 0.5)
