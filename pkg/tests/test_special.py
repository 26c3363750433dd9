"""Special-function accuracy and Dirichlet utility checks.

High-precision truth comes from mpmath (50 digits); scipy.special serves
as a second, independently implemented cross-check.
"""

import math

import mpmath
import numpy as np
import pytest
import scipy.special as sp

from jointpmf.special import (
    DirichletParams,
    digamma,
    dirichlet_expect_log,
    dirichlet_mean,
    log_dirichlet_norm,
    log_gamma,
    log_sum_exp,
)

mpmath.mp.dps = 50

EULER_GAMMA = 0.5772156649015329


class TestDigamma:
    def test_known_values(self):
        assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-10)
        assert digamma(2.0) == pytest.approx(0.42278433509846713, abs=1e-10)
        assert digamma(0.5) == pytest.approx(-1.9635100260214235, abs=1e-10)

    def test_absolute_error_envelope(self):
        # Truth from mpmath.  For tiny arguments |psi| ~ 1/x exceeds the
        # float64 resolution of the stated 1e-10 bound, so the bound is
        # floored at a few ulps of the true value.
        rng = np.random.default_rng(42)
        xs = np.concatenate(
            [10.0 ** rng.uniform(-8, 8, 400), rng.uniform(1e-6, 50.0, 400)]
        )
        for x in xs:
            truth = float(mpmath.digamma(float(x)))
            bound = max(1e-10, 4.0 * np.spacing(abs(truth)))
            assert abs(digamma(float(x)) - truth) <= bound

    def test_matches_scipy_vectorized(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(1e-3, 1e4, size=(40, 7))
        np.testing.assert_allclose(digamma(x), sp.digamma(x), rtol=0, atol=1e-10)

    def test_recurrence(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0.0, 100.0, 1000)
        x = x[x > 0]
        err = np.abs(digamma(x + 1.0) - digamma(x) - 1.0 / x)
        assert err.max() <= 1e-10

    def test_domain_errors(self):
        for bad in [0.0, -1.0, math.nan, math.inf]:
            with pytest.raises(ValueError):
                digamma(bad)


class TestLogGamma:
    def test_known_values(self):
        assert log_gamma(1.0) == pytest.approx(0.0, abs=1e-14)
        assert log_gamma(5.0) == pytest.approx(math.log(24.0), rel=1e-12)
        assert log_gamma(0.5) == pytest.approx(0.5 * math.log(math.pi), rel=1e-12)

    def test_relative_error_envelope(self):
        # Relative bound floored at 1 near the zeros of ln Gamma (x = 1, 2).
        rng = np.random.default_rng(11)
        xs = np.concatenate(
            [10.0 ** rng.uniform(-8, 8, 400), rng.uniform(1e-6, 50.0, 400)]
        )
        for x in xs:
            truth = float(mpmath.loggamma(float(x)))
            assert abs(log_gamma(float(x)) - truth) <= 1e-12 * max(1.0, abs(truth))

    def test_recurrence(self):
        rng = np.random.default_rng(13)
        x = rng.uniform(0.0, 100.0, 1000)
        x = x[x > 0]
        err = np.abs(log_gamma(x + 1.0) - log_gamma(x) - np.log(x))
        assert err.max() <= 1e-12 * np.maximum(1.0, np.abs(log_gamma(x))).max()

    def test_matches_scipy(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(1e-4, 1e6, 500)
        np.testing.assert_allclose(log_gamma(x), sp.gammaln(x), rtol=1e-12)

    def test_domain_errors(self):
        for bad in [0.0, -3.0, math.nan, math.inf]:
            with pytest.raises(ValueError):
                log_gamma(bad)


class TestDirichletParams:
    def test_rejects_bad_alpha(self):
        for bad in [[], [0.0], [1.0, -2.0], [math.nan], [math.inf]]:
            with pytest.raises(ValueError):
                DirichletParams(np.asarray(bad))

    def test_accepts_and_freezes(self):
        p = DirichletParams(np.array([1.0, 2.0]))
        assert len(p) == 2
        with pytest.raises(ValueError):
            p.alpha[0] = 5.0


class TestLogDirichletNorm:
    def test_examples(self):
        assert log_dirichlet_norm([1.0, 1.0]) == pytest.approx(0.0, abs=1e-14)
        assert log_dirichlet_norm([2.0, 2.0]) == pytest.approx(math.log(6.0), rel=1e-12)
        assert log_dirichlet_norm([0.5, 0.5]) == pytest.approx(-math.log(math.pi), rel=1e-12)

    def test_accepts_params_object(self):
        p = DirichletParams(np.array([2.0, 2.0]))
        assert log_dirichlet_norm(p) == log_dirichlet_norm([2.0, 2.0])


class TestDirichletExpectLog:
    def test_examples(self):
        np.testing.assert_allclose(dirichlet_expect_log([1.0, 1.0]), [-1.0, -1.0], atol=1e-12)
        np.testing.assert_allclose(dirichlet_expect_log([2.0, 2.0]), [-5.0 / 6.0] * 2, atol=1e-12)
        np.testing.assert_allclose(dirichlet_expect_log([3.0]), [0.0], atol=0)

    def test_strictly_negative_for_k_ge_2(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            k = rng.integers(2, 8)
            alpha = rng.uniform(0.05, 20.0, k)
            assert np.all(dirichlet_expect_log(alpha) < 0.0)

    def test_jensen_vs_mean(self):
        rng = np.random.default_rng(19)
        for _ in range(100):
            k = rng.integers(1, 9)
            alpha = rng.uniform(0.1, 30.0, k)
            lhs = np.exp(dirichlet_expect_log(alpha))
            assert np.all(lhs <= dirichlet_mean(alpha) + 1e-15)


class TestDirichletMean:
    def test_examples(self):
        np.testing.assert_allclose(dirichlet_mean([1, 1, 1, 1]), [0.25] * 4, atol=1e-15)
        np.testing.assert_allclose(dirichlet_mean([2, 6]), [0.25, 0.75], atol=1e-15)
        np.testing.assert_allclose(dirichlet_mean([5]), [1.0], atol=0)

    def test_sums_to_one(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            alpha = rng.uniform(1e-4, 100.0, rng.integers(1, 20))
            assert abs(dirichlet_mean(alpha).sum() - 1.0) <= 1e-12


class TestLogSumExp:
    def test_examples(self):
        assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=0)
        assert log_sum_exp([-1000.0, -1000.0]) == -1000.0 + math.log(2.0)
        assert log_sum_exp([3.0]) == 3.0

    def test_shift_invariance(self):
        rng = np.random.default_rng(29)
        for _ in range(50):
            v = rng.normal(0, 10, rng.integers(1, 30))
            c = rng.normal(0, 100)
            assert abs(log_sum_exp(v + c) - (log_sum_exp(v) + c)) <= 1e-12 * max(
                1.0, abs(log_sum_exp(v) + c)
            )

    def test_neg_inf_entries(self):
        assert log_sum_exp([-math.inf, 0.0]) == 0.0
        assert log_sum_exp([-math.inf, -math.inf]) == -math.inf

    def test_axis(self):
        m = np.array([[0.0, 0.0], [math.log(3.0), 1.0]])
        np.testing.assert_allclose(
            log_sum_exp(m, axis=0),
            [math.log(1 + 3), math.log(1 + math.e)],
            rtol=1e-15,
        )

    def test_empty_is_domain_error(self):
        with pytest.raises(ValueError):
            log_sum_exp([])
