import math
import warnings

import numpy as np
import pytest
from scipy.stats import poisson

from bpc import mle
from bpc.mle import (
    BoundaryWarning,
    DegenerateDataError,
    FitReport,
    MleControl,
    SufficientStats,
    bootstrap_ci,
    finite_difference_hessian,
    fixed_point_sweep,
    log_likelihood,
    mle_fixed_point,
    normal_multiplier,
    observed_fim,
    sufficient_stats,
    wald_intervals,
)
from bpc.sampling import CountPairSample, SampleConfig, sample_exact
from bpc.series import LambdaParams, log_pmf
from bpc.study import DESIGN_CHOICES, DESIGN_INITS
from oracles import grid_mle

C1 = DESIGN_CHOICES[1]


def simulated(params, n, seed):
    return sample_exact(params, SampleConfig(n=n, seed=seed))


def independence_stats(l1=2.0, l2=2.5, n=400, seed=0):
    return sufficient_stats(simulated(LambdaParams(l1, l2, 1.0), n, seed))


class TestSufficientStats:
    def test_examples(self):
        s = sufficient_stats(CountPairSample(np.array([[0, 0]])))
        assert (s.n, s.t1, s.t2, s.t3) == (1, 0, 0, 0)
        s = sufficient_stats(CountPairSample(np.array([[1, 2], [3, 4]])))
        assert (s.n, s.t1, s.t2, s.t3) == (2, 4, 6, 14)

    def test_t3_zero_when_a_margin_is_zero(self):
        s = sufficient_stats(CountPairSample(np.array([[0, 3], [0, 5], [0, 1]])))
        assert s.t3 == 0

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            SufficientStats(3, -1, 2, 0)


class TestLogLikelihood:
    def test_independence_is_two_poissons(self):
        sample = simulated(LambdaParams(2, 2.5, 1), 60, 1)
        s = sufficient_stats(sample)
        want = poisson.logpmf(sample.x, 2).sum() + poisson.logpmf(sample.y, 2.5).sum()
        assert log_likelihood(LambdaParams(2, 2.5, 1), s) == pytest.approx(want, rel=1e-12)

    def test_differences_ignore_factorial_term(self):
        s = sufficient_stats(simulated(C1, 50, 2))
        p, q = LambdaParams(1.5, 2, 0.5), C1
        d0 = log_likelihood(p, s, 0.0) - log_likelihood(q, s, 0.0)
        d1 = log_likelihood(p, s, 123.4) - log_likelihood(q, s, 123.4)
        assert d0 == pytest.approx(d1, rel=1e-12)

    def test_matches_pointwise_log_pmf(self):
        sample = simulated(C1, 50, 3)
        want = log_pmf(C1, sample.x, sample.y).sum()
        assert log_likelihood(C1, sufficient_stats(sample)) == pytest.approx(want, rel=1e-9)


class TestFixedPoint:
    def test_independence_gives_sample_means(self):
        # stats chosen so that lambda3 is pinned at 1
        s = SufficientStats(n=10, t1=20, t2=30, t3=70)
        fit = mle_fixed_point(s)
        assert fit.boundary_active
        assert fit.estimate.lambda3 == 1.0
        assert fit.estimate.lambda1 == pytest.approx(2.0, abs=1e-6)
        assert fit.estimate.lambda2 == pytest.approx(3.0, abs=1e-6)
        assert fit.negative_variance_flag or fit.wald_intervals is not None

    def test_choice1_from_design_start(self):
        s = sufficient_stats(simulated(C1, 100, 4))
        fit = mle_fixed_point(s, MleControl(init=DESIGN_INITS[1]))
        assert fit.converged
        assert fit.log_likelihood >= log_likelihood(C1, s)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_grid_oracle(self, seed):
        choice = seed % 4 + 1
        s = sufficient_stats(simulated(DESIGN_CHOICES[choice], 50, 500 + seed))
        fit = mle_fixed_point(s, MleControl(epsilon=1e-10))
        np.testing.assert_allclose(fit.estimate.as_array(), grid_mle(s), atol=1e-3)

    def test_fixed_point_is_stationary(self):
        s = sufficient_stats(simulated(C1, 100, 5))
        fit = mle_fixed_point(s, MleControl(epsilon=1e-13, max_iter=100_000))
        after = fixed_point_sweep(fit.estimate, s, safeguard=False)
        np.testing.assert_allclose(after.as_array(), fit.estimate.as_array(), atol=1e-10)

    def test_safeguarded_sweep_is_monotone(self):
        # data on which the plain cyclic updates oscillate
        s = SufficientStats(n=50, t1=70, t2=70, t3=30)
        p = mle.default_init(s)
        values = [log_likelihood(p, s)]
        for _ in range(40):
            p = fixed_point_sweep(p, s)
            values.append(log_likelihood(p, s))
        assert np.all(np.diff(values) >= -1e-9)

    def test_converged_step_below_epsilon(self):
        s = sufficient_stats(simulated(C1, 75, 6))
        fit = mle_fixed_point(s, MleControl(epsilon=1e-6))
        assert fit.converged
        prev = mle_fixed_point(s, MleControl(epsilon=1e-6, max_iter=fit.iterations - 1))
        assert not prev.converged
        assert np.abs(prev.estimate.as_array() - fit.estimate.as_array()).max() < 1e-6

    def test_iteration_cap(self):
        s = sufficient_stats(simulated(C1, 75, 7))
        fit = mle_fixed_point(s, MleControl(init=DESIGN_INITS[1], epsilon=1e-14, max_iter=3))
        assert not fit.converged and fit.iterations == 3
        assert any("no convergence" in n for n in fit.notes)

    @pytest.mark.parametrize("stats", [SufficientStats(5, 0, 4, 0), SufficientStats(5, 3, 0, 0),
                                       SufficientStats(5, 3, 4, 0)])
    def test_degenerate(self, stats):
        with pytest.raises(DegenerateDataError):
            mle_fixed_point(stats)


class TestObservedFim:
    CASES = [(c, n, seed) for c in (1, 2, 3, 4) for n, seed in ((50, 1), (100, 2), (400, 3))]

    @pytest.mark.parametrize("choice,n,seed", CASES)
    def test_finite_difference_oracle(self, choice, n, seed):
        p = DESIGN_CHOICES[choice]
        s = sufficient_stats(simulated(p, n, seed))
        fim = observed_fim(p, s)
        fd = -finite_difference_hessian(lambda v: log_likelihood(LambdaParams(*v), s, 0.0),
                                        p.as_array(), 1e-4)
        np.testing.assert_allclose(fim, fd, rtol=1e-5, atol=1e-5 * np.abs(fim).max())
        np.testing.assert_array_equal(fim, fim.T)
        assert np.abs(fd - fd.T).max() < 1e-6 * np.abs(fd).max()

    def test_independence_blocks_are_orthogonal(self):
        s = independence_stats()
        with pytest.warns(BoundaryWarning):
            fim = observed_fim(LambdaParams(s.t1 / s.n, s.t2 / s.n, 1.0), s)
        assert fim[0, 1] == pytest.approx(0.0, abs=1e-8)
        assert fim[0, 0] == pytest.approx(s.t1 / (s.t1 / s.n) ** 2, rel=1e-10)

    def test_check_flag_is_quiet_when_correct(self):
        s = sufficient_stats(simulated(C1, 100, 8))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            observed_fim(C1, s, check=True)


class TestWald:
    def test_multiplier(self):
        assert normal_multiplier(0.05) == pytest.approx(1.959964, abs=1e-6)
        with pytest.raises(ValueError):
            normal_multiplier(1.0)

    def test_arithmetic(self):
        fit = FitReport(LambdaParams(2, 2, 0.5), np.diag([0.25, 0.25, 0.01]), None, None, 1, True,
                        0.0, False, False)
        raw, clipped = wald_intervals(fit, 0.05)
        assert raw[0] == pytest.approx([1.020, 2.980], abs=5e-4)
        assert clipped[2, 1] <= 1.0

    def test_clipping(self):
        fit = FitReport(LambdaParams(0.2, 2, 0.9), np.diag([0.25, 0.25, 0.04]), None, None, 1, True,
                        0.0, False, False)
        raw, clipped = wald_intervals(fit, 0.05)
        assert raw[0, 0] < 0 and clipped[0, 0] == 0
        assert raw[2, 1] > 1 and clipped[2, 1] == 1

    def test_refuses_negative_variance(self):
        fit = FitReport(C1, np.diag([0.25, -0.1, 0.01]), None, None, 1, True, 0.0, True, False)
        with pytest.raises(ValueError):
            wald_intervals(fit)

    def test_fit_report_intervals_contain_estimate(self):
        fit = mle_fixed_point(sufficient_stats(simulated(C1, 100, 9)))
        lo, hi = fit.wald_intervals[:, 0], fit.wald_intervals[:, 1]
        est = fit.estimate.as_array()
        assert np.all(lo < est) and np.all(est < hi)
        np.testing.assert_allclose(hi - est, 1.959964 * fit.standard_errors, rtol=1e-6)


class TestBootstrap:
    def test_independence_variance(self):
        n = 200
        s = independence_stats(n=n, seed=11)
        est = LambdaParams(s.t1 / n, s.t2 / n, 1.0)
        res = bootstrap_ci(est, n, B=200, seed=3)
        # refits pinned at lambda3 = 1 have lambda1 = xbar, whose variance is lambda1/n
        pinned = res.estimates[:, 2] >= 1.0
        assert pinned.sum() > 50
        assert res.estimates[pinned, 0].var(ddof=1) == pytest.approx(est.lambda1 / n, rel=0.25)
        # estimating lambda3 as well can only add variance
        assert res.variances[0] > 0.9 * est.lambda1 / n

    def test_deterministic(self):
        a = bootstrap_ci(C1, 60, B=60, seed=5)
        b = bootstrap_ci(C1, 60, B=60, seed=5)
        np.testing.assert_array_equal(a.intervals, b.intervals)

    def test_minimum_B(self):
        with pytest.raises(ValueError):
            bootstrap_ci(C1, 60, B=10)

    def test_intervals_centred_on_estimate(self):
        res = bootstrap_ci(C1, 80, B=100, seed=6)
        np.testing.assert_allclose(res.intervals.mean(axis=1), C1.as_array(), rtol=1e-12)
        assert res.estimates.shape[1] == 3 and res.n_dropped >= 0
