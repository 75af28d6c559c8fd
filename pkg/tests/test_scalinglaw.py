import math

import numpy as np
import pytest

from localsgdlab.errors import FitError
from localsgdlab.scalinglaw import (PowerLawFit, fit_power_law,
                                    fit_step_penalty, goodness_report,
                                    predict_loss_from_efficiency,
                                    predict_power_law, predict_step_penalty)


def synth_points(x_c, alpha, xs):
    return [(x, (x_c / x) ** alpha) for x in xs]


class TestFitPowerLaw:
    def test_exact_recovery(self):
        pts = synth_points(6.06e14, 0.069, [1e6, 1e7, 1e8, 1e9])
        fit = fit_power_law(pts, "N")
        assert fit.alpha == pytest.approx(0.069, rel=1e-9)
        assert math.log(fit.x_c) == pytest.approx(math.log(6.06e14), rel=1e-9)
        assert fit.r_squared == pytest.approx(1.0)

    def test_two_points_exact_interpolation(self):
        pts = synth_points(1e10, 0.1, [1e5, 1e8])
        fit = fit_power_law(pts, "N")
        assert fit.r_squared == pytest.approx(1.0)
        for x, l in pts:
            assert predict_power_law(fit, x) == pytest.approx(l, rel=1e-12)

    def test_noisy_recovery_monte_carlo(self):
        # oracle: median over 100 seeds of alpha recovered from 8 points with
        # 1% multiplicative log-normal noise stays within 5% of truth
        truth = 0.07
        xs = np.logspace(5, 9, 8)
        alphas = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            pts = [(x, (1e14 / x) ** truth * math.exp(rng.normal(0, 0.01)))
                   for x in xs]
            alphas.append(fit_power_law(pts, "N").alpha)
        assert abs(np.median(alphas) - truth) / truth < 0.05

    def test_scale_equivariance(self):
        pts = synth_points(5e8, 0.12, [1e4, 3e5, 2e7])
        f1 = fit_power_law(pts, "D")
        c = 137.0
        f2 = fit_power_law([(c * x, l) for x, l in pts], "D")
        assert f2.alpha == pytest.approx(f1.alpha, rel=1e-9)
        assert f2.x_c == pytest.approx(c * f1.x_c, rel=1e-9)

    def test_rejects_bad_input(self):
        with pytest.raises(FitError):
            fit_power_law([(1e6, 2.0)], "N")          # too few
        with pytest.raises(FitError):
            fit_power_law([(1e6, 2.0), (1e6, 1.0)], "N")  # identical X
        with pytest.raises(FitError):
            fit_power_law([(-1.0, 2.0), (2.0, 1.0)], "N")  # non-positive
        with pytest.raises(FitError):
            fit_power_law([(1.0, 1.0), (2.0, 2.0)], "Q")   # bad axis


class TestPredict:
    def test_at_scale_constant(self):
        fit = PowerLawFit("N", 1e12, 0.08, 1.0, 4)
        assert predict_power_law(fit, 1e12) == pytest.approx(1.0)

    def test_extrapolation_reference(self):
        fit = PowerLawFit("N", 3.15e14, 0.072, 1.0, 8)
        assert predict_power_law(fit, 3e9) == pytest.approx(2.30, abs=0.005)

    def test_strictly_decreasing(self):
        fit = PowerLawFit("N", 1e12, 0.08, 1.0, 4)
        xs = np.logspace(4, 12, 30)
        preds = [predict_power_law(fit, x) for x in xs]
        assert all(a > b for a, b in zip(preds, preds[1:]))


class TestStepPenalty:
    BASE = PowerLawFit("N", 1e12, 0.08, 1.0, 4)

    def grid(self, alpha_s):
        pts = []
        for s in (1, 8, 32, 128):
            for n in (1e4, 1e5, 1e6):
                pts.append((s, n, alpha_s * s + predict_power_law(self.BASE, n)))
        return pts

    def test_exact_linear_recovery(self):
        fit = fit_step_penalty(self.grid(0.001), self.BASE)
        assert fit.alpha_s == pytest.approx(0.001, abs=1e-12)
        assert fit.max_abs_residual < 1e-12

    def test_all_zero_s_rank_error(self):
        pts = [(0, 1e5, 1.0), (0, 1e6, 0.9)]
        with pytest.raises(FitError):
            fit_step_penalty(pts, self.BASE)

    def test_range_enforced(self):
        with pytest.raises(FitError):
            fit_step_penalty([(2048, 1e5, 1.0)], self.BASE)
        fit = fit_step_penalty(self.grid(0.002), self.BASE)
        with pytest.raises(ValueError):
            predict_step_penalty(fit, 1024, 1e5)

    def test_prediction(self):
        fit = fit_step_penalty(self.grid(0.002), self.BASE)
        expected = 0.002 * 16 + predict_power_law(self.BASE, 1e5)
        assert predict_step_penalty(fit, 16, 1e5) == pytest.approx(expected)

    def test_per_size_diagnostics(self):
        fit = fit_step_penalty(self.grid(0.003), self.BASE)
        assert set(fit.per_size_slopes) == {1e4, 1e5, 1e6}
        for slope in fit.per_size_slopes.values():
            assert slope == pytest.approx(0.003, abs=1e-12)


class TestCombinedLaw:
    BASE = PowerLawFit("N", 3.15e14, 0.072, 1.0, 8)

    def test_k_zero_reduces_to_base(self):
        for n in (1e5, 1e7, 1e9):
            assert predict_loss_from_efficiency(self.BASE, 2e-3, 0.0, n) == \
                pytest.approx(predict_power_law(self.BASE, n))

    def test_penalty_at_headline_lambda(self):
        l0 = predict_power_law(self.BASE, 1e8)
        l = predict_loss_from_efficiency(self.BASE, 2e-3, 0.9, 1e8)
        assert l - l0 == pytest.approx(0.018, abs=1e-12)

    def test_strictly_increasing_in_k(self):
        ks = np.linspace(0, 0.99, 25)
        ls = [predict_loss_from_efficiency(self.BASE, 2e-3, k, 1e8) for k in ks]
        assert all(a < b for a, b in zip(ls, ls[1:]))

    def test_k_one_rejected(self):
        with pytest.raises(ValueError):
            predict_loss_from_efficiency(self.BASE, 2e-3, 1.0, 1e8)


class TestGoodness:
    def test_zero_residuals_on_training_points(self):
        pts = synth_points(1e10, 0.1, [1e5, 1e6, 1e7])
        fit = fit_power_law(pts, "N")
        report = goodness_report(fit, pts)
        assert report["max_abs_residual_nats"] < 1e-12

    def test_single_holdout_point(self):
        fit = PowerLawFit("N", 1e10, 0.1, 1.0, 3)
        report = goodness_report(fit, [(1e8, 1.6)])
        assert len(report["points"]) == 1

    def test_empty_holdout_rejected(self):
        fit = PowerLawFit("N", 1e10, 0.1, 1.0, 3)
        with pytest.raises(FitError):
            goodness_report(fit, [])
