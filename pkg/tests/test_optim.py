import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from localsgdlab.errors import LayoutError
from localsgdlab.optim import (AdamWHyper, AdamWState, CosineSchedule,
                               NesterovHyper, NesterovState, adamw_step,
                               cosine_lr, nesterov_step, sgd_step)


class TestAdamW:
    def test_single_step_closed_form(self):
        # theta=1, g=0.5, lr=1e-3, betas (0.9, 0.95), eps 1e-8, wd 0.1:
        # m_hat=0.5, v_hat=0.25, theta' = 1 - 1e-3*(0.5/(0.5+1e-8)) - 1e-4
        state = AdamWState.init(1, AdamWHyper(0.9, 0.95, 1e-8, 0.1))
        new, state = adamw_step(np.array([1.0]), np.array([0.5]), state, 1e-3)
        assert new[0] == pytest.approx(0.99890000002, abs=1e-11)
        assert state.step_count == 1

    def test_zero_grad_zero_wd_is_identity(self):
        state = AdamWState.init(3, AdamWHyper(weight_decay=0.0))
        theta = np.array([1.0, -2.0, 0.5])
        new, _ = adamw_step(theta, np.zeros(3), state, 1e-3)
        assert np.array_equal(new, theta)

    def test_zero_lr_updates_moments_only(self):
        state = AdamWState.init(2)
        theta = np.array([1.0, 2.0])
        g = np.array([0.3, -0.7])
        new, state = adamw_step(theta, g, state, 0.0)
        assert np.array_equal(new, theta)
        assert state.step_count == 1
        assert np.any(state.first_moment != 0)
        assert np.all(state.second_moment >= 0)

    def test_layout_mismatch(self):
        state = AdamWState.init(3)
        with pytest.raises(LayoutError):
            adamw_step(np.zeros(3), np.zeros(4), state, 1e-3)

    def test_large_eps_behaves_like_scaled_sgd(self):
        # beta1=beta2=0, eps >> |g|: update direction is -g
        rng = np.random.default_rng(0)
        g = rng.standard_normal(50)
        theta = rng.standard_normal(50)
        state = AdamWState.init(50, AdamWHyper(0.0, 0.0, 1e6, 0.0))
        new, _ = adamw_step(theta, g, state, 1.0)
        upd = new - theta
        cos = upd @ (-g) / (np.linalg.norm(upd) * np.linalg.norm(g))
        assert abs(cos - 1.0) < 1e-9

    def test_second_moment_nonnegative_over_steps(self):
        rng = np.random.default_rng(1)
        theta = rng.standard_normal(10)
        state = AdamWState.init(10)
        for t in range(20):
            theta, state = adamw_step(theta, rng.standard_normal(10), state, 1e-3)
            assert np.all(state.second_moment >= 0)
            assert state.step_count == t + 1


class TestNesterov:
    def test_single_step_closed_form(self):
        # v=0, g=0.1, lr=0.7, mu=0.9: theta' = 1 - 0.7*(0.1 + 0.9*0.1) = 0.867
        state = NesterovState.init(1, NesterovHyper(lr=0.7, momentum=0.9))
        new, state = nesterov_step(np.array([1.0]), np.array([0.1]), state)
        assert new[0] == pytest.approx(0.867, abs=1e-15)
        assert state.velocity[0] == pytest.approx(0.1)

    def test_identity_hyper_is_plain_subtraction(self):
        rng = np.random.default_rng(2)
        theta = rng.standard_normal(20)
        g = rng.standard_normal(20)
        state = NesterovState.init(20, NesterovHyper(lr=1.0, momentum=0.0))
        new, _ = nesterov_step(theta, g, state)
        assert np.array_equal(new, theta - g)

    def test_zero_grad_zero_velocity_is_identity(self):
        theta = np.array([3.0, -1.0])
        state = NesterovState.init(2)
        new, _ = nesterov_step(theta, np.zeros(2), state)
        assert np.array_equal(new, theta)

    def test_layout_mismatch(self):
        with pytest.raises(LayoutError):
            nesterov_step(np.zeros(2), np.zeros(3), NesterovState.init(2))


class TestSGD:
    def test_plain_step(self):
        assert np.array_equal(sgd_step(np.array([1.0]), np.array([0.25]), 2.0),
                              np.array([0.5]))


class TestCosine:
    SCHED = CosineSchedule(lr_peak=1.0, total_steps=100, final_fraction=0.1,
                           warmup_steps=0)

    def test_peak_at_warmup_end(self):
        s = CosineSchedule(1.0, 100, 0.1, warmup_steps=10)
        assert cosine_lr(s, 10) == pytest.approx(1.0)

    def test_final_is_ten_percent(self):
        assert cosine_lr(self.SCHED, 100) == pytest.approx(0.1)

    def test_midpoint(self):
        assert cosine_lr(self.SCHED, 50) == pytest.approx(0.55)

    def test_warmup_ramp(self):
        s = CosineSchedule(2.0, 100, 0.1, warmup_steps=10)
        assert cosine_lr(s, 0) == 0.0
        assert cosine_lr(s, 5) == pytest.approx(1.0)

    def test_clamped_past_total(self):
        assert cosine_lr(self.SCHED, 500) == pytest.approx(0.1)

    @given(st.integers(min_value=0, max_value=200))
    def test_non_increasing_after_warmup(self, step):
        s = CosineSchedule(1.0, 150, 0.1, warmup_steps=5)
        if step >= 5:
            assert cosine_lr(s, step + 1) <= cosine_lr(s, step) + 1e-15

    def test_bad_fields(self):
        with pytest.raises(ValueError):
            CosineSchedule(1.0, 100, final_fraction=0.0)
        with pytest.raises(ValueError):
            CosineSchedule(-1.0, 100)


class TestDeterminism:
    def test_adamw_deterministic(self):
        rng = np.random.default_rng(3)
        theta = rng.standard_normal(10)
        g = rng.standard_normal(10)
        a1, s1 = adamw_step(theta, g, AdamWState.init(10), 1e-3)
        a2, s2 = adamw_step(theta, g, AdamWState.init(10), 1e-3)
        assert np.array_equal(a1, a2)
        assert np.array_equal(s1.first_moment, s2.first_moment)
