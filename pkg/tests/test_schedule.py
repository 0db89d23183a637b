"""Noise schedules, forward/reverse kernels, subset trajectories."""

import numpy as np
import pytest

from unitdiff import (
    linear_schedule,
    posterior_sample,
    q_sample,
    subset_trajectory,
    uniform_schedule,
)
from unitdiff.schedule import schedule_from_config, schedule_to_config

# Direct product prod_{t}(1 - beta_t) for T=1000, beta 1e-4 -> 0.02,
# computed by a standalone loop before the schedule module existed.
ALPHA_BAR_1000_ORACLE = 4.035829765375676e-05


class TestLinearSchedule:
    def test_hand_product_T2(self):
        ns = linear_schedule(2, 0.5, 0.5)
        assert np.allclose(ns.alpha_bars, [0.5, 0.25])

    def test_terminal_level_matches_direct_product(self):
        ns = linear_schedule(1000, 1e-4, 0.02)
        assert abs(ns.alpha_bar(1000) - ALPHA_BAR_1000_ORACLE) < 0.01 * ALPHA_BAR_1000_ORACLE

    def test_default_endpoints_scale_with_T(self):
        # scaled endpoints keep the terminal signal level at ~4e-5 for any T
        ns = linear_schedule(100)
        assert ns.alpha_bar(100) < 1e-2
        assert 1e-6 < ns.alpha_bar(100) < 1e-3

    def test_alpha_bars_strictly_decreasing(self):
        ns = linear_schedule(500)
        assert np.all(np.diff(ns.alpha_bars) < 0.0)

    def test_reconstruction_identity(self):
        ns = linear_schedule(1000)
        prev = np.concatenate([[ns.alpha_bar0], ns.alpha_bars[:-1]])
        rebuilt = (1.0 - ns.betas) * prev
        assert np.all(np.abs(rebuilt / ns.alpha_bars - 1.0) < 1e-12)

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            linear_schedule(1000, 0.02, 1e-4)
        with pytest.raises(ValueError):
            linear_schedule(1000, 0.0, 0.02)
        with pytest.raises(ValueError):
            linear_schedule(1, 1e-4, 0.02)


class TestUniformSchedule:
    def test_initial_corruption_floor(self):
        # signal level is 1 - beta0 = 0.7 already at t=0
        for T in (10, 100, 1000):
            ns = uniform_schedule(T, 0.3)
            assert ns.alpha_bar(0) == 0.7

    def test_midpoint_value(self):
        ns = uniform_schedule(10, 0.3)
        assert np.isclose(ns.alpha_bar(5), 0.35)

    def test_terminal_clipped_to_floor(self):
        ns = uniform_schedule(1000, 0.3)
        assert ns.alpha_bar(1000) == 1e-5

    def test_reconstruction_identity(self):
        ns = uniform_schedule(777, 0.3)
        prev = np.concatenate([[ns.alpha_bar0], ns.alpha_bars[:-1]])
        rebuilt = (1.0 - ns.betas) * prev
        assert np.all(np.abs(rebuilt / ns.alpha_bars - 1.0) < 1e-12)

    def test_strictly_decreasing(self):
        ns = uniform_schedule(200, 0.3)
        assert np.all(np.diff(ns.alpha_bars) < 0.0)

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            uniform_schedule(100, 0.0)
        with pytest.raises(ValueError):
            uniform_schedule(100, 1.0)


class TestQSample:
    def test_zero_noise(self, uniform_ns):
        v0 = np.array([[1.0, -2.0], [3.0, 4.0]])
        out = q_sample(uniform_ns, v0, 10, np.zeros_like(v0))
        ab = uniform_ns.alpha_bar(10)
        assert np.allclose(out, np.sqrt(ab) * v0)

    def test_terminal_step_is_nearly_pure_noise(self, uniform_ns):
        rng = np.random.default_rng(0)
        v0 = rng.standard_normal((4, 8)) * 5.0
        noise = rng.standard_normal((4, 8))
        out = q_sample(uniform_ns, v0, uniform_ns.T, noise)
        eps = uniform_ns.alpha_bar(uniform_ns.T)
        bound = np.sqrt(eps) * np.linalg.norm(v0) + abs(np.sqrt(1 - eps) - 1) * np.linalg.norm(noise)
        assert np.linalg.norm(out - noise) <= bound + 1e-12

    def test_monte_carlo_moments(self, linear_ns):
        # sample mean -> sqrt(ab) v0 and variance -> 1 - ab, within 3 SE
        t = 400
        ab = linear_ns.alpha_bar(t)
        v0 = np.array([[2.0, -1.0, 0.5]])
        n = 100_000
        rng = np.random.default_rng(123)
        draws = np.stack(
            [q_sample(linear_ns, v0, t, rng.standard_normal(v0.shape)) for _ in range(n)]
        ).reshape(n, 3)
        se_mean = np.sqrt((1 - ab) / n)
        assert np.all(np.abs(draws.mean(axis=0) - np.sqrt(ab) * v0[0]) < 3 * se_mean)
        var = draws.var(axis=0)
        se_var = (1 - ab) * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(var - (1 - ab)) < 3 * se_var)

    def test_bad_t_rejected(self, linear_ns):
        v0 = np.zeros((2, 2))
        with pytest.raises(ValueError):
            q_sample(linear_ns, v0, 0, v0)
        with pytest.raises(ValueError):
            q_sample(linear_ns, v0, linear_ns.T + 1, v0)

    def test_shape_mismatch_rejected(self, linear_ns):
        with pytest.raises(ValueError):
            q_sample(linear_ns, np.zeros((2, 2)), 1, np.zeros((3, 2)))


class TestPosteriorSample:
    def test_terminal_step_returns_prediction_exactly(self, uniform_ns):
        v0_hat = np.array([[1.0, 2.0], [3.0, -4.0]])
        out = posterior_sample(uniform_ns, v0_hat * 0.5, v0_hat, 10, 0,
                               np.ones_like(v0_hat), mode="posterior")
        assert np.array_equal(out, v0_hat)

    def test_consistent_pair_collapses_to_marginal_mean(self, linear_ns):
        # substituting v_t = sqrt(ab_t) v0 into the posterior mean simplifies
        # to sqrt(ab_prev) v0: both coefficients share the (1 - ab_t) factor
        t, t_prev = 700, 350
        rng = np.random.default_rng(4)
        v0 = rng.standard_normal((3, 5))
        v_t = np.sqrt(linear_ns.alpha_bar(t)) * v0
        out = posterior_sample(linear_ns, v_t, v0, t, t_prev, np.zeros_like(v0))
        assert np.allclose(out, np.sqrt(linear_ns.alpha_bar(t_prev)) * v0)

    def test_renoise_zero_noise(self, uniform_ns):
        v0_hat = np.array([[1.0, -1.0]])
        t, t_prev = 500, 100
        out = posterior_sample(uniform_ns, v0_hat, v0_hat, t, t_prev,
                               np.zeros_like(v0_hat), mode="renoise")
        assert np.allclose(out, np.sqrt(uniform_ns.alpha_bar(t_prev)) * v0_hat)

    def test_noise_level_decreases_with_perfect_prediction(self, linear_ns):
        # E||v_t - sqrt(ab_t) v0||^2 tracks 1 - ab_t along the reverse pass
        rng = np.random.default_rng(9)
        v0 = rng.standard_normal((6, 4))
        taus = subset_trajectory(linear_ns.T, 20)
        trials = 200
        errs = np.zeros(len(taus))
        for trial in range(trials):
            v_t = q_sample(linear_ns, v0, linear_ns.T, rng.standard_normal(v0.shape))
            for i, t in enumerate(taus):
                ab = linear_ns.alpha_bar(int(t))
                errs[i] += ((v_t - np.sqrt(ab) * v0) ** 2).sum()
                t_prev = int(taus[i + 1]) if i + 1 < len(taus) else 0
                v_t = posterior_sample(linear_ns, v_t, v0, int(t), t_prev,
                                       rng.standard_normal(v0.shape))
        errs /= trials
        # allow Monte-Carlo slack on the non-increase
        assert np.all(np.diff(errs) < 0.05 * errs[:-1] + 1e-6)

    def test_invalid_order_rejected(self, linear_ns):
        v = np.zeros((1, 2))
        with pytest.raises(ValueError):
            posterior_sample(linear_ns, v, v, 5, 5, v)
        with pytest.raises(ValueError):
            posterior_sample(linear_ns, v, v, 5, 9, v)


class TestSubsetTrajectory:
    def test_arithmetic_spacing(self):
        assert subset_trajectory(10, 5).tolist() == [10, 8, 6, 4, 2]

    def test_full_trajectory_is_identity(self):
        assert subset_trajectory(1000, 1000).tolist() == list(range(1000, 0, -1))

    def test_fifty_of_thousand(self):
        taus = subset_trajectory(1000, 50)
        assert len(taus) == 50
        assert taus[0] == 1000
        assert np.all(np.diff(taus) == -20)

    def test_single_step(self):
        assert subset_trajectory(1000, 1).tolist() == [1000]

    def test_elements_always_in_range(self):
        for T in (3, 9, 10, 17, 100):
            for steps in range(1, T + 1):
                taus = subset_trajectory(T, steps)
                assert len(taus) == steps
                assert taus[0] == T
                assert taus.min() >= 1 and taus.max() <= T
                assert np.all(np.diff(taus) < 0)

    def test_too_many_steps_rejected(self):
        with pytest.raises(ValueError):
            subset_trajectory(10, 11)


class TestScheduleConfig:
    def test_round_trip(self):
        for ns in (linear_schedule(100), uniform_schedule(250, 0.3)):
            back = schedule_from_config(schedule_to_config(ns))
            assert back.kind == ns.kind
            assert np.array_equal(back.alpha_bars, ns.alpha_bars)
