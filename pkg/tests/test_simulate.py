import numpy as np
import pytest

from rankvol.errors import InvalidInputError, NumericalBlowupError, PartialResultError
from rankvol.model import MarketState, ModelParams, rank_names
from rankvol.simulate import (
    SimConfig,
    simulate_path,
    simulate_path_given_increments,
    simulate_paths,
    stationary_moments,
    step_weights,
)
from tests.conftest import make_small_params


def reference_drift(x, params):
    """Hand transcription of the weight drift, term by term."""
    view = rank_names(x)
    a_n = params.a[view.rank_of_name]
    s2_n = params.sigma2[view.rank_of_name]
    spot = float(np.sum(s2_n * x))
    return a_n - params.lam * x - s2_n * x + x * spot


class TestStepWeights:
    def test_zero_noise_hand_value(self):
        # drift of the larger asset: 0.3 - 0.6*0.6 - 0.04*0.6 + 0.6*0.04 = -0.06
        params = ModelParams(2, np.array([0.3, 0.3]), np.array([0.04, 0.04]))
        state = MarketState(0.0, np.array([0.6, 0.4]))
        out = step_weights(state, params, 1.0 / 252.0, np.zeros(2))
        assert out.x[0] == pytest.approx(0.6 - 0.06 / 252.0, abs=1e-12)
        assert out.t == pytest.approx(1.0 / 252.0)

    def test_zero_noise_matches_reference_drift(self):
        params = make_small_params()
        rng = np.random.default_rng(3)
        dt = 1.0 / 252.0
        for _ in range(20):
            x = rng.dirichlet(np.full(5, 2.0))
            x = np.clip(x, 1e-4, None)
            x /= x.sum()
            out = step_weights(MarketState(0.0, x), params, dt, np.zeros(5))
            expected = x + reference_drift(x, params) * dt
            assert np.allclose(out.x, expected, atol=1e-12)
            # the drift conserves total mass, so no renormalization was needed
            assert abs(expected.sum() - 1.0) < 1e-14

    def test_output_on_simplex(self):
        params = make_small_params()
        rng = np.random.default_rng(4)
        x = rng.dirichlet(np.ones(5)) + 1e-3
        state = MarketState(0.0, x / x.sum())
        out = step_weights(state, params, 1.0 / 252.0, rng.standard_normal(5))
        assert abs(out.x.sum() - 1.0) <= 1e-12

    def test_noise_shape_checked(self):
        params = make_small_params()
        with pytest.raises(InvalidInputError):
            step_weights(MarketState(0.0, np.full(5, 0.2)), params, 0.01, np.zeros(3))


class TestSimulatePath:
    def test_zero_horizon_returns_initial(self):
        params = make_small_params()
        traj = simulate_path(params, np.full(5, 0.2), SimConfig(horizon=0.0, seed=1))
        assert traj.n_samples == 1
        assert np.allclose(traj.weights[0], 0.2)
        assert traj.log_total_cap[0] == 0.0

    def test_deterministic_given_seed(self):
        params = make_small_params()
        cfg = SimConfig(horizon=1.0, seed=99)
        a = simulate_path(params, np.full(5, 0.2), cfg)
        b = simulate_path(params, np.full(5, 0.2), cfg)
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.log_total_cap, b.log_total_cap)

    def test_simplex_and_floor_preserved(self):
        params = make_small_params()
        cfg = SimConfig(horizon=3.0, seed=12)
        traj = simulate_path(params, np.full(5, 0.2), cfg)
        assert np.abs(traj.weights.sum(axis=1) - 1.0).max() <= 1e-12
        assert traj.weights.min() >= cfg.floor_eps
        assert traj.clamp_events == 0

    def test_ranked_view_cached(self):
        params = make_small_params()
        traj = simulate_path(params, np.full(5, 0.2), SimConfig(horizon=0.5, seed=1))
        ranked, order, inv = traj.ranked()
        assert np.all(np.diff(ranked, axis=1) <= 0)
        take = np.take_along_axis(traj.weights, order, axis=1)
        assert np.array_equal(take, ranked)
        assert traj.ranked() is traj._ranked_cache

    def test_top_m_truncation_matches_small_model(self):
        params = make_small_params()
        x0 = np.array([0.45, 0.25, 0.15, 0.10, 0.05])
        cfg = SimConfig(horizon=1.0, seed=21, top_m=3)
        truncated = simulate_path(params, x0, cfg)
        small = ModelParams(3, params.a[:3], params.sigma2[:3])
        x0_small = x0[:3] / x0[:3].sum()
        direct = simulate_path(small, x0_small, SimConfig(horizon=1.0, seed=21))
        assert np.array_equal(truncated.weights, direct.weights)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_blowup_reports_step_and_time(self):
        params = make_small_params()
        inc = np.zeros((10, 5))
        inc[6, 2] = np.inf
        with pytest.raises(NumericalBlowupError) as err:
            simulate_path_given_increments(params, np.full(5, 0.2), 1.0 / 252.0, inc)
        assert err.value.step_index == 7
        assert err.value.time == pytest.approx(7.0 / 252.0)


class TestParallelDeterminism:
    def test_workers_do_not_change_results(self):
        params = make_small_params()
        cfg = SimConfig(horizon=0.5, n_paths=20, seed=7)
        x0 = np.full(5, 0.2)
        one = simulate_paths(params, x0, cfg, workers=1)
        four = simulate_paths(params, x0, cfg, workers=4)
        for a, b in zip(one, four):
            assert np.array_equal(a.weights, b.weights)
            assert np.array_equal(a.log_total_cap, b.log_total_cap)

    def test_path_index_stream_independent_of_batching(self):
        params = make_small_params()
        cfg = SimConfig(horizon=0.5, n_paths=5, seed=31)
        batch = simulate_paths(params, np.full(5, 0.2), cfg)
        for i in range(5):
            single = simulate_path(params, np.full(5, 0.2), cfg, path_index=i)
            assert np.array_equal(single.weights, batch[i].weights)

    def test_thread_cap_env(self, monkeypatch):
        params = make_small_params()
        cfg = SimConfig(horizon=0.2, n_paths=4, seed=7)
        plain = simulate_paths(params, np.full(5, 0.2), cfg)
        monkeypatch.setenv("RANKVOL_THREADS", "1")
        capped = simulate_paths(params, np.full(5, 0.2), cfg, workers=8)
        for a, b in zip(plain, capped):
            assert np.array_equal(a.weights, b.weights)


class TestStepSizeConsistency:
    def test_error_decreases_with_refinement(self):
        """Weak order-one behavior: refining dt on one Brownian path moves the
        terminal state monotonically toward the fine-grid reference."""
        params = ModelParams(
            3, np.array([0.4, 0.25, 0.15]), np.array([0.03, 0.02, 0.015])
        )
        x0 = np.array([0.5, 0.3, 0.2])
        horizon = 2.0
        dt_ref = 1.0 / 8064.0
        n_ref = int(round(horizon / dt_ref))
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(2718)))
        dw = rng.standard_normal((n_ref, 3)) * np.sqrt(dt_ref)
        ref = simulate_path_given_increments(params, x0, dt_ref, dw).weights[-1]
        errors = []
        for factor in (32, 16, 8):  # dt = 1/252, 1/504, 1/1008
            coarse = dw.reshape(n_ref // factor, factor, 3).sum(axis=1)
            traj = simulate_path_given_increments(params, x0, dt_ref * factor, coarse)
            errors.append(np.abs(traj.weights[-1] - ref).max())
        assert errors[0] > errors[1] > errors[2]


class TestStationaryMoments:
    def test_defaults_are_fifty_paths_hundred_years(self):
        from rankvol.simulate import MOMENTS_DEFAULT_HORIZON, MOMENTS_DEFAULT_PATHS

        assert MOMENTS_DEFAULT_PATHS == 50
        assert MOMENTS_DEFAULT_HORIZON == 100.0

    def test_moment_identities(self, small_params):
        moments = stationary_moments(
            small_params, SimConfig(horizon=20.0, n_paths=16, seed=13)
        )
        assert moments.n_paths == 16
        assert abs(moments.mu.sum() - 1.0) <= 1e-10
        assert abs(moments.rho.sum() - float(np.sum(small_params.sigma2 * moments.mu))) <= 1e-12
        assert np.all(np.diff(moments.mu) <= 0)

    def test_time_average_variant_close_to_terminal(self, small_params):
        cfg = SimConfig(horizon=30.0, n_paths=12, seed=14)
        terminal = stationary_moments(small_params, cfg)
        averaged = stationary_moments(small_params, cfg, time_average=True)
        assert averaged.time_averaged
        assert np.allclose(terminal.mu, averaged.mu, atol=5 * terminal.mu_se.max() + 0.02)

    def test_symmetric_params_match_plain_volatility_stabilized_engine(self):
        """With rank-independent coefficients the dynamics cannot depend on
        ranking; an independently coded name-based integrator must agree."""
        d = 4
        a, s2 = 0.3, 0.04
        params = ModelParams(d, np.full(d, a), np.full(d, s2))
        x0 = np.array([0.4, 0.3, 0.2, 0.1])
        dt = 1.0 / 504.0
        n = 504
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(55)))
        dw = rng.standard_normal((n, d)) * np.sqrt(dt)
        traj = simulate_path_given_increments(params, x0, dt, dw)

        lam = d * a
        sig = np.sqrt(s2)
        x = x0.copy()
        for j in range(n):
            drift = a - lam * x  # constant-coefficient form: variance terms cancel
            c = sig * np.sqrt(x)
            noise = c * dw[j] - x * np.sum(c * dw[j])
            x = x + drift * dt + noise
            x = x / x.sum()
        assert np.allclose(traj.weights[-1], x, atol=1e-9)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_partial_result_lists_failed_paths(self, small_params, monkeypatch):
        """A path whose noise degenerates is isolated; the rest still report."""
        import rankvol.simulate as sim

        original = sim._path_generator

        class Degenerate:
            def standard_normal(self, shape):
                return np.full(shape, np.inf)

        def patched(seed, path_index):
            return Degenerate() if path_index == 2 else original(seed, path_index)

        monkeypatch.setattr(sim, "_path_generator", patched)
        cfg = SimConfig(horizon=0.2, n_paths=8, seed=3)
        with pytest.raises(PartialResultError) as err:
            stationary_moments(small_params, cfg)
        assert err.value.failed_paths == [2]
        assert err.value.partial.n_paths == 7
        assert abs(err.value.partial.mu.sum() - 1.0) <= 1e-10

    def test_config_validation(self, small_params):
        with pytest.raises(InvalidInputError):
            SimConfig(horizon=-1.0)
        with pytest.raises(InvalidInputError):
            SimConfig(horizon=1.0, dt=0.0)
        with pytest.raises(InvalidInputError):
            simulate_path(small_params, np.full(5, 0.2), SimConfig(horizon=1.0, top_m=9))
        with pytest.raises(InvalidInputError):
            simulate_path(small_params, np.full(5, 0.2), SimConfig(horizon=1.0, floor_eps=0.1))
