"""Tests for the time grid, the split and Euler-Maruyama samplers and the probability-flow ODE."""

import math

import numpy as np
import pytest
import scipy.linalg
from scipy.stats import norm

from modules.errors import SamplerDivergence
from modules.hold_config import GridSpec
from modules.kernel import GaussianDataScore, drift_matrix, expm_scalar_kernel, marginal_moments
from modules.parallel import stream
from modules.samplers import (
    AStepTable,
    LT_EVOLVE_FRACTIONS,
    TimeGrid,
    b_step,
    em_reverse,
    em_step,
    evolve_fractions,
    fraction_times,
    generate,
    lt_sample,
    lt_step,
    ode_sample,
    prob_flow_ode,
)
from modules.scorenet import ZeroScore


class InfScore:
    d = 1

    def score(self, x, t):
        return np.full((x.shape[0], 1), np.inf)

    def score_vjp(self, x, t, v):
        return np.zeros(x.shape)


def _mean_error(params, n_steps, sampler):
    """Noise-free chain started at the exact marginal mean; distance to the mean at t_min."""
    model = GaussianDataScore(params, 0.5, 0.04)
    start = marginal_moments(params, np.array([0.5]), 0.04, params.T).mu[None]
    target = marginal_moments(params, np.array([0.5]), 0.04, params.t_min).mu
    grid = TimeGrid(n_steps, "quadratic", params.t_min, params.T)
    if sampler == "lt":
        result = lt_sample(params, model, grid, 1, rule="heun", x_init=start, stochastic=False)
    else:
        result = em_reverse(params, model, grid, 1, x_init=start, stochastic=False)
    return float(np.max(np.abs(result.state[0] - target)))


def _exact_score_samples(params, sampler, n_steps, n, seed):
    """q-samples drawn with the exact score of N(0.5, 0.04) data."""
    model = GaussianDataScore(params, 0.5, 0.04)
    grid = TimeGrid(n_steps, "quadratic", params.t_min, params.T)
    if sampler == "lt":
        return lt_sample(params, model, grid, n, seed=seed, rule="heun").samples[:, 0]
    if sampler == "em":
        return em_reverse(params, model, grid, n, seed=seed).samples[:, 0]
    return ode_sample(params, model, n, seed=seed).samples[:, 0]


def _w1_to_gaussian(q):
    """W1 between the empirical law of q and N(0.5, 0.04), against exact quantiles."""
    levels = (np.arange(q.size) + 0.5) / q.size
    return float(np.mean(np.abs(np.sort(q) - norm.ppf(levels, loc=0.5, scale=0.2))))


class TestTimeGrid:
    def test_quadratic_formula(self):
        grid = TimeGrid(4, "quadratic", 1e-5, 1.0)
        frac = np.arange(5) / 4
        expected = 1e-5 + (1.0 - 1e-5) * (1 - frac) ** 2
        np.testing.assert_allclose(grid.times(), expected, rtol=1e-15)
        assert grid.times()[0] == 1.0
        assert grid.times()[-1] == 1e-5

    def test_uniform_is_decreasing(self):
        times = TimeGrid(10, "uniform", 1e-3, 1.0).times()
        assert np.all(np.diff(times) < 0)
        np.testing.assert_allclose(np.diff(times), -(1.0 - 1e-3) / 10)

    def test_zero_steps(self):
        np.testing.assert_array_equal(TimeGrid(0).times(), [1.0])

    def test_nearest_indices(self):
        grid = TimeGrid(10, "uniform", 0.0 + 1e-5, 1.0)
        assert grid.nearest_indices([1.0, 0.5, 1e-5]) == [0, 5, 10]

    def test_from_spec(self, params):
        grid = TimeGrid.from_spec(params, GridSpec(n_steps=150), n_steps=50)
        assert grid.n_steps == 50 and grid.t_min == params.t_min

    def test_evolve_fractions(self, params):
        assert evolve_fractions("lt", 8) == LT_EVOLVE_FRACTIONS
        assert len(evolve_fractions("ode", 5)) == 5
        times = fraction_times(params, (0.0, 1.0))
        assert times[0] == params.T
        assert times[1] == pytest.approx(params.t_min)


class TestAStep:
    def test_mean_tends_to_identity(self, params):
        table = AStepTable(params)
        np.testing.assert_allclose(table.get(1e-10).mean, np.eye(3), atol=1e-9)

    def test_mean_only_below_threshold(self, params):
        step = AStepTable(params).get(1e-20)
        assert not step.factor.any()

    def test_covariance_matches_van_loan(self, params):
        h = 0.05
        step = AStepTable(params).get(h)
        M = drift_matrix(params, "split")
        Q = np.diag([0.0, 0.0, params.noise_rate])
        block = np.zeros((6, 6))
        block[:3, :3] = -M
        block[:3, 3:] = Q
        block[3:, 3:] = M.T
        e = scipy.linalg.expm(h * block)
        expected = e[3:, 3:].T @ e[:3, 3:]
        np.testing.assert_allclose(step.cov, expected, atol=1e-12)
        np.testing.assert_allclose(step.factor @ step.factor.T, step.cov, atol=1e-13)

    def test_cache(self, params):
        table = AStepTable(params)
        table.get(0.01)
        table.get(0.01)
        table.get(0.02)
        assert len(table) == 2


class TestSteps:
    def test_lt_step_is_continuous_in_dt(self, params, rng):
        x = rng.normal(size=(4, 3, 1))
        out, nfe = lt_step(params, ZeroScore(1), x, 0.5, 1e-9)
        np.testing.assert_allclose(out, x, atol=1e-7)
        assert nfe == 1

    @pytest.mark.parametrize("dt", [1e-3, 1e-4])
    def test_lt_step_first_order_in_dt(self, params, rng, dt):
        x = rng.uniform(-1.0, 1.0, size=(4, 3, 1))
        out, _ = lt_step(params, ZeroScore(1), x, 0.5, dt)
        tangent = np.matmul(drift_matrix(params, "split"), x)
        tangent[:, 2, :] += 2.0 * params.xi * x[:, 2, :]
        np.testing.assert_allclose((out - x) / dt, tangent, atol=150 * dt)

    def test_lt_step_golden_value(self, params):
        # exp(ln2 M) = [[13,-7,g],[7,3,-g],[g,g,-2]] / 16 for the split drift; with zero
        # score the B-step scales s by c = 1 + 24 ln2
        c = 1.0 + 24.0 * math.log(2.0)
        g = math.sqrt(10.0)
        x = np.array([[[1.0], [0.0], [0.0]]])
        out, _ = lt_step(params, ZeroScore(1), x, 1.5, 2.0 * math.log(2.0))
        expected = np.array([120.0 + 10.0 * c, 112.0 - 10.0 * c, g * (20.0 - 2.0 * c)]) / 256.0
        np.testing.assert_allclose(out[0, :, 0], expected, rtol=1e-12)
        np.testing.assert_allclose(out[0, :, 0], [1.15763798, -0.25138798, -0.18863807], atol=1e-7)

    def test_lt_step_rejects_bad_dt(self, params):
        with pytest.raises(ValueError):
            lt_step(params, ZeroScore(1), np.zeros((1, 3, 1)), 0.5, 0.0)
        with pytest.raises(ValueError):
            lt_step(params, ZeroScore(1), np.zeros((1, 3, 1)), 0.5, 0.6)

    def test_heun_costs_two_evaluations(self, params, rng):
        _, nfe = b_step(params, ZeroScore(1), rng.normal(size=(2, 3, 1)), 0.5, 0.01, "heun")
        assert nfe == 2
        with pytest.raises(ValueError):
            b_step(params, ZeroScore(1), rng.normal(size=(2, 3, 1)), 0.5, 0.01, "rk4")

    def test_em_step_noise_free_is_linear_drift(self, params, rng):
        x = rng.normal(size=(3, 3, 2))
        out = em_step(params, ZeroScore(2), x, 0.5, 0.01)
        np.testing.assert_allclose(out, x - 0.01 * np.matmul(drift_matrix(params), x), atol=1e-15)


class TestChainDrivers:
    def test_zero_steps_returns_prior(self, params):
        result = em_reverse(params, ZeroScore(1), TimeGrid(0), 100, seed=4)
        expected = stream(4, 0).standard_normal((100, 3, 1)) * math.sqrt(params.prior_var)
        np.testing.assert_array_equal(result.state, expected)
        assert result.nfe == 0

    def test_thread_count_does_not_change_samples(self, params):
        grid = TimeGrid(10, "quadratic", params.t_min, params.T)
        one = lt_sample(params, ZeroScore(1), grid, 5000, seed=2, threads=1)
        three = lt_sample(params, ZeroScore(1), grid, 5000, seed=2, threads=3)
        np.testing.assert_array_equal(one.state, three.state)
        assert one.nfe == three.nfe == 10

    def test_snapshots(self, params):
        grid = TimeGrid(20, "uniform", params.t_min, params.T)
        result = em_reverse(params, ZeroScore(1), grid, 50, snapshot_times=[params.T, 0.5, params.t_min])
        assert len(result.snapshots) == 3
        np.testing.assert_array_equal(result.snapshots[-1].state, result.state)
        assert result.snapshots[0].t == params.T

    def test_divergence_reports_step(self, params):
        grid = TimeGrid(5, "uniform", params.t_min, params.T)
        with pytest.raises(SamplerDivergence) as info:
            em_reverse(params, InfScore(), grid, 10)
        assert info.value.step == 0

    def test_generate_dispatch(self, params):
        result = generate(params, ZeroScore(1), GridSpec(n_steps=5, sampler="em"), 20)
        assert result.sampler == "em" and result.samples.shape == (20, 1)
        with pytest.raises(ValueError):
            generate(params, ZeroScore(1), GridSpec(n_steps=5), 20, sampler="leapfrog")

    def test_split_step_is_second_order(self, params):
        lt_ratio = _mean_error(params, 1000, "lt") / _mean_error(params, 2000, "lt")
        em_ratio = _mean_error(params, 1000, "em") / _mean_error(params, 2000, "em")
        assert lt_ratio >= 3.5
        assert 1.7 <= em_ratio <= 2.3
        assert _mean_error(params, 2000, "lt") < _mean_error(params, 2000, "em")

    @pytest.mark.slow
    @pytest.mark.parametrize("sampler", ["lt", "em", "ode"])
    def test_exact_score_recovers_gaussian_data(self, mixed_params, sampler):
        n = 10_000
        q = _exact_score_samples(mixed_params, sampler, 1000, n, seed=0)
        assert abs(q.mean() - 0.5) <= 3 * math.sqrt(0.04 / n)
        assert q.var() == pytest.approx(0.04, rel=0.05)

    @pytest.mark.slow
    @pytest.mark.parametrize("sampler", ["lt", "em"])
    def test_distance_to_data_falls_with_steps(self, mixed_params, sampler):
        # mean over 3 seeds; consecutive step counts may tie within twice the seed-to-seed error
        means, errors = [], []
        for n_steps in (50, 150, 500, 1000):
            dist = [_w1_to_gaussian(_exact_score_samples(mixed_params, sampler, n_steps, 10_000, seed)) for seed in range(3)]
            means.append(np.mean(dist))
            errors.append(np.std(dist, ddof=1) / math.sqrt(3))
        for k in range(3):
            assert means[k + 1] <= means[k] + 2 * math.hypot(errors[k], errors[k + 1])
        assert means[-1] < means[0]


class TestProbabilityFlow:
    def test_zero_score_encode_matches_exponential(self, params, rng):
        x = rng.normal(size=(3, 3, 1))
        res = prob_flow_ode(params, ZeroScore(1), x, "encode", atol=1e-8, rtol=1e-8)
        exact = np.matmul(expm_scalar_kernel(drift_matrix(params), params.T - params.t_min), x)
        np.testing.assert_allclose(res.state, exact, atol=1e-6)

    def test_zero_score_generate_matches_exponential(self, params, rng):
        x = rng.normal(size=(3, 3, 1))
        res = prob_flow_ode(params, ZeroScore(1), x, "generate", atol=1e-8, rtol=1e-8)
        exact = np.matmul(expm_scalar_kernel(drift_matrix(params, "reverse"), params.T - params.t_min), x)
        np.testing.assert_allclose(res.state, exact, atol=1e-6 * max(1.0, np.abs(exact).max()))

    def test_encode_generate_round_trip(self, params, rng):
        model = GaussianDataScore(params, 0.5, 0.04)
        x0 = np.zeros((5, 3, 1))
        x0[:, 0, 0] = 0.5 + 0.2 * rng.standard_normal(5)
        x0[:, 1:, 0] = math.sqrt(params.init_var) * rng.standard_normal((5, 2))
        encoded = prob_flow_ode(params, model, x0, "encode", atol=1e-8, rtol=1e-8)
        decoded = prob_flow_ode(params, model, encoded.state, "generate", atol=1e-8, rtol=1e-8)
        np.testing.assert_allclose(decoded.state, x0, atol=1e-5)

    def test_trajectory_ends_at_endpoint(self, params, rng):
        x = rng.normal(size=(2, 3, 1))
        res = prob_flow_ode(params, ZeroScore(1), x, "generate", t_eval=[0.5, 0.9])
        np.testing.assert_allclose(res.t_eval, [0.9, 0.5, params.t_min])
        np.testing.assert_array_equal(res.trajectory[-1], res.state)

    def test_invalid_arguments(self, params):
        with pytest.raises(ValueError):
            prob_flow_ode(params, ZeroScore(1), np.zeros((1, 3, 1)), "sideways")
        with pytest.raises(ValueError):
            prob_flow_ode(params, ZeroScore(1), np.zeros((1, 3, 1)), atol=1e-10)

    def test_ode_sample_snapshots(self, params):
        result = ode_sample(params, ZeroScore(1), 10, seed=1, snapshot_times=[params.T, 0.5])
        assert result.sampler == "ode"
        assert result.nfe > 0
        assert len(result.snapshots) == 2
        assert result.snapshots[0].state.shape == (10, 3, 1)
