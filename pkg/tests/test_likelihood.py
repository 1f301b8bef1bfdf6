"""Tests for the probability-flow likelihood bound."""

import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from modules.data_loader import gaussian_entropy
from modules.kernel import GaussianDataScore, GaussianMixtureScore, PhaseState, drift_matrix, expm_scalar_kernel, marginal_moments, prior_logpdf
from modules.likelihood import (
    auxiliary_entropy,
    divergence,
    gaussian_bound_gap,
    log_density_via_ode,
    nats_to_bits_per_dim,
    nll_bound,
    rademacher,
    score_trace_estimate,
)
from modules.samplers import prob_flow_ode
from modules.scorenet import ZeroScore


def _marginal_logpdf(params, x, t):
    m = marginal_moments(params, np.array([0.5]), 0.04, t)
    return multivariate_normal(mean=m.mu[:, 0], cov=m.sigma).logpdf(x[:, :, 0])


class TestConversions:
    def test_bits_per_dim(self):
        assert nats_to_bits_per_dim(3 * math.log(2.0), 3) == pytest.approx(1.0)

    def test_auxiliary_entropy(self, params):
        assert auxiliary_entropy(params) == pytest.approx(gaussian_entropy(params.init_var))

    def test_rademacher_values(self, rng):
        v = rademacher(rng, (4, 100, 2))
        assert set(np.unique(v)) == {-1.0, 1.0}


class TestDivergence:
    def test_linear_score_trace_is_exact(self, params, rng):
        model = GaussianDataScore(params, 0.5, 0.04, d=2)
        x = rng.normal(size=(6, 3, 2))
        t = 0.4
        p_ss = np.linalg.inv(marginal_moments(params, np.array([0.5, 0.5]), 0.04, t).sigma)[2, 2]
        estimate = score_trace_estimate(model, x, t, rademacher(rng, (3, 6, 2)))
        np.testing.assert_allclose(estimate, -2 * p_ss, rtol=1e-12)

    def test_trace_estimate_is_unbiased_for_coupled_coordinates(self, params, rng):
        # responsibilities couple the two coordinates, so dS/ds has off-diagonal entries;
        # averaging v^T J v over every sign pattern leaves exactly tr(J)
        model = GaussianMixtureScore(params, np.array([0.5, 0.5]), np.array([[-0.5, 0.5], [0.5, -0.5]]), 0.03)
        x = rng.normal(size=(1, 3, 2)) * 0.2
        t, h = 0.8, 1e-6
        jac = np.empty((2, 2))
        for j in range(2):
            up, down = x.copy(), x.copy()
            up[0, 2, j] += h
            down[0, 2, j] -= h
            jac[:, j] = (model.score(up, t)[0] - model.score(down, t)[0]) / (2 * h)
        assert abs(jac[0, 1]) > 1e-3
        patterns = np.array(list(itertools.product([-1.0, 1.0], repeat=2)))[:, None, :]
        estimate = score_trace_estimate(model, x, t, patterns)
        assert estimate[0] == pytest.approx(np.trace(jac), rel=1e-5)
        singles = [score_trace_estimate(model, x, t, p[None])[0] for p in patterns]
        assert np.ptp(singles) > 1e-3

    def test_zero_score_divergence_is_constant(self, params, rng):
        x = rng.normal(size=(5, 3, 1))
        div = divergence(params, ZeroScore(1), x, 0.3, rademacher(rng, (2, 5, 1)))
        np.testing.assert_array_equal(div, -params.xi)


class TestLogDensity:
    def test_zero_score_matches_closed_form(self, params, rng):
        x0 = rng.normal(size=(4, 3, 1)) * 0.3
        probes = rademacher(rng, (2, 4, 1))
        logp = log_density_via_ode(params, ZeroScore(1), x0, probes, atol=1e-8, rtol=1e-8)
        span = params.T - params.t_min
        x_T = np.matmul(expm_scalar_kernel(drift_matrix(params), span), x0)
        expected = prior_logpdf(params, PhaseState.from_array(x_T)) - params.xi * span
        np.testing.assert_allclose(logp, expected, atol=1e-6)

    def test_exact_score_gives_pushforward_density(self, params, rng):
        # the flow carries the t_min marginal onto the T marginal, so the model
        # density differs from the true one only through the prior mismatch at T
        model = GaussianDataScore(params, 0.5, 0.04)
        x0 = np.zeros((4, 3, 1))
        x0[:, 0, 0] = 0.5 + 0.2 * rng.standard_normal(4)
        x0[:, 1:, 0] = math.sqrt(params.init_var) * rng.standard_normal((4, 2))
        probes = rademacher(rng, (1, 4, 1))
        logp = log_density_via_ode(params, model, x0, probes, atol=1e-8, rtol=1e-8)
        x_T = prob_flow_ode(params, model, x0, "encode", atol=1e-8, rtol=1e-8).state
        expected = (
            _marginal_logpdf(params, x0, params.t_min)
            + prior_logpdf(params, PhaseState.from_array(x_T))
            - _marginal_logpdf(params, x_T, params.T)
        )
        np.testing.assert_allclose(logp, expected, atol=1e-4)

    def test_tolerance_floor(self, params):
        with pytest.raises(ValueError):
            log_density_via_ode(params, ZeroScore(1), np.zeros((1, 3, 1)), np.ones((1, 1, 1)), atol=1e-9)


class TestNllBound:
    def test_thread_count_does_not_change_bound(self, params, rng):
        q0 = rng.normal(size=(100, 1)) * 0.2
        one = nll_bound(params, ZeroScore(1), q0, n_aux=2, n_hutch=1, seed=3, threads=1)
        two = nll_bound(params, ZeroScore(1), q0, n_aux=2, n_hutch=1, seed=3, threads=2)
        assert one == two
        assert one.n_points == 100
        assert one.std_error > 0

    def test_report_fields(self, params):
        estimate = nll_bound(params, ZeroScore(1), np.array([0.1, -0.2]), n_aux=2, n_hutch=1)
        entry = estimate.to_dict()
        assert entry["n_aux_draws"] == 2
        assert entry["bound_bits_per_dim"] == pytest.approx(entry["bound_nats"] / math.log(2.0))

    def test_rejects_empty_batch(self, params):
        with pytest.raises(ValueError):
            nll_bound(params, ZeroScore(1), np.zeros((0, 1)))

    @pytest.mark.slow
    def test_exact_score_bound_matches_entropy_plus_gap(self, mixed_params):
        rng = np.random.default_rng(0)
        q0 = 0.5 + 0.2 * rng.standard_normal((64, 1))
        estimate = nll_bound(mixed_params, GaussianDataScore(mixed_params, 0.5, 0.04), q0, n_aux=4, n_hutch=1)
        expected = gaussian_entropy(0.04) + gaussian_bound_gap(mixed_params, 0.5, 0.04)
        assert abs(estimate.bound_nats - expected) <= 3 * estimate.std_error + 1e-3


class TestBoundGap:
    def test_gap_falls_as_alpha_grows(self, params):
        gaps = [gaussian_bound_gap(replace(params, alpha=a), 0.5, 0.04) for a in (0.01, 0.02, 0.04, 0.08, 0.16)]
        assert all(g > 0 for g in gaps)
        assert all(later < earlier for earlier, later in zip(gaps, gaps[1:]))

    def test_gap_grows_with_t_min(self, params):
        short = gaussian_bound_gap(replace(params, t_min=1e-5), 0.5, 0.04)
        longer = gaussian_bound_gap(replace(params, t_min=1e-3), 0.5, 0.04)
        assert longer > short

    def test_gap_is_s_variance_growth(self, params):
        # over t_min the s-variance grows by delta = 2 xi (1 - alpha) t_min / alpha; KL ~ delta^2 / 4
        delta = 2 * params.xi * (1 - params.alpha) * params.t_min / params.alpha
        assert gaussian_bound_gap(params, 0.5, 0.04) == pytest.approx(delta ** 2 / 4, rel=0.02)

    def test_gap_scales_with_dimension(self, params):
        one = gaussian_bound_gap(params, 0.5, 0.04, d=1)
        assert gaussian_bound_gap(params, 0.5, 0.04, d=2) == pytest.approx(2 * one, rel=1e-9)
