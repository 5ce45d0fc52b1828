from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffseg.diffusion import (
    ddim_step,
    ddpm_step,
    eps_to_x0,
    eps_x0_convert,
    posterior_mean,
    posterior_variance,
    probs_to_x0,
    q_sample,
    x0_to_eps,
)
from diffseg.schedule import linear_schedule, resample, uniform_indices

S = linear_schedule()
SUB = resample(S, uniform_indices(S.T, 5))


def bayes_posterior(x0, xt, t, s):
    """Posterior of x_{t-1} by multiplying the two Gaussian factors directly.

    prior  x_{t-1} | x0 ~ N(sqrt(bar_{t-1}) x0, 1 - bar_{t-1})
    lik    x_t | x_{t-1} ~ N(sqrt(alpha_t) x_{t-1}, beta_t)
    """
    prior_var = 1.0 - s.bar_alphas[t - 1]
    prec = 1.0 / prior_var + s.alphas[t] / s.betas[t]
    var = 1.0 / prec
    mean = var * (np.sqrt(s.bar_alphas[t - 1]) * x0 / prior_var + np.sqrt(s.alphas[t]) * xt / s.betas[t])
    return mean, var


class TestForward:
    def test_moments(self):
        rng = np.random.default_rng(0)
        x0 = np.array([1.0, -1.0, 0.5])
        t = 300
        draws = np.stack([q_sample(x0, t, rng.standard_normal(3), S) for _ in range(20000)])
        se = np.sqrt((1 - S.bar_alphas[t]) / 20000)
        assert np.all(np.abs(draws.mean(0) - np.sqrt(S.bar_alphas[t]) * x0) < 4 * se)
        np.testing.assert_allclose(draws.var(0), 1 - S.bar_alphas[t], rtol=0.05)

    def test_vector_t_matches_scalar(self):
        rng = np.random.default_rng(1)
        x0, eps = rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 2, 4))
        t = np.array([1, 500, 1001])
        batched = q_sample(x0, t, eps, S)
        for i in range(3):
            np.testing.assert_array_equal(batched[i], q_sample(x0[i], int(t[i]), eps[i], S))

    def test_t_zero_is_identity(self):
        x0 = np.array([0.3, -1.0])
        np.testing.assert_array_equal(q_sample(x0, 0, np.ones(2), S), x0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            q_sample(np.ones(3), 5, np.ones(4), S)

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            q_sample(np.ones(3), S.T + 1, np.ones(3), S)


class TestPosterior:
    @pytest.mark.parametrize("t", [2, 3, 100, 1001])
    def test_matches_bayes_product(self, t):
        rng = np.random.default_rng(t)
        x0, xt = rng.standard_normal(5), rng.standard_normal(5)
        mean, var = bayes_posterior(x0, xt, t, S)
        np.testing.assert_allclose(posterior_mean(x0, xt, t, S), mean, rtol=1e-9, atol=1e-12)
        assert posterior_variance(t, S) == pytest.approx(var, rel=1e-9)

    def test_resampled_schedule_posterior(self):
        rng = np.random.default_rng(3)
        x0, xt = rng.standard_normal(4), rng.standard_normal(4)
        for k in range(2, 6):
            mean, var = bayes_posterior(x0, xt, k, SUB)
            np.testing.assert_allclose(posterior_mean(x0, xt, k, SUB), mean, rtol=1e-9, atol=1e-12)
            assert posterior_variance(k, SUB) == pytest.approx(var, rel=1e-9)

    def test_first_step_returns_x0(self):
        x0, xt = np.array([0.2, -0.7]), np.array([5.0, 3.0])
        np.testing.assert_allclose(posterior_mean(x0, xt, 1, S), x0, atol=1e-15)
        assert posterior_variance(1, S) == 0.0

    def test_vector_t(self):
        rng = np.random.default_rng(4)
        x0, xt = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        t = np.array([5, 700])
        out = posterior_mean(x0, xt, t, S)
        for i in range(2):
            np.testing.assert_allclose(out[i], posterior_mean(x0[i], xt[i], int(t[i]), S))


class TestSamplers:
    def test_ddpm_noise_variance(self):
        # 10^4 draws of a 4-element state; the residual around the posterior
        # mean must have variance tilde_beta within 3 standard errors
        rng = np.random.default_rng(5)
        x0hat, xt = np.array([1.0, -1.0, 0.3, 0.0]), np.array([0.5, 0.1, -0.2, 2.0])
        for k in (2, 3, 5):
            mu = posterior_mean(x0hat, xt, k, SUB)
            res = np.stack([ddpm_step(xt, x0hat, k, SUB, rng) - mu for _ in range(10000)]).ravel()
            var = SUB.tilde_betas[k]
            se = var * np.sqrt(2.0 / (res.size - 1))
            assert abs(res.var(ddof=1) - var) < 3 * se
            assert abs(res.mean()) < 3 * np.sqrt(var / res.size)

    def test_ddpm_last_step_is_noiseless(self):
        rng = np.random.default_rng(6)
        state = rng.bit_generator.state
        x0hat, xt = np.array([0.4, -0.9]), np.array([1.0, 2.0])
        out = ddpm_step(xt, x0hat, 1, SUB, rng)
        np.testing.assert_array_equal(out, posterior_mean(x0hat, xt, 1, SUB))
        assert rng.bit_generator.state == state

    def test_ddim_is_deterministic_and_rng_free(self):
        x0hat, xt = np.array([0.4, -0.9, 0.0]), np.array([1.0, 2.0, -3.0])
        outs = {ddim_step(xt, x0hat, k, SUB).tobytes() for _ in range(3) for k in [4]}
        assert len(outs) == 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 1001), st.integers(0, 2**31 - 1))
    def test_ddim_with_exact_x0_walks_the_forward_marginal(self, t, seed):
        # with x0hat = x0 the implied noise is eps, so the DDIM step lands on q(x0, t-1, eps)
        rng = np.random.default_rng(seed)
        x0, eps = rng.choice([-1.0, 1.0], 6), rng.standard_normal(6)
        xt = q_sample(x0, t, eps, S)
        np.testing.assert_allclose(ddim_step(xt, x0, t, S), q_sample(x0, t - 1, eps, S), atol=1e-9)

    def test_ddpm_chain_with_oracle_prediction_ends_at_x0(self):
        rng = np.random.default_rng(7)
        x0 = rng.choice([-1.0, 1.0], 8)
        x = rng.standard_normal(8)
        for k in range(SUB.T, 0, -1):
            x = ddpm_step(x, x0, k, SUB, rng)
        np.testing.assert_allclose(x, x0, atol=1e-12)


class TestParameterisations:
    @pytest.mark.parametrize("t", [1, 10, 1001])
    def test_round_trip(self, t):
        rng = np.random.default_rng(t)
        x0, eps = rng.standard_normal(5), rng.standard_normal(5)
        xt = q_sample(x0, t, eps, S)
        np.testing.assert_allclose(x0_to_eps(xt, x0, t, S), eps, atol=1e-7)
        np.testing.assert_allclose(eps_to_x0(xt, eps, t, S), x0, atol=1e-7)
        np.testing.assert_array_equal(eps_x0_convert("x0_to_eps", xt, x0, t, S), x0_to_eps(xt, x0, t, S))

    def test_noise_undefined_at_zero(self):
        with pytest.raises(ZeroDivisionError):
            x0_to_eps(np.ones(2), np.ones(2), 0, S)

    def test_unknown_direction(self):
        with pytest.raises(ValueError):
            eps_x0_convert("sideways", np.ones(1), np.ones(1), 3, S)

    def test_probability_rescaling(self):
        np.testing.assert_array_equal(probs_to_x0(np.array([0.0, 0.5, 1.0])), [-1.0, 0.0, 1.0])
