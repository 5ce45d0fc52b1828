"""Forward noising and reverse denoising operators.

Steps are indices into a :class:`NoiseSchedule` (for a resampled schedule
that is the position ``k``, not the original timestep label). All operators
accept numpy arrays; they use plain arithmetic so tensors work as well.
"""

from __future__ import annotations

import numpy as np

from .schedule import NoiseSchedule


def _check_shapes(a, b, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def _gather(values: np.ndarray, t, like):
    """Scalar coefficient for an int step; ``[N, 1, ...]`` array for a batch of steps."""
    if np.ndim(t) == 0:
        return float(values[int(t)])
    dtype = like.dtype if hasattr(like, "dtype") else np.float64
    return values[np.asarray(t)].astype(dtype).reshape((-1,) + (1,) * (np.ndim(like) - 1))


def _check_steps(s: NoiseSchedule, t, allow_zero: bool = False) -> None:
    for step in np.atleast_1d(t):
        s.check_step(int(step), allow_zero=allow_zero)


def q_sample(x0, t, eps, s: NoiseSchedule):
    """Draw ``x_t ~ q(x_t | x_0)`` through the reparameterisation with noise ``eps``.

    ``t`` is an int or one step per leading-axis sample.
    """
    _check_shapes(x0, eps, "q_sample")
    _check_steps(s, t, allow_zero=True)
    return _gather(s.sqrt_bar_alphas, t, x0) * x0 + _gather(s.sqrt_one_minus_bar_alphas, t, x0) * eps


def posterior_coefficients(t: int, s: NoiseSchedule) -> tuple[float, float]:
    """Coefficients ``(c_x0, c_xt)`` of the posterior mean of ``q(x_{t-1} | x_t, x_0)``."""
    s.check_step(t)
    c_x0, c_xt = _posterior_tables(s)
    return float(c_x0[t]), float(c_xt[t])


def _posterior_tables(s: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    bar = s.bar_alphas
    c_x0 = np.zeros_like(bar)
    c_xt = np.zeros_like(bar)
    c_x0[1:] = np.sqrt(bar[:-1]) * s.betas[1:] / (1.0 - bar[1:])
    c_xt[1:] = (1.0 - bar[:-1]) * np.sqrt(s.alphas[1:]) / (1.0 - bar[1:])
    return c_x0, c_xt


def posterior_mean(x0hat, x_t, t, s: NoiseSchedule):
    _check_shapes(x0hat, x_t, "posterior_mean")
    _check_steps(s, t)
    c_x0, c_xt = _posterior_tables(s)
    return _gather(c_x0, t, x_t) * x0hat + _gather(c_xt, t, x_t) * x_t


def posterior_variance(t, s: NoiseSchedule, like=None):
    _check_steps(s, t)
    return _gather(s.tilde_betas, t, like if like is not None else np.zeros(1))


def ddpm_step(x_t: np.ndarray, x0hat: np.ndarray, t: int, s: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One ancestral step ``x_{t-1} = mu + sigma_t z``; noiseless at ``t = 1``."""
    mu = posterior_mean(x0hat, x_t, t, s)
    var = posterior_variance(t, s)
    if var == 0.0:
        return mu
    z = rng.standard_normal(np.shape(x_t)).astype(np.asarray(x_t).dtype, copy=False)
    return mu + float(np.sqrt(var)) * z


def ddim_step(x_t, x0hat, t: int, s: NoiseSchedule):
    """Deterministic implicit step; consumes no randomness.

    sigma is zero for ``t > 1`` and ``sqrt(tilde_beta_1)`` at ``t = 1``,
    which is zero whenever ``bar_alpha_0 = 1``.
    """
    _check_shapes(x_t, x0hat, "ddim_step")
    s.check_step(t)
    eps_hat = x0_to_eps(x_t, x0hat, t, s)
    sigma2 = float(s.tilde_betas[1]) if t == 1 else 0.0
    bar_prev = float(s.bar_alphas[t - 1])
    return np.sqrt(bar_prev) * x0hat + np.sqrt(max(1.0 - bar_prev - sigma2, 0.0)) * eps_hat


def x0_to_eps(x_t, x0, t: int, s: NoiseSchedule):
    """Noise implied by ``x_t`` and a clean estimate ``x0``."""
    s.check_step(t, allow_zero=True)
    denom = float(s.sqrt_one_minus_bar_alphas[t])
    if denom == 0.0:
        raise ZeroDivisionError("noise is undefined where bar_alpha = 1")
    return (x_t - float(s.sqrt_bar_alphas[t]) * x0) / denom


def eps_to_x0(x_t, eps, t: int, s: NoiseSchedule):
    """Clean estimate implied by ``x_t`` and a noise estimate ``eps``."""
    s.check_step(t, allow_zero=True)
    return (x_t - float(s.sqrt_one_minus_bar_alphas[t]) * eps) / float(s.sqrt_bar_alphas[t])


def eps_x0_convert(direction: str, x_t, known, t: int, s: NoiseSchedule):
    """``direction`` is ``"x0_to_eps"`` or ``"eps_to_x0"``."""
    if direction == "x0_to_eps":
        return x0_to_eps(x_t, known, t, s)
    if direction == "eps_to_x0":
        return eps_to_x0(x_t, known, t, s)
    raise ValueError(f"unknown direction {direction!r}")


def probs_to_x0(probs):
    """Map class probabilities in ``[0, 1]`` to the ``[-1, 1]`` mask range."""
    return 2.0 * probs - 1.0
