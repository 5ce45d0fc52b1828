"""Variance schedules, sub-schedule resampling and timestep importance sampling."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Schedule arrays indexed by step ``0..T``.

    Index 0 holds the clean-data convention ``bar_alpha[0] = 1`` (so
    ``beta[0] = 0`` and ``tilde_beta[0] = 0`` are placeholders). ``labels``
    maps each index to the timestep of the full schedule it came from, which
    is what the network's time embedding sees.
    """

    betas: np.ndarray
    labels: np.ndarray
    alphas: np.ndarray = field(init=False)
    bar_alphas: np.ndarray = field(init=False)
    tilde_betas: np.ndarray = field(init=False)
    sqrt_bar_alphas: np.ndarray = field(init=False)
    sqrt_one_minus_bar_alphas: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alphas = 1.0 - betas
        bar = np.cumprod(alphas)
        bar[0] = 1.0
        tilde = np.zeros_like(betas)
        tilde[1:] = (1.0 - bar[:-1]) / (1.0 - bar[1:]) * betas[1:]
        for name, value in [
            ("betas", betas),
            ("alphas", alphas),
            ("bar_alphas", bar),
            ("tilde_betas", tilde),
            ("sqrt_bar_alphas", np.sqrt(bar)),
            ("sqrt_one_minus_bar_alphas", np.sqrt(1.0 - bar)),
            ("labels", np.asarray(self.labels, dtype=np.int64)),
        ]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def check_step(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    def sigmas(self) -> np.ndarray:
        return np.sqrt(self.tilde_betas)


def linear_schedule(T: int = 1001, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    betas = np.empty(T + 1)
    betas[0] = 0.0
    betas[1:] = beta_min + (np.arange(T) / (T - 1)) * (beta_max - beta_min)
    betas[T] = beta_max
    return NoiseSchedule(betas=betas, labels=np.arange(T + 1))


def uniform_indices(T: int, K: int) -> np.ndarray:
    """``K`` evenly spread steps from 1 to ``T`` inclusive."""
    if not 1 <= K <= T:
        raise ValueError(f"K must lie in [1, {T}]")
    if K == 1:
        return np.array([T])
    return np.round(np.linspace(1, T, K)).astype(np.int64)


def resample(s: NoiseSchedule, indices) -> NoiseSchedule:
    """Sub-schedule whose cumulative products match ``s`` at ``indices``.

    ``indices`` are positions in ``s`` (strictly increasing, within
    ``[1, s.T]``). Labels are inherited so nested resampling keeps the
    original timesteps.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or len(idx) == 0:
        raise ValueError("indices must be a non-empty 1-d sequence")
    if np.any(np.diff(idx) <= 0):
        raise ValueError("indices must be strictly increasing")
    if idx[0] < 1 or idx[-1] > s.T:
        raise ValueError(f"indices must lie in [1, {s.T}]")
    full = np.concatenate([[0], idx])
    bar = s.bar_alphas[full]
    betas = np.zeros(len(full))
    betas[1:] = 1.0 - bar[1:] / bar[:-1]
    sub = NoiseSchedule(betas=betas, labels=s.labels[full])
    # cumprod of the recomputed alphas can drift by an ulp; pin to the parent
    # values so the sub-schedule agrees exactly
    object.__setattr__(sub, "bar_alphas", _frozen(bar.copy()))
    object.__setattr__(sub, "sqrt_bar_alphas", _frozen(np.sqrt(bar)))
    object.__setattr__(sub, "sqrt_one_minus_bar_alphas", _frozen(np.sqrt(1.0 - bar)))
    tilde = np.zeros_like(betas)
    tilde[1:] = (1.0 - bar[:-1]) / (1.0 - bar[1:]) * betas[1:]
    object.__setattr__(sub, "tilde_betas", _frozen(tilde))
    return sub


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def snr(s: NoiseSchedule, t: int) -> float:
    """Signal-to-noise ratio ``bar_alpha / (1 - bar_alpha)``; infinite at ``t = 0``."""
    s.check_step(t, allow_zero=True)
    bar = s.bar_alphas[t]
    if bar == 1.0:
        return float("inf")
    return float(bar / (1.0 - bar))


def x0_loss_weight(s: NoiseSchedule, t: int) -> float:
    """Weight of ``||x0_hat - x0||^2`` in the step-``t`` KL term with ``sigma^2 = tilde_beta``."""
    s.check_step(t)
    if t < 2:
        raise ValueError("weight is undefined at t = 1 (infinite SNR at t = 0)")
    bar_prev, bar, beta = s.bar_alphas[t - 1], s.bar_alphas[t], s.betas[t]
    return float(bar_prev * beta**2 / (2.0 * s.tilde_betas[t] * (1.0 - bar) ** 2))


def eps_loss_weight(s: NoiseSchedule, t: int) -> float:
    """Weight of ``||eps_hat - eps||^2`` in the step-``t`` KL term with ``sigma^2 = tilde_beta``."""
    s.check_step(t)
    if t < 2:
        raise ValueError("weight is undefined at t = 1 (infinite SNR at t = 0)")
    return float(s.betas[t] ** 2 / (2.0 * s.tilde_betas[t] * s.alphas[t] * (1.0 - s.bar_alphas[t])))


def dump_csv(s: NoiseSchedule, fh) -> None:
    """Write the per-step schedule table (rows for ``t = 1..T``)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "beta", "alpha", "bar_alpha", "tilde_beta", "sqrt_bar_alpha", "snr"])
    for i in range(1, s.T + 1):
        w.writerow(
            [
                int(s.labels[i]),
                repr(float(s.betas[i])),
                repr(float(s.alphas[i])),
                repr(float(s.bar_alphas[i])),
                repr(float(s.tilde_betas[i])),
                repr(float(s.sqrt_bar_alphas[i])),
                repr(snr(s, i)),
            ]
        )


class ImportanceState:
    """Loss-proportional timestep sampler over equal-width buckets.

    Sampling is uniform over ``[1, T]`` until every bucket holds ``history``
    losses; afterwards a bucket is chosen with probability proportional to
    its mean recorded loss and a step is drawn uniformly inside it.
    """

    def __init__(self, T: int, buckets: int = 100, history: int = 10):
        if buckets < 1 or buckets > T:
            raise ValueError("bucket count must lie in [1, T]")
        self.T = T
        self.buckets = buckets
        self.history = history
        self.edges = np.round(np.linspace(1, T + 1, buckets + 1)).astype(np.int64)
        self._losses = [deque(maxlen=history) for _ in range(buckets)]

    def bucket_of(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return int(np.searchsorted(self.edges, t, side="right") - 1)

    def losses(self, bucket: int) -> list[float]:
        return list(self._losses[bucket])

    def bucket_mean(self, bucket: int) -> float:
        return float(np.mean(self._losses[bucket]))

    @property
    def warm(self) -> bool:
        return all(len(q) == self.history for q in self._losses)

    def weights(self) -> np.ndarray:
        """Bucket probabilities (proportional to bucket width while cold)."""
        if not self.warm:
            width = np.diff(self.edges).astype(np.float64)
            return width / width.sum()
        w = np.array([np.mean(q) for q in self._losses], dtype=np.float64)
        total = w.sum()
        if total <= 0:
            return np.full(self.buckets, 1.0 / self.buckets)
        return w / total

    def record_loss(self, t: int, loss: float) -> None:
        if not np.isfinite(loss) or loss < 0:
            raise ValueError(f"loss must be finite and non-negative, got {loss}")
        self._losses[self.bucket_of(t)].append(float(loss))

    def sample_timestep(self, rng: np.random.Generator, t_max: int | None = None, size: int | None = None):
        """Draw step(s) in ``[1, t_max]`` (``t_max`` defaults to ``T``)."""
        t_max = self.T if t_max is None else t_max
        if not 1 <= t_max <= self.T:
            raise ValueError(f"t_max must lie in [1, {self.T}]")
        n = 1 if size is None else size
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            out[i] = self._draw(rng, t_max)
        return int(out[0]) if size is None else out

    def _draw(self, rng: np.random.Generator, t_max: int) -> int:
        if not self.warm:
            return int(rng.integers(1, t_max + 1))
        p = self.weights()
        while True:
            b = rng.choice(self.buckets, p=p)
            t = int(rng.integers(self.edges[b], self.edges[b + 1]))
            if t <= t_max:
                return t
