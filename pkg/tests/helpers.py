"""Shared test utilities: finite-difference gradients and tiny configs."""

from __future__ import annotations

import numpy as np

from diffseg import tensor as tn
from diffseg.model import UNetConfig


def numeric_grad(f, arrays: list[np.ndarray], index: int, h: float = 1e-6) -> np.ndarray:
    """Central finite difference of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [a.copy() for a in arrays]
    x = base[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f(*base)
        x[i] = orig - h
        down = f(*base)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error relative to the max-norm of the reference gradient."""
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(op, *arrays, seed: int = 0, h: float = 1e-6) -> float:
    """Worst relative error of ``op``'s gradients over all inputs (64-bit).

    The output is contracted with a fixed random weight so every output
    element contributes to the scalar being differentiated.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe = op(*[tn.Tensor(a, dtype=np.float64) for a in arrays])
    w = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*xs):
        with tn.no_grad():
            return float((op(*[tn.Tensor(x, dtype=np.float64) for x in xs]).data * w).sum())

    leaves = [tn.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = op(*leaves)
    loss = tn.sum_(out * w)
    grads = tn.backward(loss, wrt=leaves)
    return max(relative_error(grads[leaf], numeric_grad(scalar, arrays, i, h)) for i, leaf in enumerate(leaves))


def tiny_config(**kw) -> UNetConfig:
    base = dict(widths=(4, 8), spatial=(16, 16), time_embed_dim=8, classes=3)
    base.update(kw)
    return UNetConfig(**base)


def micro_config(**kw) -> UNetConfig:
    """Smallest useful model, for tests that need thousands of steps."""
    base = dict(widths=(2, 2), spatial=(8, 8), time_embed_dim=4, classes=2, with_transformer=False)
    base.update(kw)
    return UNetConfig(**base)


def unet_gradient_error(seed: int = 11) -> float:
    """Worst relative error of the tiny U-net loss gradient over every parameter entry.

    Uses 64-bit central differences on an 8x8 self-conditioned model with a
    random output head (a zero head would hide most of the network).
    """
    from diffseg.model import forward, init
    from diffseg.train import seg_loss

    cfg = tiny_config(spatial=(8, 8), with_self_cond_input=True)
    params = init(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for k in ("out.w", "out.b"):
        params[k] = tn.Tensor(rng.standard_normal(params[k].shape) * 0.5, requires_grad=True, dtype=np.float64)
    image = rng.standard_normal((2, 1, 8, 8))
    x_t = rng.standard_normal((2, cfg.classes, 8, 8))
    sc = rng.standard_normal(x_t.shape)
    t = rng.integers(1, 1002, 2)
    labels = rng.integers(0, cfg.classes, (2, 8, 8))
    names = list(params)

    def loss_of(*arrays):
        ps = {k: tn.Tensor(a, dtype=np.float64) for k, a in zip(names, arrays)}
        with tn.no_grad():
            return float(seg_loss(forward(ps, cfg, image, t, x_t, sc), labels).data)

    loss = seg_loss(forward(params, cfg, image, t, x_t, sc), labels)
    grads = tn.backward(loss, wrt=list(params.values()))
    arrays = [params[k].data.copy() for k in names]
    return max(relative_error(grads[params[k]], numeric_grad(loss_of, arrays, i)) for i, k in enumerate(names))
