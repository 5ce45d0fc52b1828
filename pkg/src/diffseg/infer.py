"""Reverse-process sampling, per-step traces, patch tiling and ensembles."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .diffusion import ddim_step, ddpm_step, probs_to_x0
from .metrics import hausdorff95, mean_foreground_dice
from .model import UNetConfig, forward
from .schedule import NoiseSchedule, resample, uniform_indices

SAMPLERS = ("ddpm", "ddim")


@dataclass
class StepRecord:
    k: int
    t: int
    probs: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N, H, W]
    dice: np.ndarray | None = None  # [N]
    hd95: np.ndarray | None = None  # [N]


@dataclass
class StepTrace:
    """One record per sampling step, ordered from ``t_K`` down to ``t_1``."""

    steps: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def final(self) -> StepRecord:
        return self.steps[-1]

    def mean_dice(self) -> np.ndarray:
        return np.array([r.dice.mean() for r in self.steps])

    def mean_hd95(self) -> np.ndarray:
        return np.array([r.hd95.mean() for r in self.steps])


def predict_probs(params, cfg: UNetConfig, image, t=None, x=None, self_cond=None) -> np.ndarray:
    """Softmax class probabilities of one forward pass (no graph)."""
    with tn.no_grad():
        logits = forward(params, cfg, image, t, x, self_cond)
        return tn.softmax(logits, axis=1).data


def score(labels: np.ndarray, reference: np.ndarray, classes: int, spacing=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample mean foreground Dice and mean foreground HD95."""
    dice = np.array([mean_foreground_dice(p, r, classes) for p, r in zip(labels, reference)])
    hd = np.array([np.mean([hausdorff95(p, r, c, spacing)[0] for c in range(1, classes)]) for p, r in zip(labels, reference)])
    return dice, hd


def sample(
    params,
    cfg: UNetConfig,
    image: np.ndarray,
    sampler: str = "ddpm",
    K: int = 5,
    s: NoiseSchedule | None = None,
    seed: int = 0,
    reference: np.ndarray | None = None,
    self_cond: bool = False,
    hook: Callable[[int, int, np.ndarray, np.ndarray | None], None] | None = None,
) -> StepTrace:
    """Run the K-step reverse process from ``x ~ N(0, I)``.

    ``s`` is the full training schedule; it is resampled uniformly to ``K``
    steps. ``hook(k, t_k, x, self_cond_input)`` sees every network input.
    """
    from .schedule import linear_schedule

    if sampler not in SAMPLERS:
        raise ValueError(f"sampler must be one of {SAMPLERS}, got {sampler!r}")
    if K < 1:
        raise ValueError("K must be at least 1")
    if not cfg.diffusion:
        raise ValueError("sampling needs a diffusion-mode model")
    if self_cond and not cfg.with_self_cond_input:
        raise ValueError("model has no self-conditioning input")
    s = s or linear_schedule()
    sub = resample(s, uniform_indices(s.T, K))
    image = np.asarray(image, dtype=params["out.w"].dtype)
    if image.ndim == 3:
        image = image[None]
    n, _, h, w = image.shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cfg.classes, h, w)).astype(image.dtype)
    prev = np.zeros_like(x) if self_cond else None
    trace = StepTrace()
    for k in range(K, 0, -1):
        t_label = int(sub.labels[k])
        if hook is not None:
            hook(k, t_label, x, prev)
        probs = predict_probs(params, cfg, image, np.full(n, t_label), x, prev)
        labels = probs.argmax(axis=1)
        rec = StepRecord(k=k, t=t_label, probs=probs, labels=labels)
        if reference is not None:
            rec.dice, rec.hd95 = score(labels, np.asarray(reference).reshape(labels.shape), cfg.classes)
        trace.steps.append(rec)
        x0hat = probs_to_x0(probs).astype(x.dtype)
        if sampler == "ddpm":
            x = ddpm_step(x, x0hat, k, sub, rng).astype(x.dtype)
        else:
            x = ddim_step(x, x0hat, k, sub).astype(x.dtype)
        if self_cond:
            prev = x0hat
    return trace


def self_cond_sample(params, cfg: UNetConfig, image, sampler="ddpm", K=5, s=None, seed=0, reference=None, hook=None) -> StepTrace:
    """Sampling that feeds each step's x̂₀ back as the extra input."""
    if not cfg.with_self_cond_input:
        raise ValueError("model has no self-conditioning input")
    return sample(params, cfg, image, sampler, K, s, seed, reference, self_cond=True, hook=hook)


def predict(params, cfg: UNetConfig, image, sampler="ddpm", K=5, s=None, seed=0, reference=None) -> StepTrace:
    """Dispatch on model mode: sampling for diffusion, one pass otherwise.

    The non-diffusion model yields a single-entry trace regardless of the
    sampler settings.
    """
    if cfg.diffusion:
        return sample(params, cfg, image, sampler, K, s, seed, reference, self_cond=cfg.with_self_cond_input)
    image = np.asarray(image, dtype=params["out.w"].dtype)
    probs = predict_probs(params, cfg, image)
    rec = StepRecord(k=1, t=0, probs=probs, labels=probs.argmax(axis=1))
    if reference is not None:
        rec.dice, rec.hd95 = score(rec.labels, np.asarray(reference).reshape(rec.labels.shape), cfg.classes)
    return StepTrace([rec])


def validation_dice(params, cfg: UNetConfig, tasks, s: NoiseSchedule, train_cfg, seed: int = 12345) -> float:
    """Mean foreground Dice of the final prediction on ``tasks``."""
    images = np.stack([t.image for t in tasks])
    labels = np.stack([t.labels for t in tasks])
    trace = predict(params, cfg, images, train_cfg.val_sampler, train_cfg.val_steps, s, seed)
    return float(np.mean([mean_foreground_dice(p, r, cfg.classes) for p, r in zip(trace.final.labels, labels)]))


# ----------------------------------------------------------------- patching


def _starts(extent: int, patch: int, overlap: int) -> list[int]:
    if patch > extent:
        raise ValueError(f"patch {patch} exceeds extent {extent}")
    if not 0 <= overlap < patch:
        raise ValueError("overlap must lie in [0, patch)")
    stride = patch - overlap
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] + patch < extent:
        starts.append(extent - patch)  # flush against the far edge
    return starts


def patch_positions(shape: Sequence[int], patch_size: Sequence[int], overlap: Sequence[int]) -> list[tuple[int, ...]]:
    if not (len(shape) == len(patch_size) == len(overlap)):
        raise ValueError("shape, patch_size and overlap need one entry per spatial axis")
    per_axis = [_starts(e, p, o) for e, p, o in zip(shape, patch_size, overlap)]
    return list(itertools.product(*per_axis))


def patch_infer(predict_fn, image: np.ndarray, patch_size, overlap, order: Sequence[int] | None = None) -> np.ndarray:
    """Tile ``image[C, *spatial]`` and average overlapping patch predictions.

    ``predict_fn`` maps a patch ``[C, *patch]`` to ``[K, *patch]``. ``order``
    optionally permutes the patch enumeration (the result does not depend on it).
    """
    image = np.asarray(image)
    spatial = image.shape[1:]
    patch_size, overlap = tuple(patch_size), tuple(overlap)
    positions = patch_positions(spatial, patch_size, overlap)
    if order is not None:
        positions = [positions[i] for i in order]
    total = None
    count = np.zeros(spatial, dtype=np.int64)
    for pos in positions:
        region = tuple(slice(p, p + n) for p, n in zip(pos, patch_size))
        out = np.asarray(predict_fn(image[(slice(None),) + region]), dtype=np.float64)
        if total is None:
            total = np.zeros((out.shape[0],) + spatial)
        total[(slice(None),) + region] += out
        count[region] += 1
    return total / count


def coverage(shape, patch_size, overlap) -> np.ndarray:
    count = np.zeros(tuple(shape), dtype=np.int64)
    for pos in patch_positions(shape, patch_size, overlap):
        count[tuple(slice(p, p + n) for p, n in zip(pos, patch_size))] += 1
    return count


# ---------------------------------------------------------------- ensembles


def ensemble(p_a: np.ndarray, p_b: np.ndarray) -> np.ndarray:
    """Per-pixel mean of two probability maps."""
    p_a = np.asarray(p_a)
    p_b = np.asarray(p_b)
    if p_a.shape != p_b.shape:
        raise ValueError(f"shape mismatch {p_a.shape} vs {p_b.shape}")
    return (p_a + p_b) / 2.0


def seed_variance_from_traces(traces: Sequence[StepTrace]) -> list[dict]:
    """Per-step max pairwise |difference| of Dice and HD95 across seeds."""
    if len(traces) < 2:
        raise ValueError("need at least two seeds")
    rows = []
    for i, rec in enumerate(traces[0].steps):
        dice = np.stack([tr.steps[i].dice for tr in traces])  # [seeds, N]
        hd = np.stack([tr.steps[i].hd95 for tr in traces])
        rows.append(
            {
                "k": rec.k,
                "t": rec.t,
                "delta_dice": dice.max(axis=0) - dice.min(axis=0),
                "delta_hd95": hd.max(axis=0) - hd.min(axis=0),
            }
        )
    return rows


def seed_variance(params, cfg: UNetConfig, image, reference, K: int, seeds: Sequence[int], sampler="ddpm", s=None) -> list[dict]:
    traces = [predict(params, cfg, image, sampler, K, s, seed, reference) for seed in seeds]
    return seed_variance_from_traces(traces)


# -------------------------------------------------------------------- output


def write_trace_csv(path, trace: StepTrace, index: int = 0) -> None:
    """Columns ``k, t_k, dice, hd95`` for sample ``index`` of the batch."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t_k", "dice", "hd95"])
        for rec in trace.steps:
            dice = repr(float(rec.dice[index])) if rec.dice is not None else ""
            hd = repr(float(rec.hd95[index])) if rec.hd95 is not None else ""
            w.writerow([rec.k, rec.t, dice, hd])


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"k": int(r["k"]), "t_k": int(r["t_k"]), "dice": float(r["dice"]), "hd95": float(r["hd95"])}
            for r in csv.DictReader(fh)
        ]


def dump_array(path, array: np.ndarray) -> None:
    """Raw little-endian float32 bytes plus a ``.json`` shape header."""
    path = Path(path)
    a = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(a.tobytes())
    path.with_suffix(".json").write_text(json.dumps({"dtype": "<f4", "shape": list(a.shape)}))


def load_array(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype=header["dtype"]).reshape(header["shape"])
