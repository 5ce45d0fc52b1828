"""Synthetic segmentation tasks, ±1 mask encoding, augmentation and x_t diagnostics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .diffusion import q_sample
from .schedule import NoiseSchedule


def encode_mask(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    """One-hot ±1 channels: ``[..., H, W]`` ints → ``[..., C, H, W]``."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"class ids must lie in [0, {classes})")
    onehot = labels[..., None, :, :] == np.arange(classes).reshape((classes, 1, 1))
    return np.where(onehot, 1.0, -1.0).astype(dtype)


def decode_mask(x: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the channel axis (``-3``)."""
    return np.argmax(np.asarray(x), axis=-3)


@dataclass
class SynthTask:
    image: np.ndarray  # [1, H, W]
    labels: np.ndarray  # [H, W]
    classes: int
    meta: dict = field(default_factory=dict)


def _render_shape(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
    ry, rx = rng.uniform(0.08 * size, 0.22 * size, 2)
    if rng.random() < 0.5:
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def gen_task(rng: np.random.Generator, size: int, classes: int, difficulty: float) -> SynthTask:
    while True:
        labels = np.zeros((size, size), dtype=np.int64)
        for c in range(1, classes):
            for _ in range(int(rng.integers(1, 4))):
                labels[_render_shape(rng, size)] = c
        if labels.max() > 0 and labels.min() == 0:
            break
    means = np.arange(classes, dtype=np.float64) / (classes - 1)
    image = means[labels]
    # difficulty scales pixel noise and a smooth intensity bias; at 0 the
    # classes are separable by thresholds between the class means
    noise_sd = 0.3 * difficulty
    bias_amp = 0.15 * difficulty
    image = image + noise_sd * rng.standard_normal(image.shape) + bias_amp * _smooth_field(rng, size, size / 6)
    meta = {"noise_sd": noise_sd, "bias_amp": bias_amp, "difficulty": difficulty, "class_means": means.tolist()}
    return SynthTask(image=image[None].astype(np.float32), labels=labels, classes=classes, meta=meta)


def gen_dataset(seed: int, n: int, size: int = 32, classes: int = 3, difficulty: float = 0.5) -> list[SynthTask]:
    """``n`` tasks, each drawn from its own child seed of ``seed``."""
    if size < 16:
        raise ValueError("size must be at least 16")
    if classes < 2:
        raise ValueError("need at least 2 classes")
    children = np.random.SeedSequence(seed).spawn(n)
    tasks = []
    for i, child in enumerate(children):
        task = gen_task(np.random.default_rng(child), size, classes, difficulty)
        task.meta.update(seed=seed, index=i)
        tasks.append(task)
    return tasks


def threshold_segment(image: np.ndarray, class_means) -> np.ndarray:
    """Nearest-class-mean labelling of a single-channel image."""
    means = np.asarray(class_means)
    return np.argmin(np.abs(image[0][..., None] - means), axis=-1)


# -------------------------------------------------------------- augmentation


def affine_warp(task: SynthTask, angle: float = 0.0, shift=(0.0, 0.0), scale: float = 1.0) -> SynthTask:
    """Rotate (degrees), scale and translate about the centre.

    ``shift`` is ``(dx, dy)`` in pixels (columns, rows). The image is
    interpolated bilinearly, labels by nearest neighbour; uncovered area
    becomes 0 / background.
    """
    h, w = task.labels.shape
    a = math.radians(angle)
    # forward map p_out = S R (p_in - c) + c + d  (p = (row, col))
    fwd = scale * np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    inv = np.linalg.inv(fwd)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    d = np.array([shift[1], shift[0]], dtype=np.float64)
    offset = centre - inv @ (centre + d)
    image = np.stack(
        [ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="constant", cval=0.0) for ch in task.image]
    ).astype(task.image.dtype)
    labels = ndimage.affine_transform(task.labels, inv, offset=offset, order=0, mode="constant", cval=0)
    meta = dict(task.meta, augment={"angle": angle, "shift": list(shift), "scale": scale})
    return SynthTask(image=image, labels=labels.astype(task.labels.dtype), classes=task.classes, meta=meta)


def augment(
    task: SynthTask,
    rng: np.random.Generator,
    max_angle: float = 15.0,
    max_shift: float = 0.1,
    scale_range: tuple[float, float] = (0.9, 1.1),
) -> SynthTask:
    h, w = task.labels.shape
    angle = rng.uniform(-max_angle, max_angle)
    shift = (rng.uniform(-max_shift, max_shift) * w, rng.uniform(-max_shift, max_shift) * h)
    scale = rng.uniform(*scale_range)
    return affine_warp(task, angle, shift, scale)


# --------------------------------------------------------- x_t information


def _ce_and_dice(x: np.ndarray, labels: np.ndarray, classes: int) -> tuple[float, float]:
    from .metrics import mean_foreground_dice

    shifted = x - x.max(axis=0, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    ce = -float(np.take_along_axis(logp, labels[None], axis=0).mean())
    return ce, mean_foreground_dice(decode_mask(x), labels, classes)


def xt_information(x0: np.ndarray, s: NoiseSchedule, t_grid, rng: np.random.Generator, draws: int = 100) -> list[dict]:
    """Cross entropy and Dice of decoded ``x_t`` against ``x0`` along ``t_grid``.

    ``x_t`` channels are read as logits. A ``t = "noise"`` row holds the
    pure-noise baseline. Each row carries mean and standard error over
    ``draws`` samples.
    """
    classes = x0.shape[0]
    labels = decode_mask(x0)
    rows = []

    def summarise(t, samples):
        ce, dice = np.array(samples).T
        se = lambda a: float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0
        rows.append({"t": t, "ce": float(ce.mean()), "ce_se": se(ce), "dice": float(dice.mean()), "dice_se": se(dice)})

    for t in t_grid:
        samples = []
        for _ in range(draws):
            eps = rng.standard_normal(x0.shape)
            samples.append(_ce_and_dice(q_sample(x0, int(t), eps, s), labels, classes))
        summarise(int(t), samples)
    summarise("noise", [_ce_and_dice(rng.standard_normal(x0.shape), labels, classes) for _ in range(draws)])
    return rows


# ------------------------------------------------------------------ disk I/O


def write_pgm(path, array: np.ndarray, maxval: int = 65535) -> None:
    a = np.asarray(array)
    if a.ndim != 2 or a.min() < 0 or a.max() > maxval:
        raise ValueError("PGM needs a 2-d array within [0, maxval]")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + a.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode())
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM")
    width, height, maxval = map(int, tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw[pos + 1 :], dtype=dtype, count=width * height).reshape(height, width).astype(np.int64)


def save_dataset(root, splits: dict[str, list[SynthTask]]) -> Path:
    """Write PGM image/label pairs with JSON metadata and a split manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for split, tasks in splits.items():
        names = []
        for i, task in enumerate(tasks):
            name = f"{split}_{i:04d}"
            img = task.image[0].astype(np.float64)
            lo, hi = float(img.min()), float(img.max())
            span = hi - lo if hi > lo else 1.0
            write_pgm(root / f"{name}_image.pgm", np.round((img - lo) / span * 65535).astype(np.int64))
            write_pgm(root / f"{name}_label.pgm", task.labels, maxval=255)
            meta = dict(task.meta, classes=task.classes, intensity_min=lo, intensity_span=span)
            (root / f"{name}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
            names.append(name)
        manifest[split] = names
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(root) -> dict[str, list[SynthTask]]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    splits = {}
    for split, names in manifest.items():
        tasks = []
        for name in names:
            meta = json.loads((root / f"{name}.json").read_text())
            q = read_pgm(root / f"{name}_image.pgm").astype(np.float64)
            image = q / 65535 * meta["intensity_span"] + meta["intensity_min"]
            labels = read_pgm(root / f"{name}_label.pgm")
            tasks.append(SynthTask(image=image[None].astype(np.float32), labels=labels, classes=meta["classes"], meta=meta))
        splits[split] = tasks
    return splits


def stack(tasks: list[SynthTask]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``images[N, 1, H, W]`` and ``labels[N, H, W]``."""
    return np.stack([t.image for t in tasks]), np.stack([t.labels for t in tasks])
