"""Segmentation metrics and paired statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree


def _check_same_shape(pred, ref) -> None:
    if np.shape(pred) != np.shape(ref):
        raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(ref)}")


def dice_score(pred: np.ndarray, ref: np.ndarray, c: int = 1) -> float:
    """Binary Dice of class ``c``; 1 when both masks are empty."""
    _check_same_shape(pred, ref)
    a = np.asarray(pred) == c
    b = np.asarray(ref) == c
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def mean_foreground_dice(pred: np.ndarray, ref: np.ndarray, classes: int) -> float:
    return float(np.mean([dice_score(pred, ref, c) for c in range(1, classes)]))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour that is background or off-canvas."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for axis in range(m.ndim):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[tuple(slice(1, -1) for _ in range(m.ndim))]
    return m & ~interior


def _nearest_distances(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    tree = cKDTree(dst * spacing)
    k = min(4, len(dst))
    _, idx = tree.query(src * spacing, k=k)
    idx = idx.reshape(len(src), k)
    # recompute with a fixed formula so results do not depend on the tree's arithmetic
    d = np.sqrt((((src[:, None, :] - dst[idx]) * spacing) ** 2).sum(axis=-1))
    return d.min(axis=1)


def sentinel_distance(shape, spacing=None) -> float:
    spacing = np.ones(len(shape)) if spacing is None else np.asarray(spacing, dtype=np.float64)
    return float(np.sqrt(((np.asarray(shape) * spacing) ** 2).sum()))


def hausdorff95(pred: np.ndarray, ref: np.ndarray, c: int = 1, spacing=None, pooled: bool = True) -> tuple[float, bool]:
    """95th-percentile boundary distance of class ``c`` and an empty-mask flag.

    ``pooled`` takes the percentile of both directed distance sets together;
    otherwise the larger of the two directed percentiles. If either mask is
    empty the image diagonal is returned with the flag set.
    """
    _check_same_shape(pred, ref)
    pred = np.asarray(pred)
    spacing = np.ones(pred.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(boundary(pred == c)).astype(np.float64)
    b = np.argwhere(boundary(np.asarray(ref) == c)).astype(np.float64)
    if len(a) == 0 or len(b) == 0:
        return sentinel_distance(pred.shape, spacing), True
    d_ab = _nearest_distances(a, b, spacing)
    d_ba = _nearest_distances(b, a, spacing)
    if pooled:
        return float(np.percentile(np.concatenate([d_ab, d_ba]), 95)), False
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95))), False


@dataclass
class MetricReport:
    dice: dict[int, float]
    hd95: dict[int, float]
    sentinel: dict[int, bool]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    @property
    def mean_hd95(self) -> float:
        return float(np.mean(list(self.hd95.values())))


def evaluate(pred: np.ndarray, ref: np.ndarray, classes: int, spacing=None) -> MetricReport:
    """Per-foreground-class Dice and HD95."""
    dice, hd, flags = {}, {}, {}
    for c in range(1, classes):
        dice[c] = dice_score(pred, ref, c)
        hd[c], flags[c] = hausdorff95(pred, ref, c, spacing)
    return MetricReport(dice, hd, flags)


def write_metrics_csv(fh, reports: dict) -> None:
    """Rows of ``sample_id, class, dice, hd95, sentinel_flag``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["sample_id", "class", "dice", "hd95", "sentinel_flag"])
    for sample_id, rep in reports.items():
        for c in rep.dice:
            w.writerow([sample_id, c, repr(rep.dice[c]), repr(rep.hd95[c]), int(rep.sentinel[c])])


# --------------------------------------------------------------- statistics


@dataclass
class TTestResult:
    t: float
    p: float
    degenerate: bool = False
    n: int = 0


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired Student t-test; zero-variance differences are flagged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d and equally long")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, True, n)
        return TTestResult(float(np.copysign(np.inf, mean)), 0.0, True, n)
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return TTestResult(float(t), float(p), False, n)


@dataclass
class BlandAltman:
    diffs: np.ndarray
    means: np.ndarray
    mean_diff: float
    sd: float
    lower: float
    upper: float
    fraction_improved: float
    extras: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {"sample": i, "mean": float(m), "diff": float(d)}
            for i, (m, d) in enumerate(zip(self.means, self.diffs))
        ]


def bland_altman(a, b) -> BlandAltman:
    """Differences ``a - b`` with mean ± 1.96 sd limits (sample sd)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    d = a - b
    mean_diff = float(d.mean())
    sd = float(d.std(ddof=1)) if len(d) > 1 else 0.0
    return BlandAltman(
        diffs=d,
        means=(a + b) / 2.0,
        mean_diff=mean_diff,
        sd=sd,
        lower=mean_diff - 1.96 * sd,
        upper=mean_diff + 1.96 * sd,
        fraction_improved=float((d > 0).mean()),
    )


def write_bland_altman_csv(fh, ba: BlandAltman) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["sample", "mean", "diff", "mean_diff", "lower", "upper", "fraction_improved"])
    for row in ba.rows():
        w.writerow([row["sample"], repr(row["mean"]), repr(row["diff"]), repr(ba.mean_diff), repr(ba.lower), repr(ba.upper), repr(ba.fraction_improved)])
