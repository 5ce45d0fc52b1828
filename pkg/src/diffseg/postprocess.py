"""Morphological clean-up of binary masks (muscle ultrasound pipeline)."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy**2 + xx**2 <= r * r


def fill_holes(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool))


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Erosion with a disk; off-canvas pixels count as background."""
    return ndimage.binary_erosion(np.asarray(mask, dtype=bool), structure=disk(radius), border_value=0)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    return ndimage.binary_dilation(np.asarray(mask, dtype=bool), structure=disk(radius))


def opening(mask: np.ndarray, radius: int) -> np.ndarray:
    return dilate(erode(mask, radius), radius)


def components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labels (0 = background) and the component count."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    return labels, int(n)


def select_component(mask: np.ndarray, ratio: float = 0.75) -> np.ndarray:
    """Keep the largest component, or the more superficial of the two largest.

    When the second largest component is at least ``ratio`` times the size of
    the largest, the one whose top row is smaller (closer to the top of the
    image) is kept.
    """
    labels, n = components(mask)
    if n == 0:
        return np.zeros_like(np.asarray(mask, dtype=bool))
    sizes = np.bincount(labels.ravel())[1:]
    order = np.argsort(-sizes, kind="stable")
    keep = order[0] + 1
    if n > 1 and sizes[order[1]] >= ratio * sizes[order[0]]:
        first, second = order[0] + 1, order[1] + 1
        top = lambda lab: int(np.argwhere(labels == lab)[:, 0].min())
        keep = second if top(second) < top(first) else first
    return labels == keep


def postprocess_muscle(mask: np.ndarray) -> np.ndarray:
    """fill → erode(3) → dilate(5) → open(10) → component rule → fill."""
    m = fill_holes(mask)
    m = erode(m, 3)
    m = dilate(m, 5)
    m = opening(m, 10)
    m = select_component(m)
    return fill_holes(m)
