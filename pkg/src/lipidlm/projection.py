"""Principal-component projection of embedding matrices."""

from __future__ import annotations

import numpy as np


def pca_project(x: np.ndarray, k: int = 2) -> np.ndarray:
    """Coordinates of the centered rows of ``x`` on its top ``k`` principal axes.

    Axis signs are fixed so the largest-magnitude loading of each axis is
    positive, which makes the output deterministic.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("expected a non-empty 2-D matrix")
    centered = x - x.mean(0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:k]
    flip = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(1)])
    axes = axes * np.where(flip == 0, 1.0, flip)[:, None]
    coords = centered @ axes.T
    if coords.shape[1] < k:
        coords = np.hstack([coords, np.zeros((coords.shape[0], k - coords.shape[1]))])
    return coords
