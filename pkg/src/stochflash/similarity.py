"""Image similarity: L2 distance and histogram mutual information.

Histograms use hard binning. ``HistogramConfig.range`` fixes one intensity
interval for both images; ``range=None`` bins each image over its own
[min, max], which is what makes NMI blind to a global rescaling of either
image (used for variance images, whose scale is set by the noise amplitude).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HistogramConfig:
    bins: int = 32
    range: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least 2 bins")
        if self.range is not None and not self.range[1] > self.range[0]:
            raise ValueError(f"empty intensity range {self.range}")


def _check_pair(A: np.ndarray, B: np.ndarray):
    if A.shape != B.shape:
        raise ValueError(f"image shapes differ: {A.shape} vs {B.shape}")


def l2_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Discrete L2 norm of ``A - B`` on the unit square, ``sqrt(sum (A-B)^2 * hx * hy)``."""
    _check_pair(A, B)
    hx, hy = 1.0 / A.shape[0], 1.0 / A.shape[1]
    return float(np.sqrt(np.sum((A - B) ** 2) * hx * hy))


def bin_indices(A: np.ndarray, bins: int, rng: tuple[float, float] | None) -> np.ndarray:
    """Bin label per pixel; values outside the range go to the end bins."""
    A = np.asarray(A, dtype=float)
    if rng is None:
        lo, hi = float(A.min()), float(A.max())
        if hi <= lo:
            return np.zeros(A.shape, dtype=np.int64)
    else:
        lo, hi = rng
    idx = np.floor((A - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def joint_histogram(A: np.ndarray, B: np.ndarray, h: HistogramConfig) -> np.ndarray:
    """Joint probability table p(a, b), shape (bins, bins)."""
    _check_pair(A, B)
    a = bin_indices(A, h.bins, h.range).ravel()
    b = bin_indices(B, h.bins, h.range).ravel()
    counts = np.bincount(a * h.bins + b, minlength=h.bins * h.bins).reshape(h.bins, h.bins)
    return counts / a.size


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def entropy(A: np.ndarray, h: HistogramConfig = HistogramConfig()) -> float:
    a = bin_indices(A, h.bins, h.range).ravel()
    return _entropy(np.bincount(a, minlength=h.bins) / a.size)


def mutual_information(A: np.ndarray, B: np.ndarray, h: HistogramConfig = HistogramConfig()) -> float:
    """``sum p(a,b) log(p(a,b) / (p(a) p(b)))`` in nats."""
    pab = joint_histogram(A, B, h)
    mi = _entropy(pab.sum(axis=1)) + _entropy(pab.sum(axis=0)) - _entropy(pab)
    return max(mi, 0.0)


def normalized_mutual_information(A: np.ndarray, B: np.ndarray, h: HistogramConfig = HistogramConfig()) -> float:
    """Studholme ratio ``(H(A) + H(B)) / H(A, B)``; 1 when both images are constant."""
    pab = joint_histogram(A, B, h)
    hab = _entropy(pab)
    if hab == 0:
        return 1.0
    return (_entropy(pab.sum(axis=1)) + _entropy(pab.sum(axis=0))) / hab
