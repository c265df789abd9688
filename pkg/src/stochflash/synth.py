"""Synthetic test images."""
from __future__ import annotations

import numpy as np

from .fourier import GridSpec


def _smoothstep(r, edge, width):
    return 0.5 * (1 - np.tanh((r - edge) / width))


def blob_phantom(g: GridSpec, width: float = 0.04) -> np.ndarray:
    """Brain-like phantom of smooth concentric blobs with intensities in [0, 1].

    An elliptical "head" with a darker inner ring, two lateral "ventricles"
    and a bright core, all with tanh edges of the given width.
    """
    x = g.identity[..., 0] - 0.5
    y = g.identity[..., 1] - 0.5
    r_outer = np.sqrt((x / 0.40) ** 2 + (y / 0.34) ** 2)
    img = 0.35 * _smoothstep(r_outer, 1.0, width / 0.37)
    r_mid = np.sqrt((x / 0.30) ** 2 + (y / 0.25) ** 2)
    img += 0.40 * _smoothstep(r_mid, 1.0, width / 0.27)
    for cx in (-0.10, 0.10):
        r_v = np.sqrt(((x - cx) / 0.05) ** 2 + (y / 0.12) ** 2)
        img -= 0.45 * _smoothstep(r_v, 1.0, width / 0.08)
    r_core = np.hypot(x, y + 0.12) / 0.06
    img += 0.25 * _smoothstep(r_core, 1.0, width / 0.06)
    return np.clip(img, 0.0, 1.0)
