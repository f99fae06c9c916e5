"""Image comparison metrics."""

from __future__ import annotations

import math

import numpy as np


def psnr(a, b, mask=None) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Returns ``math.inf`` when the (masked) images are identical.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask) > 0.5
        if m.ndim == 3:
            m = m[..., 0]
        if m.shape != a.shape[:2]:
            raise ValueError(f"mask {m.shape} does not match image {a.shape[:2]}")
        diff = diff[m]
    if diff.size == 0:
        raise ValueError("no pixels to compare")
    mse = float(diff.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
