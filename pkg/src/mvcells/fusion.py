"""Content-based fusion of two aligned views weighted by local entropy."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume import Volume

FUSION_BASE = 100.0


def local_entropy(volume: Volume, window: int = 9) -> np.ndarray:
    """Normalized Shannon entropy of the 8-bit histogram in a cubic window.

    Windows are clipped at the volume boundary.  The result is divided by
    ``log(256)`` so it lies in [0, 1].
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    levels = np.clip(np.rint(volume.data * 255.0), 0, 255).astype(np.int64)
    vol = float(window ** 3)

    def box_count(mask):
        s = ndimage.uniform_filter(mask.astype(np.float64), size=window, mode="constant") * vol
        return np.rint(s)

    n = box_count(np.ones(levels.shape, dtype=bool))
    clogc = np.zeros(levels.shape)
    for v in np.unique(levels):
        c = box_count(levels == v)
        nz = c > 0
        clogc[nz] += c[nz] * np.log(c[nz])
    h = np.log(n) - clogc / n
    return np.clip(h / np.log(256.0), 0.0, 1.0)


def fuse_content_based(vi, vj, hi, hj) -> Volume:
    """Entropy-weighted average ``(100^Hi Vi + 100^Hj Vj) / (100^Hi + 100^Hj)``."""
    a = vi.data if isinstance(vi, Volume) else np.asarray(vi, dtype=float)
    b = vj.data if isinstance(vj, Volume) else np.asarray(vj, dtype=float)
    hi = np.asarray(hi, dtype=float)
    hj = np.asarray(hj, dtype=float)
    if not (a.shape == b.shape == hi.shape == hj.shape):
        raise ValueError(f"shape mismatch: {a.shape}, {b.shape}, {hi.shape}, {hj.shape}")
    wi = FUSION_BASE ** hi
    wj = FUSION_BASE ** hj
    fused = (wi * a + wj * b) / (wi + wj)
    # convex combination; clip only guards round-off
    fused = np.clip(fused, np.minimum(a, b), np.maximum(a, b))
    voxel = vi.voxel_size if isinstance(vi, Volume) else 4.0
    return Volume(fused, voxel)


def fuse_views(vi: Volume, vj: Volume, window: int = 9) -> Volume:
    return fuse_content_based(vi, vj, local_entropy(vi, window), local_entropy(vj, window))
