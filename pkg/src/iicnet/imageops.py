"""Plain-array image helpers shared by the pipeline and the task generators."""
from __future__ import annotations

import numpy as np

LUMA = (0.299, 0.587, 0.114)


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align_corners=False: output pixel centers map to (i + 0.5) * n_in / n_out - 0.5
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of the last two axes (half-pixel centers, edge clamped, no antialiasing)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if (h, w) == (height, width):
        return img.copy()
    r0, r1, fr = _bilinear_axis(h, height)
    c0, c1, fc = _bilinear_axis(w, width)
    rows = img[..., r0, :] * (1 - fr)[:, None] + img[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


def to_gray(img: np.ndarray) -> np.ndarray:
    """``(C, H, W)`` to ``(H, W)``; RGB uses ITU-R 601 luma weights."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[0] == 1:
        return img[0]
    if img.shape[0] == 3:
        return LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]
    raise ValueError(f"expected 1 or 3 channels, got {img.shape[0]}")
