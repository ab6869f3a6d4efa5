"""Perturbation-quality metrics for original/adversarial image pairs.

SSIM here is the plain windowed form: 8x8 sliding window, stride 1, uniform
weights, valid placements only, stabilizers C1 = (0.01 * 255)^2 and
C2 = (0.03 * 255)^2 for the [0, 255] dynamic range, biased moment estimates,
channels scored independently and averaged.  The perceptual score aligns the
adversarial image to the original by exhaustive integer translation over
[-3, 3]^2 (edge-replicated shifts) and reports the best SSIM found; at these
image sizes and pixel-space attacks, non-translational warps are negligible,
which is this module's one intentional simplification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensorops import ShapeMismatch

SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2
PASS_MAX_SHIFT = 3


@dataclass
class SimilarityScore:
    pass_value: float
    ssim_value: float           # at zero offset
    alignment_offset: tuple[int, int]  # (dy, dx) applied to the adversarial


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3:
        return img
    raise ShapeMismatch(f"expected (H, W) or (C, H, W), got {img.shape}")


def _check_pair(a: np.ndarray, b: np.ndarray):
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over all valid window placements."""
    a, b = _check_pair(a, b)
    if a.shape[1] < window or a.shape[2] < window:
        raise ShapeMismatch(f"images smaller than the {window}x{window} window")
    wa = sliding_window_view(a, (window, window), axis=(1, 2))
    wb = sliding_window_view(b, (window, window), axis=(1, 2))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa ** 2).mean(axis=(-1, -2)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-1, -2)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def shift_replicate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate image content by (dy, dx) with edge replication."""
    img = _as_channels(img)
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return img.copy()
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    h, w = img.shape[1:]
    return padded[:, pad - dy:pad - dy + h, pad - dx:pad - dx + w].copy()


def pass_score(original: np.ndarray, adversarial: np.ndarray,
               max_shift: int = PASS_MAX_SHIFT) -> SimilarityScore:
    """Best SSIM over integer translations of the adversarial image.

    The zero offset is evaluated first and only strictly better shifts
    replace it, so identical pairs report offset (0, 0).
    """
    original, adversarial = _check_pair(original, adversarial)
    base = ssim(original, adversarial)
    best, best_offset = base, (0, 0)
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            if dy == 0 and dx == 0:
                continue
            score = ssim(original, shift_replicate(adversarial, dy, dx))
            if score > best:
                best, best_offset = score, (dy, dx)
    return SimilarityScore(pass_value=best, ssim_value=base,
                           alignment_offset=best_offset)


def linf(original: np.ndarray, adversarial: np.ndarray) -> float:
    """Max absolute pixel difference."""
    original, adversarial = _check_pair(original, adversarial)
    return float(np.max(np.abs(original - adversarial)))
