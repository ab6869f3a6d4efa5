"""Shared numeric primitives for images, activations, and gradients.

All training math runs in float64.  Stored or attacked images are float64
arrays holding integral values in [0, 255]; feature maps use the (N, C, H, W)
layout, row-major.
"""

from __future__ import annotations

import numpy as np

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes."""


def l2_norm(t: np.ndarray) -> float:
    """Euclidean norm over all elements; an empty array has norm 0.

    Scaled by the max magnitude first so the norm is 0 iff every element is 0
    even when squares of subnormals would underflow.
    """
    t = np.asarray(t, dtype=np.float64).ravel()
    if t.size == 0:
        return 0.0
    m = float(np.max(np.abs(t)))
    if m == 0.0 or not np.isfinite(m):
        return m
    return m * float(np.linalg.norm(t / m))


def round_half_away(t: np.ndarray) -> np.ndarray:
    """Round to the nearest integer with halves away from zero (127.5 -> 128).

    numpy's default rounding is half-to-even, which is the wrong rule here.
    """
    t = np.asarray(t, dtype=np.float64)
    return np.sign(t) * np.floor(np.abs(t) + 0.5)


def clamp_round_pixels(t: np.ndarray) -> np.ndarray:
    """Round half away from zero, then clamp into [0, 255].

    Idempotent: integral in-range images pass through unchanged.
    """
    return np.clip(round_half_away(t), PIXEL_MIN, PIXEL_MAX)


def require_finite(t: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"non-finite values in {what}")
