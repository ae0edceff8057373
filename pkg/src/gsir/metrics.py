"""Image and normal-map quality metrics."""

from __future__ import annotations

import numpy as np

from . import ssim as ssim_mod
from .errors import InvalidParameterError

PSNR_CAP = 99.0
_MSE_FLOOR = 1e-10


def metric_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError("images must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def metric_ssim(a: np.ndarray, b: np.ndarray) -> float:
    if np.asarray(a).shape != np.asarray(b).shape:
        raise InvalidParameterError("images must share a shape")
    return ssim_mod.ssim(a, b)


def metric_normal_mae(a: np.ndarray, b: np.ndarray,
                      mask: np.ndarray | None = None) -> float:
    """Mean angular error between unit-normal maps, in degrees."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError("normal maps must share a shape")
    if mask is None:
        mask = np.ones(a.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InvalidParameterError("no valid pixels")
    dots = np.clip(np.sum(a[mask] * b[mask], axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())
