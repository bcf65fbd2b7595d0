"""Distortion and success-rate metrics on the 0-255 pixel scale."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError

PEAK = 255.0


@dataclass(frozen=True)
class DistortionStats:
    psnr_db: float  # math.inf for identical inputs
    l1_mean: float
    max_abs: float


def distortion(x_original: np.ndarray, x_final: np.ndarray) -> DistortionStats:
    """PSNR / mean-L1 / max-abs between two patches on the 0-255 scale.

    Callers holding [0,1]-scale model tensors multiply by 255 first.
    """
    a = np.asarray(x_original, dtype=np.float64)
    b = np.asarray(x_final, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    max_abs = float(diff.max())
    l1_mean = float(diff.mean())
    if max_abs == 0.0:
        return DistortionStats(math.inf, 0.0, 0.0)
    mse = float((diff ** 2).mean())
    psnr = 20.0 * math.log10(PEAK / math.sqrt(mse))
    return DistortionStats(psnr, l1_mean, max_abs)


def mean_psnr(values) -> tuple[float, int]:
    """Arithmetic mean of finite PSNR values; returns (mean, n_excluded).

    Infinite sentinels (identical image pairs) are excluded from the mean;
    an all-infinite list yields an infinite mean with every value excluded.
    """
    vals = list(values)
    if not vals:
        raise DataError("no PSNR values to aggregate")
    finite = [v for v in vals if math.isfinite(v)]
    excluded = len(vals) - len(finite)
    if not finite:
        return math.inf, excluded
    return float(np.mean(finite)), excluded


def asr(success_flags) -> float:
    """Attack success rate: fraction of true flags."""
    flags = list(success_flags)
    if not flags:
        raise DataError("success flag list is empty")
    return sum(bool(f) for f in flags) / len(flags)


def transfer_success(target_model, boosted_samples, labels) -> list[bool]:
    """Per-sample flags: does the target model misclassify each sample?

    `boosted_samples` are (1, side, side) patches on the [0,1] scale.
    """
    samples = list(boosted_samples)
    labels = list(labels)
    if len(samples) != len(labels):
        raise DimensionError(
            f"{len(samples)} samples vs {len(labels)} labels")
    return [target_model.predict01(np.asarray(x, dtype=np.float32)) != int(y)
            for x, y in zip(samples, labels)]
