"""Voxelwise error metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .phantom import VoxelGrid

DEFAULT_PEAK = 3.45  # cm^-1, roughly the densest material's scattering density


@dataclass(frozen=True)
class EvalReport:
    mse: float
    mae: float
    psnr_mean: float
    count: int
    seconds: float = 0.0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("report needs at least one sample")
        if self.mse < 0 or self.mae < 0:
            raise ValueError("mse and mae must be non-negative")


def _values(g) -> np.ndarray:
    return np.asarray(g.values if isinstance(g, VoxelGrid) else g, dtype=np.float64)


def voxel_metrics(pred, truth) -> tuple[float, float]:
    """``(mse, mae)`` over all voxels."""
    a, b = _values(pred), _values(truth)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d)), float(np.mean(np.abs(d)))


def psnr(mse: float, peak: float = DEFAULT_PEAK) -> float:
    """``10 log10(peak^2 / mse)`` in dB; ``inf`` when ``mse == 0``."""
    if not peak > 0:
        raise ValueError(f"peak must be positive, got {peak}")
    if mse < 0:
        raise ValueError(f"mse must be non-negative, got {mse}")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def peak_from(mse: float, psnr_db: float) -> float:
    """Peak implied by an ``(mse, psnr)`` pair."""
    return math.sqrt(mse * 10.0 ** (psnr_db / 10.0))


def evaluate(preds, truths, peak: float = DEFAULT_PEAK, seconds: float = 0.0) -> EvalReport:
    """Mean MSE/MAE over samples; PSNR is the mean of per-sample PSNR."""
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise ValueError("prediction and truth counts differ")
    if not preds:
        raise ValueError("nothing to evaluate")
    ms, ma, ps = [], [], []
    for p, t in zip(preds, truths):
        m, a = voxel_metrics(p, t)
        ms.append(m)
        ma.append(a)
        ps.append(psnr(m, peak))
    return EvalReport(float(np.mean(ms)), float(np.mean(ma)), float(np.mean(ps)), len(preds), seconds)
