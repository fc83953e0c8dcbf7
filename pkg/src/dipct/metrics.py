"""Image quality metrics; data range always taken from the ground truth."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 200.0
SSIM_WINDOW = 7


def _pair(x, gt) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if x.shape != gt.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {gt.shape}")
    return x, gt


def psnr(x, gt) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP`` for exact matches."""
    x, gt = _pair(x, gt)
    data_range = gt.max() - gt.min()
    if data_range == 0:
        raise ValueError("PSNR is undefined for a constant ground truth")
    mse = np.mean((x - gt) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(data_range**2 / mse), PSNR_CAP))


def ssim(x, gt, win_size: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all fully contained ``win_size`` square windows.

    Uniform window, sample (co)variances, ``C1 = (0.01 R)^2``, ``C2 = (0.03 R)^2``.
    """
    x, gt = _pair(x, gt)
    data_range = gt.max() - gt.min()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    n = win_size * win_size
    wx = sliding_window_view(x, (win_size, win_size))
    wy = sliding_window_view(gt, (win_size, win_size))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    cov_norm = n / (n - 1)
    vx = cov_norm * ((wx**2).mean(axis=(-2, -1)) - mx**2)
    vy = cov_norm * ((wy**2).mean(axis=(-2, -1)) - my**2)
    vxy = cov_norm * ((wx * wy).mean(axis=(-2, -1)) - mx * my)
    num = (2 * mx * my + c1) * (2 * vxy + c2)
    den = (mx**2 + my**2 + c1) * (vx + vy + c2)
    if np.array_equal(x, gt):
        return 1.0
    return float(np.mean(num / den))
