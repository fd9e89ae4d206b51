"""PSNR and SSIM on [0, 1]-scaled images, overall or restricted to a region."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
MSE_FLOOR = 1e-10
SSIM_WIN = 7
K1, K2 = 0.01, 0.03


def to_unit(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1]."""
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _region(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    return np.broadcast_to(np.asarray(mask, dtype=bool), shape)


def psnr(a, b, region=None, max_val: float = 1.0) -> float:
    """``10 log10(MAX^2 / MSE)``; ``region`` (broadcastable bool) restricts the MSE."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    sel = _region(region, a.shape)
    if not sel.any():
        raise ValueError("empty region")
    mse = float(np.mean((a[sel] - b[sel]) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_val**2 / mse)))


def ssim_map(a, b, win: int = SSIM_WIN, max_val: float = 1.0) -> np.ndarray:
    """Per-window SSIM over valid 7x7 windows (population statistics), shape ``(..., H-6, W-6)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    c1, c2 = (K1 * max_val) ** 2, (K2 * max_val) ** 2
    wa = sliding_window_view(a, (win, win), axis=(-2, -1))
    wb = sliding_window_view(b, (win, win), axis=(-2, -1))
    mu_a, mu_b = wa.mean((-2, -1)), wb.mean((-2, -1))
    var_a = (wa**2).mean((-2, -1)) - mu_a**2
    var_b = (wb**2).mean((-2, -1)) - mu_b**2
    cov = (wa * wb).mean((-2, -1)) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(a, b, region=None, win: int = SSIM_WIN) -> float:
    """Mean SSIM; with ``region`` (H x W bool), only windows centred inside it count."""
    m = ssim_map(a, b, win)
    if region is None:
        return float(m.mean())
    r = win // 2
    centre = np.asarray(region, dtype=bool)[..., r : r + m.shape[-2], r : r + m.shape[-1]]
    sel = np.broadcast_to(centre, m.shape)
    return float(m[sel].mean())


def masked_l1(pred, target, mask) -> float:
    """Mean absolute error over missing pixels (mask == 0), all channels."""
    hole = _region(np.asarray(mask) < 0.5, np.shape(pred))
    return float(np.abs(np.asarray(pred) - np.asarray(target))[hole].mean())
