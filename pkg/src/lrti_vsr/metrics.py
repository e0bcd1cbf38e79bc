"""RGB PSNR and SSIM."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import DimensionError

PSNR_CAP = 99.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr_rgb(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB over all RGB samples for images in [0, 1], capped at 99 dB."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel.shape[0]
    # separable: row sums of the outer product recover the 1-D profile
    g = kernel.sum(axis=1)
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def _ssim_channel(x: np.ndarray, y: np.ndarray, kernel: np.ndarray) -> float:
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _filter_valid(x, kernel), _filter_valid(y, kernel)
    sxx = _filter_valid(x * x, kernel) - mx * mx
    syy = _filter_valid(y * y, kernel) - my * my
    sxy = _filter_valid(x * y, kernel) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim_rgb(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over channels of 11x11 Gaussian-windowed SSIM (valid region only)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise DimensionError(f"frame {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    kernel = gaussian_window()
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], kernel) for c in range(a.shape[2])]))
