"""MSE / PSNR / SSIM on images in the 0-255 range.

SSIM uses whole-channel statistics (one mean, variance and covariance per
channel, population estimators) and averages over channels. A windowed
Gaussian variant is available for comparison with external tools.
"""
from __future__ import annotations

import math

import numpy as np

MAX = 255.0
K1 = 0.01
K2 = 0.03


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W) images, got {x.shape}")
    return np.clip(x, 0.0, MAX), np.clip(y, 0.0, MAX)


def to_metric_scale(image) -> np.ndarray:
    """Model-space [0, 1] -> metric-space [0, 255]."""
    return np.asarray(image, dtype=np.float64) * MAX


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    """10*log10(MAX^2 / MSE); identical images give ``inf``."""
    m = mse(x, y)
    if m == 0:
        return math.inf
    return 10.0 * math.log10(MAX**2 / m)


def psnr_from_mse(m: float) -> float:
    return math.inf if m == 0 else 10.0 * math.log10(MAX**2 / m)


def _ssim_channel(u: np.ndarray, v: np.ndarray) -> float:
    c1 = (K1 * MAX) ** 2
    c2 = (K2 * MAX) ** 2
    mu_u, mu_v = u.mean(), v.mean()
    du, dv = u - mu_u, v - mu_v
    var_u, var_v = np.mean(du * du), np.mean(dv * dv)
    cov = np.mean(du * dv)
    return float(((2 * mu_u * mu_v + c1) * (2 * cov + c2)) / ((mu_u**2 + mu_v**2 + c1) * (var_u + var_v + c2)))


def ssim(x, y, windowed: bool = False) -> float:
    """Mean over channels of the global SSIM index."""
    x, y = _pair(x, y)
    if windowed:
        return float(np.mean([_ssim_windowed(a, b) for a, b in zip(x, y)]))
    return float(np.mean([_ssim_channel(a, b) for a, b in zip(x, y)]))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def _ssim_windowed(u: np.ndarray, v: np.ndarray) -> float:
    size = min(11, *u.shape)
    g = _gaussian_kernel(size, 1.5 * size / 11)
    c1 = (K1 * MAX) ** 2
    c2 = (K2 * MAX) ** 2
    mu_u, mu_v = _filter_valid(u, g), _filter_valid(v, g)
    var_u = _filter_valid(u * u, g) - mu_u**2
    var_v = _filter_valid(v * v, g) - mu_v**2
    cov = _filter_valid(u * v, g) - mu_u * mu_v
    m = ((2 * mu_u * mu_v + c1) * (2 * cov + c2)) / ((mu_u**2 + mu_v**2 + c1) * (var_u + var_v + c2))
    return float(m.mean())
