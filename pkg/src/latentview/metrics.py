"""Image quality metrics and a registry for externally supplied perceptual metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import convolve2d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
_LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[-1] != 3:
            raise ValueError("color images must be HxWx3")
        return img @ _LUMA
    return img


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean windowed SSIM (11x11 Gaussian, sigma 1.5) over valid windows; color inputs use luma."""
    a, b = _pair(a, b)
    a, b = to_gray(a), to_gray(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()

    def filt(x):
        return convolve2d(x, w, mode="valid")  # kernel is symmetric, so no flip is needed

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


SSIM_METADATA = {"window": SSIM_WINDOW, "sigma": SSIM_SIGMA, "k1": SSIM_K1, "k2": SSIM_K2,
                 "data_range": 1.0, "color": "luma"}


@dataclass
class Metric:
    name: str
    fn: Callable
    lower_is_better: bool

    def distance(self, a, b) -> float:
        v = self.fn(a, b)
        return v if self.lower_is_better else -v


_REGISTRY = {
    "psnr": Metric("psnr", psnr, lower_is_better=False),
    "ssim": Metric("ssim", ssim, lower_is_better=False),
    "mse": Metric("mse", lambda a, b: float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2)), True),
}


def register_metric(name: str, fn: Callable, lower_is_better: bool) -> None:
    """Plug in an external metric (e.g. LPIPS) under ``name``."""
    _REGISTRY[name] = Metric(name, fn, lower_is_better)


def get_metric(name: str) -> Metric:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"metric {name!r} is not registered") from None


def available_metrics():
    return sorted(_REGISTRY)
