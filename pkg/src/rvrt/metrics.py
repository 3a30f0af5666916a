"""PSNR and SSIM on [0, 1] images, RGB or BT.601 luma."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def to_luma(img: np.ndarray) -> np.ndarray:
    """BT.601 Y channel (studio swing) of an RGB image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    y = (65.481 * img[..., 0] + 128.553 * img[..., 1] + 24.966 * img[..., 2] + 16.0) / 255.0
    return y[..., None]


def _prepare(a, b, mode: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mode == "luma":
        return to_luma(a), to_luma(b)
    if mode != "rgb":
        raise ValueError(f"unknown channel mode {mode!r}")
    return a, b


def psnr(a, b, mode: str = "rgb") -> float:
    a, b = _prepare(a, b, mode)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def ssim(a, b, mode: str = "rgb") -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), valid region, averaged over channels."""
    a, b = _prepare(a, b, mode)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ValueError("SSIM needs images of at least 11x11")
    g = _gauss_window()
    scores = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + _C1) * (2 * sxy + _C2)
        den = (mx * mx + my * my + _C1) * (sxx + syy + _C2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    psnr: list[float]
    ssim: list[float]
    mode: str

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


def evaluate(pred: np.ndarray, target: np.ndarray, mode: str = "rgb", mask=None) -> MetricReport:
    """Per-frame metrics over [T, H, W, 3] videos; ``mask`` drops padded frames."""
    keep = range(len(pred)) if mask is None else [i for i, m in enumerate(mask) if m]
    p = [psnr(pred[i], target[i], mode) for i in keep]
    s = [ssim(pred[i], target[i], mode) for i in keep]
    return MetricReport(p, s, mode)
