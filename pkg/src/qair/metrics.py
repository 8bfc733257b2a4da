"""PSNR and SSIM on ``[0, 1]``-scaled RGB images."""

from __future__ import annotations

import numpy as np
import torch
from scipy.signal import fftconvolve

from .errors import ContractError

PSNR_CAP = 100.0


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def psnr_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image PSNR for NCHW tensors, capped like :func:`psnr`."""
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = ((a.double() - b.double()) ** 2).flatten(1).mean(1)
    out = 10.0 * torch.log10(1.0 / mse.clamp_min(1e-300))
    return out.clamp(max=PSNR_CAP).masked_fill(mse == 0, PSNR_CAP)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over RGB channels.

    Accepts ``[H, W, 3]`` or ``[H, W]`` arrays (numpy or torch).
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < window:
        raise ContractError(f"image must be at least {window}x{window} for SSIM, got {a.shape[:2]}")
    c1, c2 = 0.01**2, 0.03**2
    w = gaussian_window(window, sigma)

    def filt(x):
        return fftconvolve(x, w[::-1, ::-1], mode="valid")

    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
