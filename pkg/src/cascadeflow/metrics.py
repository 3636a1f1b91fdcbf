"""Reference-based and spectral quality metrics for ``(T, H, W, C)`` clips."""

from __future__ import annotations

import math

import torch
from torch import Tensor

PSNR_CAP = 99.0
PIXEL_RANGE = 2.0


def psnr(a: Tensor, b: Tensor, data_range: float = PIXEL_RANGE) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def radial_frequency(H: int, W: int, dtype=torch.float64) -> Tensor:
    """Radial frequency of every FFT bin as a fraction of Nyquist (0.5 cycles/pixel)."""
    fy = torch.fft.fftfreq(H, dtype=dtype)[:, None]
    fx = torch.fft.fftfreq(W, dtype=dtype)[None, :]
    return torch.sqrt(fy**2 + fx**2) / 0.5


def hf_energy_ratio(video: Tensor, radial_cutoff: float = 0.5) -> float:
    """Share of non-DC spectral energy above ``radial_cutoff`` (fraction of Nyquist).

    Computed per frame and channel, then averaged; a frame with no AC energy
    counts as 0.
    """
    if video.ndim != 4:
        raise ValueError(f"expected (T, H, W, C), got shape {tuple(video.shape)}")
    T, H, W, C = video.shape
    if H < 4 or W < 4:
        raise ValueError("hf_energy_ratio needs H, W >= 4")
    frames = video.double().permute(0, 3, 1, 2)  # T, C, H, W
    power = torch.fft.fft2(frames).abs() ** 2
    power[..., 0, 0] = 0.0
    high = radial_frequency(H, W) > radial_cutoff
    total = power.sum(dim=(-2, -1))
    above = (power * high).sum(dim=(-2, -1))
    # Parseval: sum |X|^2 = H * W * sum x^2; AC below rounding level means a flat frame
    energy = H * W * (frames**2).sum(dim=(-2, -1))
    flat = total <= 1e-20 * energy
    ratio = torch.where(flat, torch.zeros_like(total), above / total.clamp_min(1e-300))
    return float(ratio.mean())
