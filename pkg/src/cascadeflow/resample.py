"""Separable spatial filters shared by degradation, data generation and upsampling.

Every operator is a dense 1-D matrix applied along the height and width axes of
a ``(..., H, W, C)`` tensor. Rows of every matrix sum to one, so constant
images pass through unchanged.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import torch
from torch import Tensor

CUBIC_A = -0.5


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel, support [-2, 2]."""
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    if n_in == n_out:
        m = np.eye(n_in)
        m.setflags(write=False)
        return m
    scale = n_in / n_out
    # widen the kernel when shrinking so the filter also antialiases
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = math.floor(center - support) + 1
        hi = math.ceil(center + support)
        taps = np.arange(lo, hi)
        w = cubic_kernel((taps - center) / stretch)
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), w)
        m[i] /= m[i].sum()
    m.setflags(write=False)
    return m


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be positive, got {n_in} -> {n_out}")
    return _resize_matrix(int(n_in), int(n_out))


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def gaussian_matrix(n: int, sigma: float) -> np.ndarray:
    """Gaussian blur along one axis with mirrored (reflect) borders."""
    if sigma <= 0:
        return np.eye(n)
    radius = max(1, math.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    m = np.zeros((n, n))
    for i in range(n):
        np.add.at(m[i], _reflect(i + offsets, n), kernel)
    return m


def apply_separable(x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    """Apply ``mh`` along H and ``mw`` along W of a ``(..., H, W, C)`` tensor."""
    th = torch.tensor(mh, dtype=x.dtype)
    tw = torch.tensor(mw, dtype=x.dtype)
    return torch.einsum("ih,...hwc,jw->...ijc", th, x, tw)


def resize(x: Tensor, height: int, width: int) -> Tensor:
    H, W = x.shape[-3], x.shape[-2]
    if (H, W) == (height, width):
        return x.clone()
    return apply_separable(x, resize_matrix(H, height), resize_matrix(W, width))


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    if sigma <= 0:
        return x.clone()
    H, W = x.shape[-3], x.shape[-2]
    return apply_separable(x, gaussian_matrix(H, sigma), gaussian_matrix(W, sigma))


def upsample(video: Tensor, height: int, width: int) -> Tensor:
    """Resize a video to ``height x width`` and clamp to the valid pixel range."""
    return resize(video, height, width).clamp(-1.0, 1.0)
