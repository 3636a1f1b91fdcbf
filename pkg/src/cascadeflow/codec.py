"""Invertible patch codec used in place of a learned video VAE.

A video of shape ``(..., T, H, W, channels)`` is cut into non-overlapping
spatiotemporal patches (``temporal_ratio`` frames by ``spatial_ratio`` squared
pixels) and every flattened patch is multiplied by one fixed orthonormal
matrix. The first frame is causal: it is zero-padded at the front to a full
temporal patch, which gives ``t = (T - 1) / temporal_ratio + 1``.

Because the mixing matrix is orthonormal, encoding preserves energy and its
transpose decodes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import Tensor


class ShapeError(ValueError):
    """Raised when a tensor does not satisfy the codec shape law."""


@dataclass(frozen=True)
class CodecConfig:
    spatial_ratio: int = 2
    temporal_ratio: int = 2
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.spatial_ratio < 1 or self.temporal_ratio < 1 or self.channels < 1:
            raise ValueError(f"codec ratios and channels must be >= 1, got {self}")

    @property
    def latent_channels(self) -> int:
        return self.channels * self.spatial_ratio**2 * self.temporal_ratio

    def latent_shape(self, T: int, H: int, W: int) -> tuple[int, int, int, int]:
        check_video_shape(T, H, W, self)
        return (
            (T - 1) // self.temporal_ratio + 1,
            H // self.spatial_ratio,
            W // self.spatial_ratio,
            self.latent_channels,
        )

    def video_shape(self, t: int, h: int, w: int) -> tuple[int, int, int, int]:
        return (
            (t - 1) * self.temporal_ratio + 1,
            h * self.spatial_ratio,
            w * self.spatial_ratio,
            self.channels,
        )


def check_video_shape(T: int, H: int, W: int, cfg: CodecConfig) -> None:
    problems = []
    if T < 1 or (T - 1) % cfg.temporal_ratio:
        problems.append(f"T - 1 = {T - 1} is not divisible by temporal_ratio={cfg.temporal_ratio}")
    if H < 1 or H % cfg.spatial_ratio:
        problems.append(f"H = {H} is not divisible by spatial_ratio={cfg.spatial_ratio}")
    if W < 1 or W % cfg.spatial_ratio:
        problems.append(f"W = {W} is not divisible by spatial_ratio={cfg.spatial_ratio}")
    if problems:
        raise ShapeError("invalid video shape: " + "; ".join(problems))


@lru_cache(maxsize=None)
def _mixing_matrix_np(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    # fix column signs so the factorization is unique
    q = q * np.sign(np.diag(r))[None, :]
    q.setflags(write=False)
    return q


def mixing_matrix(cfg: CodecConfig, dtype=torch.float64) -> Tensor:
    """Orthonormal ``c x c`` matrix; latent = patch @ M.T."""
    return torch.from_numpy(np.array(_mixing_matrix_np(cfg.latent_channels, cfg.seed))).to(dtype)


def encode(video: Tensor, cfg: CodecConfig) -> Tensor:
    if video.ndim < 4:
        raise ShapeError(f"expected (..., T, H, W, C) video, got shape {tuple(video.shape)}")
    *lead, T, H, W, ch = video.shape
    if ch != cfg.channels:
        raise ShapeError(f"video has {ch} channels but codec expects {cfg.channels}")
    check_video_shape(T, H, W, cfg)
    if not torch.isfinite(video).all():
        raise ValueError("video contains non-finite values")
    r, s = cfg.temporal_ratio, cfg.spatial_ratio
    t, h, w = (T - 1) // r + 1, H // s, W // s
    pad = video.new_zeros((*lead, r - 1, H, W, ch))
    x = torch.cat([pad, video], dim=-4)
    x = x.reshape(*lead, t, r, h, s, w, s, ch)
    n = len(lead)
    # (..., t, h, w, r, s, s, ch)
    x = x.permute(*range(n), n, n + 2, n + 4, n + 1, n + 3, n + 5, n + 6)
    x = x.reshape(*lead, t, h, w, cfg.latent_channels)
    return x @ mixing_matrix(cfg, video.dtype).T


def decode(latent: Tensor, cfg: CodecConfig) -> Tensor:
    if latent.ndim < 4 or latent.shape[-1] != cfg.latent_channels:
        raise ShapeError(
            f"expected (..., t, h, w, {cfg.latent_channels}) latent, got shape {tuple(latent.shape)}"
        )
    *lead, t, h, w, _ = latent.shape
    r, s, ch = cfg.temporal_ratio, cfg.spatial_ratio, cfg.channels
    x = latent @ mixing_matrix(cfg, latent.dtype)
    x = x.reshape(*lead, t, h, w, r, s, s, ch)
    n = len(lead)
    # back to (..., t, r, h, s, w, s, ch)
    x = x.permute(*range(n), n, n + 3, n + 1, n + 4, n + 2, n + 5, n + 6)
    x = x.reshape(*lead, t * r, h * s, w * s, ch)
    return x[..., r - 1 :, :, :, :]
