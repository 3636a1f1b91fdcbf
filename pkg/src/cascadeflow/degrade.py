"""Low-quality latent simulation: pixel blur/resize chain plus latent noise mixing."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch
from torch import Tensor

from . import codec as codec_mod
from .codec import CodecConfig
from .resample import gaussian_blur, resize

# step ranges used by the reference training recipe
INITIAL_STEP_RANGE = (600, 900)
REFINED_STEP_RANGE = (650, 750)


@dataclass(frozen=True)
class PixelDegradeConfig:
    sigma_range: tuple[float, float] = (0.2, 2.0)
    factor_range: tuple[float, float] = (2.0, 4.0)
    second_blur_prob: float = 0.5

    def __post_init__(self):
        (s0, s1), (f0, f1) = self.sigma_range, self.factor_range
        if s0 < 0 or s1 < s0:
            raise ValueError(f"bad sigma range {self.sigma_range}")
        if f0 < 1 or f1 < f0:
            raise ValueError(f"bad downscale factor range {self.factor_range}")
        if not 0.0 <= self.second_blur_prob <= 1.0:
            raise ValueError(f"second_blur_prob must lie in [0, 1], got {self.second_blur_prob}")

    @classmethod
    def identity(cls) -> "PixelDegradeConfig":
        return cls(sigma_range=(0.0, 0.0), factor_range=(1.0, 1.0), second_blur_prob=0.0)


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance schedule; step ``s`` applies the first ``s`` variances.

    ``alpha_bar[0] == 1`` exactly, so step 0 leaves a latent untouched.
    """

    total_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    @cached_property
    def variances(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.total_steps, dtype=np.float64)

    @cached_property
    def alpha_bar(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(1.0 - self.variances[:-1])])

    def check_step(self, step: int) -> None:
        if not 0 <= int(step) < self.total_steps:
            raise ValueError(f"noise step {step} outside [0, {self.total_steps})")

    def alpha(self, step: int) -> float:
        self.check_step(step)
        return float(np.sqrt(self.alpha_bar[step]))

    def beta(self, step: int) -> float:
        self.check_step(step)
        return float(np.sqrt(1.0 - self.alpha_bar[step]))

    def mixing(self, step: int) -> tuple[float, float]:
        return self.alpha(step), self.beta(step)


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def deg_pixel(video: Tensor, cfg: PixelDegradeConfig, rng: np.random.Generator) -> Tensor:
    """Blur, shrink by a random factor, resize back, optionally blur again.

    The same random strengths apply to every frame of the clip. Works on a
    single ``(T, H, W, C)`` clip.
    """
    H, W = video.shape[-3], video.shape[-2]
    # draw every random number up front so the stream consumption is fixed
    sigma1 = _uniform(rng, *cfg.sigma_range)
    factor = _uniform(rng, *cfg.factor_range)
    second = bool(rng.random() < cfg.second_blur_prob)
    sigma2 = _uniform(rng, *cfg.sigma_range)

    x = gaussian_blur(video, sigma1)
    h, w = max(1, round(H / factor)), max(1, round(W / factor))
    if (h, w) != (H, W):
        x = resize(resize(x, h, w), H, W)
    if second:
        x = gaussian_blur(x, sigma2)
    return x.clamp(-1.0, 1.0)


def deg_latent(z: Tensor, step: int, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """``alpha_step * z + beta_step * n`` with ``n`` standard normal."""
    alpha, beta = sched.mixing(step)
    noise = torch.from_numpy(rng.standard_normal(tuple(z.shape))).to(z.dtype)
    if beta == 0.0:
        return z.clone()
    return alpha * z + beta * noise


@dataclass
class TrainPair:
    z_lr: Tensor
    z_hr: Tensor
    cond: Tensor
    noise_step: Tensor

    def __post_init__(self):
        if self.z_lr.shape != self.z_hr.shape:
            raise ValueError(
                f"z_lr {tuple(self.z_lr.shape)} and z_hr {tuple(self.z_hr.shape)} differ in shape"
            )


def make_train_pair(
    x_hr: Tensor,
    cond: int,
    step_range: tuple[int, int],
    codec_cfg: CodecConfig,
    pixel_cfg: PixelDegradeConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> TrainPair:
    """Build one training sample from a single high-quality clip ``(T, H, W, C)``."""
    lo, hi = int(step_range[0]), int(step_range[1])
    if lo > hi:
        raise ValueError(f"empty step range {step_range}")
    sched.check_step(lo)
    sched.check_step(hi)
    z_hr = codec_mod.encode(x_hr, codec_cfg)
    x_lq = deg_pixel(x_hr, pixel_cfg, rng)
    step = int(rng.integers(lo, hi + 1))
    z_lr = deg_latent(codec_mod.encode(x_lq, codec_cfg), step, sched, rng)
    return TrainPair(
        z_lr=z_lr,
        z_hr=z_hr,
        cond=torch.tensor(int(cond)),
        noise_step=torch.tensor(step),
    )


def stack_pairs(pairs: list[TrainPair]) -> TrainPair:
    return TrainPair(
        z_lr=torch.stack([p.z_lr for p in pairs]),
        z_hr=torch.stack([p.z_hr for p in pairs]),
        cond=torch.stack([p.cond for p in pairs]).reshape(-1),
        noise_step=torch.stack([p.noise_step for p in pairs]).reshape(-1),
    )
