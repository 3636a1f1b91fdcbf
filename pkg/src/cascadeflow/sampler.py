"""Few-step ODE sampling with classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from . import codec as codec_mod
from .codec import CodecConfig
from .degrade import NoiseSchedule, deg_latent
from .dit import NULL_COND

Field = Callable[[Tensor, float], Tensor]

# inference defaults of the reference recipe and its recommended ranges
DEFAULT_NFE = 4
DEFAULT_CFG = 13.0
DEFAULT_NOISE = 675
RECOMMENDED = {"nfe": (4, 6), "cfg": (10.0, 13.0), "noise": (650, 750)}
STAGE1_NFE = 50


class SamplingError(FloatingPointError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class SampleConfig:
    nfe: int = DEFAULT_NFE
    cfg_scale: float = DEFAULT_CFG
    noise_step: int = DEFAULT_NOISE
    seed: int = 0
    solver: str = "euler"

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError(f"nfe must be >= 1, got {self.nfe}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.solver not in ("euler", "heun"):
            raise ValueError(f"solver must be 'euler' or 'heun', got {self.solver!r}")

    @property
    def evaluations_per_step(self) -> int:
        return 1 if self.cfg_scale == 1.0 else 2

    @property
    def function_evaluations(self) -> int:
        per_step = self.evaluations_per_step * (2 if self.solver == "heun" else 1)
        return self.nfe * per_step


def euler_sample(field: Field, z0: Tensor, nfe: int, t0: float = 0.0, solver: str = "euler") -> Tensor:
    """Integrate ``dz/dt = field(z, t)`` from ``t0`` to 1 in ``nfe`` uniform steps.

    With ``solver="heun"`` each step adds a trapezoidal correction (two field
    evaluations per step).
    """
    if nfe < 1:
        raise ValueError(f"nfe must be >= 1, got {nfe}")
    if not torch.isfinite(z0).all():
        raise SamplingError(0, "initial state is not finite")
    dt = (1.0 - t0) / nfe
    z = z0
    for step in range(nfe):
        t = t0 + step * dt
        v = field(z, t)
        if solver == "heun":
            z_pred = z + v * dt
            v = 0.5 * (v + field(z_pred, min(t + dt, 1.0)))
        z = z + v * dt
        if not torch.isfinite(z).all():
            raise SamplingError(step, "state became non-finite")
    return z


def cfg_field(model, z: Tensor, t: float, noise_step, cond, s: float) -> Tensor:
    """Guided field ``v_u + s * (v_c - v_u)``; a single evaluation when ``s == 1``."""
    v_c = model(z, t, noise_step, cond)
    if s == 1.0:
        return v_c
    v_u = model(z, t, noise_step, NULL_COND)
    return v_u + s * (v_c - v_u)


def guided(model, noise_step, cond, s: float) -> Field:
    def field(z: Tensor, t: float) -> Tensor:
        return cfg_field(model, z, t, noise_step, cond, s)

    return field


@dataclass
class Enhanced:
    video: Tensor
    latent: Tensor
    nfe: int


@torch.no_grad()
def enhance(
    model,
    x_lr: Tensor,
    cfg: SampleConfig,
    cond,
    codec_cfg: CodecConfig = CodecConfig(),
    sched: NoiseSchedule = NoiseSchedule(),
) -> Enhanced:
    """Encode, noise, integrate the transport field, decode.

    ``x_lr`` is a batch ``(B, T, H, W, C)`` already resized to the target grid.
    """
    if x_lr.ndim != 5:
        raise ValueError(f"expected (B, T, H, W, C) video batch, got {tuple(x_lr.shape)}")
    sched.check_step(cfg.noise_step)
    rng = np.random.default_rng(cfg.seed)
    z = codec_mod.encode(x_lr, codec_cfg)
    z = deg_latent(z, cfg.noise_step, sched, rng)
    calls = 0

    def counted(z_, t_, n_, c_):
        nonlocal calls
        calls += 1
        return model(z_, t_, n_, c_)

    z_hr = euler_sample(guided(counted, cfg.noise_step, cond, cfg.cfg_scale), z, cfg.nfe, solver=cfg.solver)
    video = codec_mod.decode(z_hr, codec_cfg).clamp(-1.0, 1.0)
    return Enhanced(video=video, latent=z_hr, nfe=calls)


@torch.no_grad()
def generate(
    model,
    latent_shape: tuple[int, ...],
    cond,
    cfg: SampleConfig,
    codec_cfg: CodecConfig = CodecConfig(),
    start: Tensor | None = None,
    anchor_t: float = 0.0,
) -> Tensor:
    """Stage-I sampling from Gaussian noise to a low-resolution video batch.

    With ``start`` (clean latents) the trajectory begins at ``anchor_t`` on the
    straight path between fresh noise and ``start`` instead of at pure noise.
    """
    rng = np.random.default_rng(cfg.seed)
    noise = torch.from_numpy(rng.standard_normal(tuple(latent_shape))).to(torch.float32)
    z0 = noise if start is None else (1 - anchor_t) * noise + anchor_t * start
    field = guided(model, 0, cond, cfg.cfg_scale)
    z = euler_sample(field, z0, cfg.nfe, t0=anchor_t if start is not None else 0.0, solver=cfg.solver)
    return codec_mod.decode(z, codec_cfg).clamp(-1.0, 1.0)


@torch.no_grad()
def trajectory_velocities(field: Field, z0: Tensor, steps: int = 16) -> list[Tensor]:
    z, out = z0, []
    for k in range(steps):
        v = field(z, k / steps)
        out.append(v)
        z = z + v / steps
    return out


def straightness(field: Field, z0: Tensor, steps: int = 16) -> float:
    """Mean pairwise velocity change along the trajectory over the mean speed."""
    vs = trajectory_velocities(field, z0, steps)
    norms = [v.norm().item() for v in vs]
    diffs = [(vs[i] - vs[j]).norm().item() for i in range(len(vs)) for j in range(i + 1, len(vs))]
    return float(np.mean(diffs) / max(np.mean(norms), 1e-12))
