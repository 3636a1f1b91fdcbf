"""Flow-matching training for both stages.

Stage II learns the constant displacement field from degraded latents to
clean high-resolution latents; Stage I uses the same objective with Gaussian
noise as the source and low-resolution latents as the target.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from . import codec as codec_mod
from .checkpoint import load_tensors, save_tensors
from .codec import CodecConfig
from .degrade import NoiseSchedule, PixelDegradeConfig, TrainPair, make_train_pair, stack_pairs
from .dit import NULL_COND, DiT, DiTConfig, LoRASpec, apply_lora, build_model, trainable_parameters

log = logging.getLogger(__name__)

PairSampler = Callable[[np.random.Generator, int], TrainPair]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 8
    lr: float = 4e-5
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    cond_dropout: float = 0.1
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0
    divergence_loss: float = 1e4
    # "constant", or "cosine" decay to zero over ``iterations``
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    def lr_at(self, iteration: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        frac = min(iteration, self.iterations) / max(self.iterations, 1)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# reference recipe, kept for documentation; never run at toy scale
REFERENCE_STAGE1 = TrainConfig(iterations=50_000, batch_size=32)
REFERENCE_STAGE2 = TrainConfig(iterations=25_000 + 30_000 + 5_000, batch_size=64)
REFERENCE_STAGE1_LORA = LoRASpec(rank=128, alpha=128.0)


@dataclass
class TrainState:
    model: DiT
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    iteration: int = 0
    loss_history: list[float] = field(default_factory=list)


def make_state(model: DiT, hyper: TrainConfig) -> TrainState:
    opt = torch.optim.AdamW(
        trainable_parameters(model),
        lr=hyper.lr,
        betas=tuple(hyper.betas),
        eps=hyper.eps,
        weight_decay=hyper.weight_decay,
    )
    return TrainState(model=model, optimizer=opt, rng=np.random.default_rng(hyper.seed))


def fm_loss(model: DiT, pair: TrainPair, t: Tensor) -> Tensor:
    """Mean squared error between the predicted field and ``z_hr - z_lr`` at ``z_t``."""
    t = torch.as_tensor(t, dtype=pair.z_lr.dtype)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("t must lie in [0, 1]")
    tb = t.reshape(-1, *([1] * (pair.z_lr.ndim - 1)))
    z_t = (1 - tb) * pair.z_lr + tb * pair.z_hr
    target = pair.z_hr - pair.z_lr
    pred = model(z_t, t, pair.noise_step, pair.cond)
    return torch.mean((pred - target) ** 2)


def fm_loss_and_grad(model: DiT, pair: TrainPair, t: Tensor) -> tuple[float, dict[str, Tensor]]:
    model.zero_grad(set_to_none=True)
    loss = fm_loss(model, pair, t)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite flow-matching loss {loss.item()}")
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters() if p.grad is not None}
    return loss.item(), grads


def optimizer_step(state: TrainState, grads: dict[str, Tensor] | None, hyper: TrainConfig) -> TrainState:
    """Clip the global gradient norm and take one AdamW step.

    ``grads`` maps parameter names to gradients; ``None`` uses the ``.grad``
    already accumulated on the parameters.
    """
    params = dict(state.model.named_parameters())
    if grads is not None:
        for name, g in grads.items():
            params[name].grad = g.detach().clone()
    trainable = trainable_parameters(state.model)
    if hyper.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(trainable, hyper.grad_clip)
    if hyper.lr_schedule != "constant":
        for group in state.optimizer.param_groups:
            group["lr"] = hyper.lr_at(state.iteration)
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.iteration += 1
    return state


def drop_conditions(cond: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    drop = torch.from_numpy(rng.random(cond.shape[0]) < p)
    return torch.where(drop, torch.full_like(cond, NULL_COND), cond)


def train_loop(
    state: TrainState,
    sampler: PairSampler,
    hyper: TrainConfig,
    iterations: int | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    metadata: dict | None = None,
) -> TrainState:
    iterations = hyper.iterations if iterations is None else iterations
    model = state.model
    model.train()
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    start = time.perf_counter()
    try:
        for _ in range(iterations):
            pair = sampler(state.rng, hyper.batch_size)
            t = torch.from_numpy(state.rng.uniform(0.0, 1.0, size=hyper.batch_size)).to(pair.z_lr.dtype)
            pair.cond = drop_conditions(pair.cond, hyper.cond_dropout, state.rng)
            loss = fm_loss(model, pair, t)
            value = loss.item()
            if not np.isfinite(value) or value > hyper.divergence_loss:
                if checkpoint_dir is not None:
                    save_state(Path(checkpoint_dir) / "diverged.ckpt", state, metadata)
                raise TrainingDiverged(
                    f"loss {value} at iteration {state.iteration} exceeds the divergence guard", state
                )
            loss.backward()
            optimizer_step(state, None, hyper)
            state.loss_history.append(value)
            if log_fh and (state.iteration % hyper.log_every == 0 or state.iteration == 1):
                record = {
                    "iteration": state.iteration,
                    "loss": value,
                    "lr": state.optimizer.param_groups[0]["lr"],
                    "wall_time": round(time.perf_counter() - start, 3),
                }
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if checkpoint_dir is not None and hyper.checkpoint_every and state.iteration % hyper.checkpoint_every == 0:
                save_state(Path(checkpoint_dir) / f"iter{state.iteration:06d}.ckpt", state, metadata)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return state


# ---------------------------------------------------------------- samplers


def stage2_sampler(
    clips_hr: Tensor,
    conds: Tensor,
    codec_cfg: CodecConfig,
    pixel_cfg: PixelDegradeConfig,
    sched: NoiseSchedule,
    step_range: tuple[int, int],
) -> PairSampler:
    def sample(rng: np.random.Generator, batch: int) -> TrainPair:
        idx = rng.integers(len(clips_hr), size=batch)
        return stack_pairs(
            [
                make_train_pair(clips_hr[i], int(conds[i]), step_range, codec_cfg, pixel_cfg, sched, rng)
                for i in idx
            ]
        )

    return sample


def stage1_sampler(clips_lr: Tensor, conds: Tensor, codec_cfg: CodecConfig) -> PairSampler:
    targets = codec_mod.encode(clips_lr, codec_cfg)

    def sample(rng: np.random.Generator, batch: int) -> TrainPair:
        idx = torch.from_numpy(rng.integers(len(targets), size=batch))
        z = targets[idx]
        noise = torch.from_numpy(rng.standard_normal(tuple(z.shape))).to(z.dtype)
        return TrainPair(z_lr=noise, z_hr=z, cond=conds[idx].clone(), noise_step=torch.zeros(batch, dtype=torch.long))

    return sample


def linear_task_sampler(latent_shape: tuple[int, ...], mix: Tensor, num_classes: int = 1) -> PairSampler:
    """Pairs with ``z_hr = z_lr @ mix.T`` per token, ``z_lr`` standard normal."""

    def sample(rng: np.random.Generator, batch: int) -> TrainPair:
        z = torch.from_numpy(rng.standard_normal((batch, *latent_shape))).to(torch.float32)
        cond = torch.from_numpy(rng.integers(num_classes, size=batch))
        return TrainPair(z_lr=z, z_hr=z @ mix.T, cond=cond, noise_step=torch.zeros(batch, dtype=torch.long))

    return sample


def train_stage2(
    clips_hr: Tensor,
    conds: Tensor,
    model: DiT,
    hyper: TrainConfig,
    step_range: tuple[int, int],
    codec_cfg: CodecConfig = CodecConfig(),
    pixel_cfg: PixelDegradeConfig = PixelDegradeConfig(),
    sched: NoiseSchedule = NoiseSchedule(),
    iterations: int | None = None,
    **loop_kw,
) -> TrainState:
    sampler = stage2_sampler(clips_hr, conds, codec_cfg, pixel_cfg, sched, step_range)
    return train_loop(make_state(model, hyper), sampler, hyper, iterations, **loop_kw)


def train_stage1(
    clips_lr: Tensor,
    conds: Tensor,
    model: DiT,
    hyper: TrainConfig,
    codec_cfg: CodecConfig = CodecConfig(),
    lora: LoRASpec | None = None,
    iterations: int | None = None,
    **loop_kw,
) -> TrainState:
    if lora is not None:
        model = apply_lora(model, lora)
    sampler = stage1_sampler(clips_lr, conds, codec_cfg)
    return train_loop(make_state(model, hyper), sampler, hyper, iterations, **loop_kw)


@torch.no_grad()
def validation_loss(model: DiT, sampler: PairSampler, batches: int, batch_size: int, seed: int = 1234) -> float:
    """Mean loss over a fixed, seed-determined set of pairs and flow times."""
    rng = np.random.default_rng(seed)
    model.eval()
    total = 0.0
    for _ in range(batches):
        pair = sampler(rng, batch_size)
        t = torch.from_numpy(rng.uniform(0.0, 1.0, size=batch_size)).to(pair.z_lr.dtype)
        total += fm_loss(model, pair, t).item()
    return total / batches


# ---------------------------------------------------------------- persistence


def save_state(path: str | Path, state: TrainState, metadata: dict | None = None) -> None:
    tensors = {f"model/{k}": v for k, v in state.model.state_dict().items()}
    names = {id(p): n for n, p in state.model.named_parameters()}
    step_counts = {}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            tensors[f"optim/{name}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
            step_counts[name] = float(st["step"])
    meta = {
        **(metadata or {}),
        "dit": state.model.cfg.to_dict(),
        "iteration": state.iteration,
        "rng_state": state.rng.bit_generator.state,
        "optim_steps": step_counts,
        "loss_history": state.loss_history,
    }
    save_tensors(path, tensors, meta)


def load_model(path: str | Path) -> tuple[DiT, dict]:
    tensors, meta = load_tensors(path)
    model = build_model(DiTConfig.from_dict(meta["dit"]))
    state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    model.eval()
    return model, meta


def load_state(path: str | Path, hyper: TrainConfig) -> TrainState:
    tensors, meta = load_tensors(path)
    model, _ = load_model(path)
    state = make_state(model, hyper)
    for name, p in model.named_parameters():
        key = f"optim/{name}/exp_avg"
        if key in tensors:
            state.optimizer.state[p] = {
                "step": torch.tensor(meta["optim_steps"][name]),
                "exp_avg": tensors[key].clone(),
                "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].clone(),
            }
    state.rng.bit_generator.state = meta["rng_state"]
    state.iteration = meta["iteration"]
    state.loss_history = list(meta["loss_history"])
    model.train()
    return state


def hyper_dict(hyper: TrainConfig) -> dict:
    return asdict(hyper)
