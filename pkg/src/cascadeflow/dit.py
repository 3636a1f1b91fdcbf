"""Toy video diffusion transformer operating on codec latents.

Latents ``(B, t, h, w, c)`` are split into ``patch_size x patch_size`` spatial
tokens and processed with full attention over all ``t * h/p * w/p`` tokens.
Positions enter either through 3D rotary embeddings on queries/keys or through
fixed sinusoidal tables added to the token embeddings.

Conditioning (flow time + latent-noise step + class) drives adaLN-Zero
modulation in every block.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

NULL_COND = -1
LORA_TARGETS = ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2", "adaln")


class PositionTableExhausted(ValueError):
    """Token grid exceeds the absolute position tables."""


@dataclass(frozen=True)
class LoRASpec:
    rank: int = 4
    alpha: float = 4.0
    targets: tuple[str, ...] = LORA_TARGETS

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def split_axes(dim: int) -> tuple[int, int, int]:
    """Even (t, h, w) split of ``dim``; 1/4 to time, the rest shared by space."""
    d_t = 2 * max(1, round(dim / 8))
    d_h = 2 * ((dim - d_t) // 4)
    d_w = dim - d_t - d_h
    return d_t, d_h, d_w


@dataclass(frozen=True)
class DiTConfig:
    latent_channels: int = 8
    patch_size: int = 2
    layers: int = 4
    dim: int = 64
    heads: int = 4
    pos_mode: str = "rope3d"
    axis_dims: tuple[int, int, int] | None = None
    rope_base: float = 10000.0
    abs_grid: tuple[int, int, int] = (3, 8, 8)
    num_classes: int = 72
    mlp_ratio: int = 4
    lora: LoRASpec | None = None

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.pos_mode not in ("rope3d", "absolute"):
            raise ValueError(f"pos_mode must be 'rope3d' or 'absolute', got {self.pos_mode!r}")
        dims = self.rope_split
        if sum(dims) != self.head_dim or any(d <= 0 or d % 2 for d in dims):
            raise ValueError(f"axis dims {dims} must be positive, even and sum to head_dim={self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def rope_split(self) -> tuple[int, int, int]:
        return tuple(self.axis_dims) if self.axis_dims is not None else split_axes(self.head_dim)

    @property
    def token_dim(self) -> int:
        return self.patch_size**2 * self.latent_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        d = dict(d)
        if d.get("lora") is not None:
            lora = dict(d["lora"])
            lora["targets"] = tuple(lora.get("targets", LORA_TARGETS))
            d["lora"] = LoRASpec(**lora)
        for key in ("axis_dims", "abs_grid"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


# presets standing in for the large low-resolution and small high-resolution models
STAGE1_PRESET = DiTConfig(layers=6, dim=128, heads=4, abs_grid=(3, 4, 4))
STAGE2_PRESET = DiTConfig(layers=4, dim=64, heads=4, abs_grid=(3, 8, 8))


# ---------------------------------------------------------------- positions


def axis_frequencies(d: int, base: float, dtype=torch.float64) -> Tensor:
    return base ** (-torch.arange(0, d, 2, dtype=dtype) / d)


def rope3d_phases(positions: Tensor, cfg: DiTConfig) -> Tensor:
    """Rotation angle for every head-dim pair at integer ``(pt, ph, pw)`` positions.

    ``positions`` has shape ``(..., 3)``; the result has ``(..., head_dim // 2)``.
    Pairs are laid out time first, then height, then width.
    """
    positions = torch.as_tensor(positions)
    if (positions < 0).any():
        raise ValueError("positions must be non-negative")
    pos = positions.to(torch.float64)
    parts = [
        pos[..., a : a + 1] * axis_frequencies(d, cfg.rope_base)
        for a, d in enumerate(cfg.rope_split)
    ]
    return torch.cat(parts, dim=-1)


def apply_rotary(x: Tensor, angles: Tensor) -> Tensor:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` by ``angles[i]``."""
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], dim=-1)
    return out.flatten(-2)


def sincos(pos: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal features ``[sin(pos * w_i), cos(pos * w_i)]``, ``dim`` even."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = pos.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def absolute_table(grid: tuple[int, int, int], dim: int) -> Tensor:
    """Fixed sinusoidal embeddings ``(t, h, w, dim)``, one block of channels per axis."""
    dims = split_axes(dim)
    axes = [sincos(torch.arange(n), d) for n, d in zip(grid, dims)]
    t, h, w = grid
    return torch.cat(
        [
            axes[0][:, None, None, :].expand(t, h, w, -1),
            axes[1][None, :, None, :].expand(t, h, w, -1),
            axes[2][None, None, :, :].expand(t, h, w, -1),
        ],
        dim=-1,
    )


def grid_positions(grid: tuple[int, int, int]) -> Tensor:
    t, h, w = grid
    return torch.stack(
        torch.meshgrid(torch.arange(t), torch.arange(h), torch.arange(w), indexing="ij"), dim=-1
    ).reshape(-1, 3)


def attention_logit(q: Tensor, k: Tensor, pos_q, pos_k, cfg: DiTConfig) -> Tensor:
    """Raw query-key logit for head vectors placed at two grid positions.

    In ``absolute`` mode the per-axis sinusoidal embedding (at head width) is
    added before the dot product, mirroring additive position tables.
    """
    pos_q, pos_k = torch.as_tensor(pos_q), torch.as_tensor(pos_k)
    if cfg.pos_mode == "rope3d":
        qr = apply_rotary(q, rope3d_phases(pos_q, cfg))
        kr = apply_rotary(k, rope3d_phases(pos_k, cfg))
        return (qr * kr).sum(-1)
    hd = q.shape[-1]

    def embed(p):
        return torch.cat([sincos(p[..., a], d) for a, d in enumerate(split_axes(hd))], dim=-1).to(q.dtype)

    return ((q + embed(pos_q)) * (k + embed(pos_k))).sum(-1)


# ---------------------------------------------------------------- layers


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank update ``scale * B @ A``."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if rank < 1 or rank > min(base.in_features, base.out_features):
            raise ValueError(
                f"LoRA rank {rank} must lie in [1, {min(base.in_features, base.out_features)}] "
                f"for a {base.out_features}x{base.in_features} weight"
            )
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = alpha / rank
        dev, dt = base.weight.device, base.weight.dtype
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features, device=dev, dtype=dt))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank, device=dev, dtype=dt))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def effective_weight(self) -> Tensor:
        return self.base.weight + self.scale * self.lora_b @ self.lora_a

    def forward(self, x: Tensor) -> Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_a), self.lora_b)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, angles: Tensor | None) -> Tensor:
        B, N, C = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        if angles is not None:
            q, k = apply_rotary(q, angles), apply_rotary(k, angles)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = MLP(dim, mlp_ratio * dim)
        self.adaln = nn.Linear(dim, 6 * dim)

    def forward(self, x: Tensor, c: Tensor, angles: Tensor | None) -> Tensor:
        s1, g1, a1, s2, g2, a2 = self.adaln(F.silu(c)).chunk(6, dim=-1)
        x = x + a1[:, None, :] * self.attn(modulate(self.norm1(x), s1, g1), angles)
        x = x + a2[:, None, :] * self.mlp(modulate(self.norm2(x), s2, g2))
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.adaln = nn.Linear(dim, 2 * dim)
        self.linear = nn.Linear(dim, out_dim)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        shift, scale = self.adaln(F.silu(c)).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class Embedder(nn.Module):
    """Sinusoidal featurization followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp(sincos(x, self.dim).to(self.mlp[0].weight.dtype))


# ---------------------------------------------------------------- model


def _as_batch(x, B: int, dtype) -> Tensor:
    x = torch.as_tensor(x, dtype=dtype)
    if x.ndim == 0:
        x = x.expand(B)
    if x.shape != (B,):
        raise ValueError(f"expected a scalar or a ({B},) tensor, got shape {tuple(x.shape)}")
    return x


class DiT(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        if cfg.lora is not None:
            raise ValueError("build LoRA models with build_model() or apply_lora()")
        self.cfg = cfg
        self.abs_grid = tuple(cfg.abs_grid)
        C = cfg.dim
        self.patch_embed = nn.Linear(cfg.token_dim, C)
        self.time_embed = Embedder(C)
        self.noise_embed = Embedder(C)
        self.class_embed = nn.Embedding(cfg.num_classes, C)
        self.blocks = nn.ModuleList(Block(C, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.final = FinalLayer(C, cfg.token_dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.class_embed.weight, std=0.02)
        for emb in (self.time_embed, self.noise_embed):
            nn.init.normal_(emb.mlp[0].weight, std=0.02)
            nn.init.normal_(emb.mlp[2].weight, std=0.02)
        # adaLN-Zero: every block starts as identity and the output as zero
        for block in self.blocks:
            nn.init.zeros_(block.adaln.weight)
            nn.init.zeros_(block.adaln.bias)
        nn.init.zeros_(self.final.adaln.weight)
        nn.init.zeros_(self.final.adaln.bias)
        nn.init.zeros_(self.final.linear.weight)
        nn.init.zeros_(self.final.linear.bias)

    def extend_position_tables(self, grid: tuple[int, int, int]) -> None:
        self.abs_grid = tuple(max(a, b) for a, b in zip(self.abs_grid, grid))

    def token_grid(self, z: Tensor) -> tuple[int, int, int]:
        p = self.cfg.patch_size
        return z.shape[1], z.shape[2] // p, z.shape[3] // p

    def check_input(self, z: Tensor) -> None:
        p, c = self.cfg.patch_size, self.cfg.latent_channels
        if z.ndim != 5 or z.shape[-1] != c or z.shape[2] % p or z.shape[3] % p:
            raise ValueError(
                f"expected latent (B, t, h, w, {c}) with h, w divisible by {p}, got {tuple(z.shape)}"
            )
        if not torch.isfinite(z).all():
            raise ValueError("latent input contains non-finite values")

    def conditioning(self, B: int, t, noise_step, cond) -> Tensor:
        dtype = self.patch_embed.weight.dtype
        t = _as_batch(t, B, torch.float64)
        if ((t < 0) | (t > 1)).any():
            raise ValueError("flow time must lie in [0, 1]")
        steps = _as_batch(noise_step, B, torch.long)
        cond = _as_batch(NULL_COND if cond is None else cond, B, torch.long)
        if (cond >= self.cfg.num_classes).any() or (cond < NULL_COND).any():
            raise ValueError(f"condition index outside [-1, {self.cfg.num_classes})")
        c = self.time_embed(t * 1000.0) + self.noise_embed(steps)
        keep = (cond >= 0).to(dtype)[:, None]
        return c + keep * self.class_embed(cond.clamp_min(0))

    def forward(self, z: Tensor, t, noise_step=0, cond=None) -> Tensor:
        self.check_input(z)
        B, T_, h, w, c = z.shape
        p = self.cfg.patch_size
        grid = self.token_grid(z)
        tokens = z.reshape(B, T_, h // p, p, w // p, p, c).permute(0, 1, 2, 4, 3, 5, 6)
        x = self.patch_embed(tokens.reshape(B, -1, self.cfg.token_dim))

        angles = None
        if self.cfg.pos_mode == "rope3d":
            angles = rope3d_phases(grid_positions(grid), self.cfg)
        else:
            if any(g > a for g, a in zip(grid, self.abs_grid)):
                raise PositionTableExhausted(
                    f"token grid {grid} exceeds absolute position tables {self.abs_grid}"
                )
            table = absolute_table(self.abs_grid, self.cfg.dim)[: grid[0], : grid[1], : grid[2]]
            x = x + table.reshape(-1, self.cfg.dim).to(x.dtype)

        cvec = self.conditioning(B, t, noise_step, cond)
        for block in self.blocks:
            x = block(x, cvec, angles)
        out = self.final(x, cvec)
        out = out.reshape(B, T_, h // p, w // p, p, p, c).permute(0, 1, 2, 4, 3, 5, 6)
        return out.reshape(B, T_, h, w, c)


# ---------------------------------------------------------------- LoRA


def lora_targets(model: nn.Module, targets=LORA_TARGETS) -> list[str]:
    names = []
    for name, module in model.named_modules():
        if isinstance(module, nn.Linear) and any(name == t or name.endswith("." + t) for t in targets):
            names.append(name)
    return names


def apply_lora(model: DiT, spec: LoRASpec) -> DiT:
    """Copy of ``model`` with frozen base weights and zero-initialized adapters."""
    if model.cfg.lora is not None:
        raise ValueError("model already carries LoRA adapters")
    out = copy.deepcopy(model)
    for p in out.parameters():
        p.requires_grad_(False)
    for name in lora_targets(out, spec.targets):
        parent_name, _, attr = name.rpartition(".")
        parent = out.get_submodule(parent_name) if parent_name else out
        setattr(parent, attr, LoRALinear(getattr(parent, attr), spec.rank, spec.alpha))
    out.cfg = replace(out.cfg, lora=spec)
    return out


def build_model(cfg: DiTConfig) -> DiT:
    model = DiT(replace(cfg, lora=None))
    if cfg.lora is not None:
        model = apply_lora(model, cfg.lora)
    return model


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in trainable_parameters(model))


def zero_output(model: DiT) -> DiT:
    """Zero the output projection so the predicted field vanishes identically."""
    with torch.no_grad():
        model.final.linear.weight.zero_()
        model.final.linear.bias.zero_()
    return model
