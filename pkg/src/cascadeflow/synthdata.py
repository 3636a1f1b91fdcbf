"""Procedural textured-shape clips with paired resolutions.

Scenes are defined in normalized image coordinates so the same spec can be
rendered on any grid. Speeds are measured in pixels per frame of a 32-pixel
reference grid.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .resample import resize

SHAPES = ("disk", "square", "bar")
TEXTURES = ("low", "mid", "high")
DIRECTIONS = 8
NUM_CLASSES = len(SHAPES) * len(TEXTURES) * DIRECTIONS

# grating frequency in cycles per image width
TEXTURE_CYCLES = {"low": 2.0, "mid": 5.0, "high": 10.0}
REFERENCE_GRID = 32
SHAPE_RADIUS = 0.24
GRATING_AMPLITUDE = 0.35


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    texture: str
    direction: int
    speed: float
    background: float
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; expected one of {TEXTURES}")
        if not 0 <= self.direction < DIRECTIONS:
            raise ValueError(f"direction must be in [0, {DIRECTIONS}), got {self.direction}")
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")
        if not -1.0 <= self.background <= 1.0:
            raise ValueError(f"background must lie in [-1, 1], got {self.background}")

    @property
    def condition(self) -> int:
        return condition_index(self.shape, self.texture, self.direction)


def condition_index(shape: str, texture: str, direction: int) -> int:
    return (SHAPES.index(shape) * len(TEXTURES) + TEXTURES.index(texture)) * DIRECTIONS + direction


def condition_parts(index: int) -> tuple[str, str, int]:
    if not 0 <= index < NUM_CLASSES:
        raise ValueError(f"condition index {index} outside [0, {NUM_CLASSES})")
    shape_tex, direction = divmod(index, DIRECTIONS)
    shape, tex = divmod(shape_tex, len(TEXTURES))
    return SHAPES[shape], TEXTURES[tex], direction


def random_spec(rng: np.random.Generator, seed: int | None = None) -> SceneSpec:
    return SceneSpec(
        shape=SHAPES[int(rng.integers(len(SHAPES)))],
        texture=TEXTURES[int(rng.integers(len(TEXTURES)))],
        direction=int(rng.integers(DIRECTIONS)),
        speed=float(rng.uniform(0.0, 1.5)),
        background=float(rng.uniform(-0.5, 0.5)),
        seed=int(rng.integers(2**31)) if seed is None else seed,
    )


def _signed_distance(shape: str, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    r = SHAPE_RADIUS
    if shape == "disk":
        return np.sqrt(dx**2 + dy**2) - r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - 0.85 * r
    return np.maximum(np.abs(dx) - 1.4 * r, np.abs(dy) - 0.45 * r)


def render(spec: SceneSpec, T: int, H: int, W: int) -> Tensor:
    """Render a ``(T, H, W, 1)`` float32 clip with values in [-1, 1]."""
    jitter = np.random.default_rng(spec.seed).uniform(-0.08, 0.08, size=2)
    angle = 2 * math.pi * spec.direction / DIRECTIONS
    velocity = spec.speed / REFERENCE_GRID * np.array([math.cos(angle), math.sin(angle)])
    theta = math.pi / 4 + SHAPES.index(spec.shape) * math.pi / 3
    cycles = TEXTURE_CYCLES[spec.texture]

    xs = (np.arange(W) + 0.5) / W
    ys = (np.arange(H) + 0.5) / H
    gx, gy = np.meshgrid(xs, ys)
    contrast = 0.5 if spec.background < 0 else -0.5
    base = spec.background + contrast

    frames = np.empty((T, H, W), dtype=np.float64)
    for f in range(T):
        cx, cy = 0.5 + jitter + velocity * (f - (T - 1) / 2)
        dx, dy = gx - cx, gy - cy
        # antialiased edge one pixel wide
        mask = np.clip(0.5 - _signed_distance(spec.shape, dx, dy) * max(H, W), 0.0, 1.0)
        phase = 2 * math.pi * cycles * (dx * math.cos(theta) + dy * math.sin(theta))
        inside = base + GRATING_AMPLITUDE * np.cos(phase)
        frames[f] = spec.background + mask * (inside - spec.background)
    return torch.from_numpy(np.clip(frames, -1.0, 1.0)).to(torch.float32)[..., None]


def downsample(video: Tensor, factor: int) -> Tensor:
    H, W = video.shape[-3], video.shape[-2]
    if H % factor or W % factor:
        raise ValueError(f"grid {H}x{W} not divisible by {factor}")
    return resize(video, H // factor, W // factor).clamp(-1.0, 1.0)


@dataclass(frozen=True)
class Resolutions:
    T: int = 5
    hr: tuple[int, int] = (32, 32)
    lr_factor: int = 2

    @property
    def lr(self) -> tuple[int, int]:
        return (self.hr[0] // self.lr_factor, self.hr[1] // self.lr_factor)


@dataclass
class ClipSet:
    """In-memory clips stacked along a leading axis."""

    ids: list[str]
    specs: list[SceneSpec]
    hr: Tensor
    lr: Tensor

    @property
    def conds(self) -> Tensor:
        return torch.tensor([s.condition for s in self.specs], dtype=torch.long)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx: list[int]) -> "ClipSet":
        return ClipSet(
            ids=[self.ids[i] for i in idx],
            specs=[self.specs[i] for i in idx],
            hr=self.hr[idx],
            lr=self.lr[idx],
        )


def make_specs(n: int, seed: int) -> list[SceneSpec]:
    if n < 1:
        raise ValueError(f"need n >= 1 clips, got {n}")
    rng = np.random.default_rng(seed)
    return [random_spec(rng) for _ in range(n)]


def build_clips(specs: list[SceneSpec], res: Resolutions = Resolutions(), ids: list[str] | None = None) -> ClipSet:
    hr = torch.stack([render(s, res.T, *res.hr) for s in specs])
    lr = downsample(hr, res.lr_factor)
    ids = ids or [f"clip{i:05d}" for i in range(len(specs))]
    return ClipSet(ids=ids, specs=list(specs), hr=hr, lr=lr)


def split_ids(n: int, split_seed: int, val_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    order = np.random.default_rng(split_seed + 1).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def make_dataset(
    n: int,
    split_seed: int,
    res: Resolutions = Resolutions(),
    out_dir: str | Path | None = None,
    val_fraction: float = 0.2,
) -> list[dict]:
    """Render ``n`` specs at both resolutions; optionally persist clips and manifest.

    Returns manifest rows (one per clip and resolution).
    """
    from .checkpoint import save_tensors

    specs = make_specs(n, split_seed)
    clips = build_clips(specs, res)
    train, val = split_ids(n, split_seed, val_fraction)
    split_of = {i: "train" for i in train} | {i: "val" for i in val}
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "clips").mkdir(parents=True, exist_ok=True)
    for i, (cid, spec) in enumerate(zip(clips.ids, clips.specs)):
        for tag, video in (("hr", clips.hr[i]), ("lr", clips.lr[i])):
            rel = f"clips/{cid}_{tag}.ckpt"
            meta = {"id": cid, "spec": asdict(spec), "resolution": tag}
            if out is not None:
                try:
                    save_tensors(out / rel, {"video": video}, meta)
                except OSError as exc:
                    raise OSError(f"failed writing clip {out / rel}: {exc}") from exc
            rows.append(
                {
                    "id": cid,
                    "path": rel,
                    "condition": spec.condition,
                    "resolution": "x".join(str(d) for d in video.shape[:3]),
                    "tier": tag,
                    "split": split_of[i],
                    "hash": tensor_hash(video),
                    "spec": asdict(spec),
                }
            )
    if out is not None:
        write_manifest(out / "manifest.jsonl", rows)
    return rows


def tensor_hash(x: Tensor) -> str:
    data = x.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
    return hashlib.sha256(data).hexdigest()


def write_manifest(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing manifest {path}: {exc}") from exc


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"failed reading manifest {path}: {exc}") from exc


def load_clipset(manifest_path: str | Path, split: str | None = None) -> ClipSet:
    """Load the clips of a manifest back into memory, verifying their hashes."""
    from .checkpoint import load_tensors

    root = Path(manifest_path).parent
    rows = [r for r in read_manifest(manifest_path) if split is None or r["split"] == split]
    by_id: dict[str, dict] = {}
    for row in rows:
        tensors, _ = load_tensors(root / row["path"])
        video = tensors["video"]
        if tensor_hash(video) != row["hash"]:
            raise ValueError(f"clip {row['path']} does not match its manifest hash")
        by_id.setdefault(row["id"], {"spec": SceneSpec(**row["spec"])})[row["tier"]] = video
    ids = sorted(by_id)
    return ClipSet(
        ids=ids,
        specs=[by_id[i]["spec"] for i in ids],
        hr=torch.stack([by_id[i]["hr"] for i in ids]),
        lr=torch.stack([by_id[i]["lr"] for i in ids]),
    )
