"""End-to-end orchestration: data, training, two-stage sampling, evaluation, sweeps.

Every artifact lands in one run directory (``--out``, else ``$CASCADEFLOW_OUT``,
else ``./runs``) guarded by a lock file. Checkpoints carry a stage tag plus the
codec and noise-schedule snapshot they were trained with, and loading a
checkpoint against an incompatible config is rejected before any compute.
"""

from __future__ import annotations

import json
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import __version__
from .checkpoint import load_tensors, save_tensors
from .codec import encode
from .config import RunConfig, canonical_json, dump_text, to_plain
from .degrade import deg_pixel
from .dit import DiT, apply_lora, build_model
from .flowmatch import TrainState, load_model, make_state, save_state, stage1_sampler, stage2_sampler, train_loop
from .metrics import hf_energy_ratio, psnr
from .resample import upsample
from .sampler import RECOMMENDED, SampleConfig, enhance, generate
from .synthdata import ClipSet, load_clipset, make_dataset

OUT_ENV = "CASCADEFLOW_OUT"
DEFAULT_ROOT = "runs"
SWEEP_AXES = {
    "nfe": (1, 2, 3, 4, 5, 6, 7, 8),
    "cfg": (1.0, 4.0, 7.0, 10.0, 13.0, 16.0, 19.0, 22.0),
    "noise": (650, 675, 700, 725, 750),
}
_SAMPLE_FIELD = {"nfe": "nfe", "cfg": "cfg_scale", "noise": "noise_step"}


class CheckpointMismatch(ValueError):
    """A checkpoint does not fit the stage, codec or schedule of the run config."""


class LockHeld(RuntimeError):
    """Another process owns the output directory."""


def output_dir(out: str | Path | None = None) -> Path:
    if out is not None:
        return Path(out)
    return Path(os.environ.get(OUT_ENV) or DEFAULT_ROOT)


@contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeld(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def versions() -> dict:
    return {
        "cascadeflow": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
    }


def reproducibility_record(cfg: RunConfig, command: str, argv: list[str] | None = None, **extra) -> dict:
    """Everything needed to re-run a command: argv, full config text and its hash."""
    return {
        "command": command,
        "argv": list(argv or []),
        "config_hash": cfg.hash(),
        "config": dump_text(cfg),
        "seeds": {"run": cfg.seed, "sample": cfg.sample.seed, "split": cfg.data.split_seed, "eval": cfg.eval.seed},
        "versions": versions(),
        **extra,
    }


def write_record(out: Path, record: dict) -> Path:
    path = out / "records" / f"{record['command']}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- data


def gen_data(cfg: RunConfig, data_dir: Path) -> Path:
    make_dataset(cfg.data.n_clips, cfg.data.split_seed, cfg.data.resolutions, data_dir, cfg.data.val_fraction)
    return data_dir / "manifest.jsonl"


def load_split(data_dir: Path, split: str) -> ClipSet:
    manifest = Path(data_dir) / "manifest.jsonl"
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}; run gen-data first")
    return load_clipset(manifest, split)


# ---------------------------------------------------------------- checkpoints


def stage_metadata(cfg: RunConfig, stage: int) -> dict:
    d = cfg.data
    grid = (d.T, d.height, d.width) if stage == 2 else (d.T, d.height // d.lr_factor, d.width // d.lr_factor)
    return {
        "stage": stage,
        "codec": to_plain(cfg.codec),
        "schedule": to_plain(cfg.latent.schedule),
        "resolution": list(grid),
        "config_hash": cfg.hash(),
    }


def check_compatible(meta: dict, cfg: RunConfig, stage: int, path: str | Path = "<checkpoint>") -> None:
    if meta.get("stage") != stage:
        raise CheckpointMismatch(f"{path}: expected a stage-{stage} checkpoint, found stage {meta.get('stage')}")
    if meta.get("codec") != to_plain(cfg.codec):
        raise CheckpointMismatch(f"{path}: codec {meta.get('codec')} differs from config {to_plain(cfg.codec)}")
    if stage == 2 and meta.get("schedule") != to_plain(cfg.latent.schedule):
        raise CheckpointMismatch(
            f"{path}: noise schedule {meta.get('schedule')} differs from config {to_plain(cfg.latent.schedule)}"
        )


def load_stage(path: str | Path, cfg: RunConfig, stage: int) -> DiT:
    model, meta = load_model(path)
    check_compatible(meta, cfg, stage, path)
    return model


def seeded_model(cfg_dit, seed: int) -> DiT:
    torch.manual_seed(seed)
    return build_model(cfg_dit)


def train_stage(
    cfg: RunConfig,
    stage: int,
    clips: ClipSet,
    out: Path | None = None,
    init: DiT | None = None,
    iterations: int | None = None,
) -> TrainState:
    """Train one stage from seed ``cfg.seed`` and optionally persist ``stage{n}.ckpt``.

    ``init`` gives starting weights; with ``stage1.dit.lora`` set those weights
    are frozen and only low-rank adapters are trained.
    """
    sc = cfg.stage1 if stage == 1 else cfg.stage2
    hyper = replace(sc.train, seed=cfg.seed)
    if iterations is not None:
        # the decay horizon follows the run length
        hyper = replace(hyper, iterations=iterations)
    if init is None:
        model = seeded_model(sc.dit, cfg.seed)
    else:
        torch.manual_seed(cfg.seed)
        model = apply_lora(init, sc.dit.lora) if sc.dit.lora is not None and init.cfg.lora is None else init
    if stage == 1:
        sampler = stage1_sampler(clips.lr, clips.conds, cfg.codec)
    else:
        sampler = stage2_sampler(clips.hr, clips.conds, cfg.codec, cfg.pixel, cfg.latent.schedule, cfg.latent.step_range)
    meta = stage_metadata(cfg, stage)
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / f"stage{stage}_train.jsonl"
        log_path.unlink(missing_ok=True)
    state = train_loop(make_state(model, hyper), sampler, hyper, iterations, log_path, out, meta)
    if out is not None:
        save_state(out / f"stage{stage}.ckpt", state, meta)
    return state


# ---------------------------------------------------------------- sampling


def lr_grid(cfg: RunConfig) -> tuple[int, int, int]:
    d = cfg.data
    return d.T, d.height // d.lr_factor, d.width // d.lr_factor


def preview(
    cfg: RunConfig,
    stage1: DiT,
    conds: Tensor,
    seed: int | None = None,
    grid: tuple[int, int, int] | None = None,
    start: Tensor | None = None,
    anchor_t: float = 0.0,
) -> Tensor:
    """Stage-I sample at the low-resolution grid, ``(B, T, h, w, C)``."""
    conds = torch.as_tensor(conds, dtype=torch.long).reshape(-1)
    T, h, w = grid or lr_grid(cfg)
    shape = (len(conds), *cfg.codec.latent_shape(T, h, w))
    sc = SampleConfig(nfe=cfg.preview_nfe, cfg_scale=cfg.preview_cfg, noise_step=0, seed=cfg.seed if seed is None else seed)
    z_start = encode(start, cfg.codec) if start is not None else None
    return generate(stage1, shape, conds, sc, cfg.codec, z_start, anchor_t)


def commit(
    cfg: RunConfig,
    stage2: DiT,
    video_lr: Tensor,
    conds: Tensor,
    sample: SampleConfig | None = None,
    hr: tuple[int, int] | None = None,
):
    """Upsample a preview to the high-resolution grid and run Stage II on it."""
    sample = sample or cfg.sample
    cfg.latent.schedule.check_step(sample.noise_step)
    if stage2.cfg.latent_channels != cfg.codec.latent_channels:
        raise CheckpointMismatch("stage-II model latent channels do not match the codec")
    H, W = hr or (cfg.data.height, cfg.data.width)
    up = upsample(video_lr, H, W)
    return enhance(stage2, up, sample, torch.as_tensor(conds, dtype=torch.long).reshape(-1), cfg.codec, cfg.latent.schedule)


def two_stage_generate(
    cfg: RunConfig, stage1: DiT, stage2: DiT, conds, out: Path | None = None
) -> tuple[Tensor, Tensor]:
    conds = torch.as_tensor(conds, dtype=torch.long).reshape(-1)
    cfg.latent.schedule.check_step(cfg.sample.noise_step)
    lo = preview(cfg, stage1, conds)
    if out is not None:
        save_video(out / "preview.ckpt", lo, conds, cfg, stage=1)
    final = commit(cfg, stage2, lo, conds).video
    if out is not None:
        save_video(out / "final.ckpt", final, conds, cfg, stage=2)
    return lo, final


def save_video(path: Path, video: Tensor, conds: Tensor, cfg: RunConfig, **meta) -> None:
    save_tensors(path, {"video": video}, {"conds": [int(c) for c in conds], "config_hash": cfg.hash(), **meta})


def load_video(path: str | Path) -> tuple[Tensor, list[int]]:
    tensors, meta = load_tensors(path)
    if "video" not in tensors:
        raise ValueError(f"{path} holds no 'video' entry")
    return tensors["video"], list(meta.get("conds", []))


def dump_frames(video: Tensor, directory: Path, prefix: str = "sample") -> list[Path]:
    """Write every frame as an 8-bit binary PGM image."""
    directory.mkdir(parents=True, exist_ok=True)
    v = video if video.ndim == 5 else video[None]
    pix = ((v[..., 0].clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).numpy()
    paths = []
    for b in range(pix.shape[0]):
        for t in range(pix.shape[1]):
            p = directory / f"{prefix}{b:03d}_f{t:02d}.pgm"
            h, w = pix.shape[2:]
            p.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix[b, t].tobytes())
            paths.append(p)
    return paths


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    ids: list[str]
    psnr_final: list[float]
    psnr_input: list[float]
    hf_final: list[float]
    hf_input: list[float]
    hf_target: list[float]
    nfe_calls: int

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_final))

    @property
    def mean_psnr_input(self) -> float:
        return float(np.mean(self.psnr_input))

    @property
    def mean_hf(self) -> float:
        return float(np.mean(self.hf_final))

    @property
    def mean_hf_input(self) -> float:
        return float(np.mean(self.hf_input))

    def summary(self) -> dict:
        return {
            "clips": len(self.ids),
            "psnr": self.mean_psnr,
            "psnr_input": self.mean_psnr_input,
            "psnr_gain": self.mean_psnr - self.mean_psnr_input,
            "hf": self.mean_hf,
            "hf_input": self.mean_hf_input,
            "hf_target": float(np.mean(self.hf_target)),
            "nfe_calls": self.nfe_calls,
        }


def _limit(cfg: RunConfig, clips: ClipSet) -> ClipSet:
    n = cfg.eval.max_clips or len(clips)
    return clips.subset(list(range(min(n, len(clips)))))


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def held_out_inputs(cfg: RunConfig, clips: ClipSet, stage1: DiT | None = None) -> Tensor:
    """High-resolution-grid inputs for Stage II, one per clip and independent of batching.

    With ``stage1`` the input is the upsampled anchored Stage-I preview of each
    clip; without it, the seeded pixel degradation of the clip's HR video.
    """
    H, W = clips.hr.shape[2:4]
    seed = cfg.eval.seed

    def one(i: int) -> Tensor:
        if stage1 is None:
            return deg_pixel(clips.hr[i], cfg.pixel, np.random.default_rng(seed + i))
        lo = preview(
            cfg, stage1, clips.conds[i : i + 1], seed + i, tuple(clips.lr.shape[1:4]), clips.lr[i : i + 1], cfg.eval.anchor_t
        )
        return upsample(lo, H, W)[0]

    return torch.stack(_map(one, range(len(clips)), cfg.workers))


def evaluate(
    cfg: RunConfig,
    stage2: DiT,
    clips: ClipSet,
    inputs: Tensor,
    sample: SampleConfig | None = None,
) -> EvalResult:
    """Enhance each input (clip ``i`` uses seed ``sample.seed + i``) and score against HR."""
    sample = sample or cfg.sample
    cfg.latent.schedule.check_step(sample.noise_step)
    conds = clips.conds

    def one(i: int):
        out = enhance(
            stage2, inputs[i : i + 1], replace(sample, seed=sample.seed + i), conds[i : i + 1], cfg.codec, cfg.latent.schedule
        )
        return out.video[0], out.nfe

    results = _map(one, range(len(clips)), cfg.workers)
    finals = [r[0] for r in results]
    return EvalResult(
        ids=list(clips.ids),
        psnr_final=[psnr(f, clips.hr[i]) for i, f in enumerate(finals)],
        psnr_input=[psnr(inputs[i], clips.hr[i]) for i in range(len(clips))],
        hf_final=[hf_energy_ratio(f) for f in finals],
        hf_input=[hf_energy_ratio(x) for x in inputs],
        hf_target=[hf_energy_ratio(x) for x in clips.hr],
        nfe_calls=results[0][1] if results else 0,
    )


def run_eval(cfg: RunConfig, stage2: DiT, clips: ClipSet, stage1: DiT | None = None) -> EvalResult:
    clips = _limit(cfg, clips)
    return evaluate(cfg, stage2, clips, held_out_inputs(cfg, clips, stage1))


# ---------------------------------------------------------------- sweeps


def is_recommended(axis: str, value) -> bool:
    lo, hi = RECOMMENDED[axis]
    return lo <= value <= hi


def sweep(
    cfg: RunConfig,
    stage2: DiT,
    clips: ClipSet,
    inputs: Tensor,
    axis: str,
    values=None,
) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    values = SWEEP_AXES[axis] if values is None else tuple(values)
    rows = []
    for v in values:
        sample = replace(cfg.sample, **{_SAMPLE_FIELD[axis]: type(getattr(cfg.sample, _SAMPLE_FIELD[axis]))(v)})
        res = evaluate(cfg, stage2, clips, inputs, sample)
        rows.append({"axis": axis, "value": v, "recommended": is_recommended(axis, v), **res.summary()})
    return rows


def format_sweep(rows: list[dict]) -> str:
    """Aligned plain-text table; ``*`` marks the recommended range."""
    if not rows:
        return ""
    axis = rows[0]["axis"].upper()
    cols = [(axis, "value"), ("PSNR", "psnr"), ("input PSNR", "psnr_input"), ("HF ratio", "hf"), ("calls", "nfe_calls")]
    body = []
    for r in rows:
        cells = []
        for _, key in cols:
            v = r[key]
            cells.append(f"{v:.4f}" if isinstance(v, float) and key != "value" else f"{v:g}" if key == "value" else str(v))
        cells[0] = ("* " if r["recommended"] else "  ") + cells[0]
        body.append(cells)
    header = [c[0] for c in cols]
    header[0] = "  " + header[0]
    widths = [max(len(header[j]), *(len(b[j]) for b in body)) for j in range(len(cols))]

    def line(cells):
        return "  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(cells, widths))).rstrip()

    lo, hi = RECOMMENDED[rows[0]["axis"]]
    return "\n".join([line(header), line(["-" * w for w in widths]), *map(line, body), f"* recommended range {lo:g}-{hi:g}"]) + "\n"


def write_sweep(out: Path, rows: list[dict]) -> tuple[Path, Path]:
    axis = rows[0]["axis"]
    txt, jl = out / f"sweep_{axis}.txt", out / f"sweep_{axis}.jsonl"
    txt.write_text(format_sweep(rows), encoding="utf-8")
    with jl.open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(canonical_json(r) + "\n")
    return txt, jl


def eval_record(res: EvalResult) -> dict:
    d = asdict(res)
    d["summary"] = res.summary()
    return d


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
