"""Run configuration: nested frozen dataclasses plus a plain-text override file.

File grammar (UTF-8, one assignment per line)::

    # comment
    section.key = value
    section.sub.key = value   # trailing comments are allowed

Values are JSON literals (``4``, ``1e-3``, ``true``, ``"text"``, ``[0.2, 2.0]``);
a bare word is read as a string and ``none``/``null`` as ``None``. Keys are
dotted paths into :class:`RunConfig`; unknown paths and ill-typed values are
rejected with the offending path in the message.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from contextvars import ContextVar
from dataclasses import dataclass
from pathlib import Path

from .codec import CodecConfig
from .degrade import REFINED_STEP_RANGE, NoiseSchedule, PixelDegradeConfig
from .dit import STAGE1_PRESET, STAGE2_PRESET, DiTConfig, LoRASpec
from .flowmatch import TrainConfig
from .sampler import STAGE1_NFE, SampleConfig
from .synthdata import NUM_CLASSES, Resolutions


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# cross-field checks wait until a whole batch of overrides has been applied
_DEFER: ContextVar[bool] = ContextVar("defer_validation", default=False)


@dataclass(frozen=True)
class DataConfig:
    n_clips: int = 576
    val_fraction: float = 0.125
    split_seed: int = 0
    T: int = 5
    height: int = 32
    width: int = 32
    lr_factor: int = 2

    @property
    def resolutions(self) -> Resolutions:
        return Resolutions(T=self.T, hr=(self.height, self.width), lr_factor=self.lr_factor)


@dataclass(frozen=True)
class LatentDegradeConfig:
    step_min: int = REFINED_STEP_RANGE[0]
    step_max: int = REFINED_STEP_RANGE[1]
    schedule: NoiseSchedule = NoiseSchedule()

    @property
    def step_range(self) -> tuple[int, int]:
        return (self.step_min, self.step_max)


@dataclass(frozen=True)
class StageConfig:
    dit: DiTConfig
    train: TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    """Held-out evaluation inputs.

    With a Stage-I checkpoint, each held-out clip is re-generated from the point
    ``anchor_t`` on the straight path between seeded noise and the clip's own
    low-resolution latent, giving a preview with known ground truth.
    """

    anchor_t: float = 0.5
    max_clips: int = 0
    seed: int = 1234


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    codec: CodecConfig = CodecConfig()
    pixel: PixelDegradeConfig = PixelDegradeConfig()
    latent: LatentDegradeConfig = LatentDegradeConfig()
    stage1: StageConfig = StageConfig(STAGE1_PRESET, TrainConfig())
    stage2: StageConfig = StageConfig(STAGE2_PRESET, TrainConfig())
    sample: SampleConfig = SampleConfig()
    preview_nfe: int = STAGE1_NFE
    preview_cfg: float = 1.0
    eval: EvalConfig = EvalConfig()
    workers: int = 1

    def __post_init__(self):
        if not _DEFER.get():
            validate(self)

    def to_dict(self) -> dict:
        return to_plain(self)

    def hash(self) -> str:
        return config_hash(self)


def validate(cfg: RunConfig) -> None:
    d, c = cfg.data, cfg.codec
    s, r = c.spatial_ratio, c.temporal_ratio
    if (d.T - 1) % r:
        raise ConfigError(f"data.T: T-1 = {d.T - 1} is not divisible by codec.temporal_ratio = {r}")
    lr_h, lr_w = d.height // d.lr_factor, d.width // d.lr_factor
    if lr_h * d.lr_factor != d.height or lr_w * d.lr_factor != d.width:
        raise ConfigError(f"data.lr_factor: {d.lr_factor} does not divide {d.height}x{d.width}")
    for name, stage, (h, w) in (("stage1", cfg.stage1, (lr_h, lr_w)), ("stage2", cfg.stage2, (d.height, d.width))):
        grain = s * stage.dit.patch_size
        if h % grain or w % grain:
            raise ConfigError(
                f"{name}.dit.patch_size: grid {h}x{w} not divisible by codec ratio x patch = {grain}"
            )
        if stage.dit.latent_channels != c.latent_channels:
            raise ConfigError(
                f"{name}.dit.latent_channels: {stage.dit.latent_channels} != codec latent channels {c.latent_channels}"
            )
        if stage.dit.num_classes != NUM_CLASSES:
            raise ConfigError(f"{name}.dit.num_classes: expected {NUM_CLASSES}, got {stage.dit.num_classes}")
    total = cfg.latent.schedule.total_steps
    lo, hi = cfg.latent.step_range
    if not 0 <= lo <= hi < total:
        raise ConfigError(f"latent.step_min/step_max: need 0 <= {lo} <= {hi} < {total}")
    if not 0 <= cfg.sample.noise_step < total:
        raise ConfigError(f"sample.noise_step: {cfg.sample.noise_step} outside [0, {total})")
    if cfg.preview_nfe < 1:
        raise ConfigError(f"preview_nfe: must be >= 1, got {cfg.preview_nfe}")
    if cfg.workers < 1:
        raise ConfigError(f"workers: must be >= 1, got {cfg.workers}")
    if d.n_clips < 2 or not 0.0 < d.val_fraction < 1.0:
        raise ConfigError("data.n_clips must be >= 2 and data.val_fraction in (0, 1)")
    if not 0.0 <= cfg.eval.anchor_t < 1.0:
        raise ConfigError(f"eval.anchor_t: must lie in [0, 1), got {cfg.eval.anchor_t}")


# ---------------------------------------------------------------- plain views


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


def canonical_json(obj) -> str:
    return json.dumps(to_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()


# ---------------------------------------------------------------- overrides

_DEFAULT_SUB = {"lora": LoRASpec}


def parse_value(text: str):
    text = text.strip()
    if text.lower() in ("none", "null"):
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(path: str, current, value, hint=None):
    kind = type(current) if current is not None else hint
    if value is None:
        if current is None or hint is not None:
            return None
        raise ConfigError(f"{path}: None is not allowed here")
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if kind is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if current is not None and current and len(value) != len(current) and path.split(".")[-1] != "targets":
            raise ConfigError(f"{path}: expected {len(current)} entries, got {len(value)}")
        proto = current[0] if current else None
        return tuple(_coerce(f"{path}[{i}]", proto, v, int if proto is None else None) for i, v in enumerate(value))
    raise ConfigError(f"{path}: cannot assign {value!r}")


def _set(obj, keys: list[str], value, path: str):
    if not dataclasses.is_dataclass(obj):
        raise ConfigError(f"{path}: unknown field")
    names = {f.name for f in dataclasses.fields(obj)}
    head = keys[0]
    if head not in names:
        raise ConfigError(f"{path}: unknown field {head!r}")
    current = getattr(obj, head)
    if len(keys) == 1:
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{path}: is a section, assign one of its fields instead")
        hint = tuple if head == "axis_dims" else None
        if head == "lora":
            if value is not None:
                raise ConfigError(f"{path}: only 'none' may be assigned; set {path}.rank to enable")
            new = None
        else:
            new = _coerce(path, current, value, hint)
    else:
        if current is None and head in _DEFAULT_SUB:
            current = _DEFAULT_SUB[head]()
        new = _set(current, keys[1:], value, path)
    try:
        return dataclasses.replace(obj, **{head: new})
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Apply ``{"a.b.c": value}`` assignments, then run the cross-field checks once."""
    keys = sorted(overrides)
    for a, b in zip(keys, keys[1:]):
        if b.startswith(a + "."):
            raise ConfigError(f"{a}: assigned together with its sub-field {b}")
    token = _DEFER.set(True)
    try:
        for path in keys:
            cfg = _set(cfg, path.split("."), overrides[path], path)
    finally:
        _DEFER.reset(token)
    validate(cfg)
    return cfg


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key or any(not part.isidentifier() for part in key.split(".")):
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def _strip_comment(line: str) -> str:
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


def load_config(path: str | Path | None, overrides: dict[str, object] | None = None) -> RunConfig:
    values: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values = parse_text(p.read_text(encoding="utf-8"), str(p))
    values.update(overrides or {})
    return apply_overrides(RunConfig(), values)


def dump_text(cfg: RunConfig) -> str:
    """Render every leaf as a ``path = value`` line; parsing it back gives ``cfg``."""
    lines = []

    def walk(prefix: str, obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            path = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(v):
                walk(path + ".", v)
            else:
                lines.append(f"{path} = {json.dumps(to_plain(v))}".replace("= null", "= none"))

    walk("", cfg)
    return "\n".join(lines) + "\n"
