"""Analytical compute-cost model for full 3D attention DiTs.

Cost of one stage is ``k_attn * N * L * m**2 * C + k_lin * N * L * m * C**2``
with ``m`` latent tokens, ``C`` model width, ``L`` layers and ``N`` function
evaluations. The two constants are fitted to two reported timings.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

# reference wall-clock figures (seconds) for a 5B single-stage model and the
# two cascades at 1080p, 49 frames
REPORTED_SECONDS = {
    "single_stage_270p": 30.0,
    "single_stage_1080p": 2150.0,
    "vanilla_cascade": 571.5,
    "fast_cascade": 102.3,
}

# public CogVideoX block layouts
LARGE_MODEL = {"dim": 3072, "layers": 42}  # 5B
SMALL_MODEL = {"dim": 1920, "layers": 30}  # 2B


@dataclass(frozen=True)
class CostSpec:
    T: int
    H: int
    W: int
    dim: int
    layers: int
    steps: int
    spatial_ratio: int = 8
    temporal_ratio: int = 4
    name: str = ""

    def __post_init__(self):
        for key in ("T", "H", "W", "dim", "layers", "steps", "spatial_ratio", "temporal_ratio"):
            if getattr(self, key) <= 0:
                raise ValueError(f"CostSpec.{key} must be positive, got {getattr(self, key)}")

    @property
    def tokens(self) -> float:
        # real-valued so the scaling laws hold exactly; 270 / 8 is not an integer
        t = (self.T - 1) / self.temporal_ratio + 1
        return t * (self.H / self.spatial_ratio) * (self.W / self.spatial_ratio)


@dataclass(frozen=True)
class CostModel:
    k_attn: float = 1.0
    k_lin: float = 1.0


@dataclass(frozen=True)
class StageCost:
    attention: float
    linear: float

    @property
    def total(self) -> float:
        return self.attention + self.linear


def attention_units(spec: CostSpec) -> float:
    return spec.steps * spec.layers * spec.tokens**2 * spec.dim


def linear_units(spec: CostSpec) -> float:
    return spec.steps * spec.layers * spec.tokens * spec.dim**2


def attn_cost(spec: CostSpec, model: CostModel = CostModel()) -> StageCost:
    return StageCost(model.k_attn * attention_units(spec), model.k_lin * linear_units(spec))


def fit_cost_model(a: CostSpec, seconds_a: float, b: CostSpec, seconds_b: float) -> CostModel:
    """Solve the 2x2 system matching both timings exactly."""
    lhs = np.array(
        [[attention_units(a), linear_units(a)], [attention_units(b), linear_units(b)]], dtype=np.float64
    )
    # column scaling keeps the solve well conditioned
    scale = np.abs(lhs).max(axis=0)
    k = np.linalg.solve(lhs / scale, np.array([seconds_a, seconds_b])) / scale
    return CostModel(k_attn=float(k[0]), k_lin=float(k[1]))


def stage_presets(T: int = 49) -> dict[str, CostSpec]:
    return {
        "large_270p_nfe50": CostSpec(T, 270, 480, steps=50, name="stage I 270p", **LARGE_MODEL),
        "large_1080p_nfe50": CostSpec(T, 1080, 1920, steps=50, name="single 1080p", **LARGE_MODEL),
        "small_1080p_nfe30": CostSpec(T, 1080, 1920, steps=30, name="noise-start 1080p", **SMALL_MODEL),
        "small_1080p_nfe4": CostSpec(T, 1080, 1920, steps=4, name="stage II 1080p", **SMALL_MODEL),
    }


def paradigm_presets(T: int = 49) -> dict[str, list[CostSpec]]:
    s = stage_presets(T)
    return {
        "single_stage_1080p": [s["large_1080p_nfe50"]],
        "vanilla_cascade": [s["large_270p_nfe50"], s["small_1080p_nfe30"]],
        "fast_cascade": [s["large_270p_nfe50"], s["small_1080p_nfe4"]],
    }


def reference_fit(T: int = 49) -> CostModel:
    s = stage_presets(T)
    return fit_cost_model(
        s["large_270p_nfe50"],
        REPORTED_SECONDS["single_stage_270p"],
        s["large_1080p_nfe50"],
        REPORTED_SECONDS["single_stage_1080p"],
    )


def plan_cost(stages: list[CostSpec], model: CostModel) -> dict:
    if not stages:
        raise ValueError("plan_cost needs at least one stage")
    rows = []
    for spec in stages:
        c = attn_cost(spec, model)
        rows.append(
            {
                **asdict(spec),
                "tokens": spec.tokens,
                "attention": c.attention,
                "linear": c.linear,
                "total": c.total,
            }
        )
    return {"stages": rows, "total": sum(r["total"] for r in rows)}


def paradigm_report(model: CostModel | None = None, T: int = 49) -> dict:
    model = model or reference_fit(T)
    out = {"k_attn": model.k_attn, "k_lin": model.k_lin, "plans": {}}
    for name, stages in paradigm_presets(T).items():
        plan = plan_cost(stages, model)
        plan["reported"] = REPORTED_SECONDS.get(name)
        out["plans"][name] = plan
    return out


def format_report(report: dict) -> str:
    lines = [
        f"k_attn={report['k_attn']:.6e}  k_lin={report['k_lin']:.6e}",
        f"{'plan':<20} {'stage':<18} {'tokens':>10} {'NFE':>4} {'predicted_s':>12} {'reported_s':>11}",
    ]
    for name, plan in report["plans"].items():
        for row in plan["stages"]:
            lines.append(
                f"{name:<20} {row['name']:<18} {row['tokens']:>10.0f} {row['steps']:>4d} {row['total']:>12.1f} {'':>11}"
            )
        rep = "-" if plan["reported"] is None else f"{plan['reported']:.1f}"
        lines.append(f"{name:<20} {'TOTAL':<18} {'':>10} {'':>4} {plan['total']:>12.1f} {rep:>11}")
    return "\n".join(lines)
