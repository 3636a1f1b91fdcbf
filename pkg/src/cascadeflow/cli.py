"""Command-line entry point: ``cascadeflow <subcommand> [flags]``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
runtime failures; failures print one ``cascadeflow: error:`` line to stderr.
All inputs (config, checkpoints, datasets) are validated before the output
directory is touched, so a failed invocation leaves no partial outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline as pl
from .checkpoint import CheckpointError
from .config import ConfigError, load_config, parse_value
from .cost import format_report, paradigm_report
from .flowmatch import TrainingDiverged

COMMANDS = ("gen-data", "train-stage1", "train-stage2", "sample", "enhance", "eval", "sweep", "cost")


class UsageError(ValueError):
    pass


def parse_resolution(text: str) -> tuple[int, int, int]:
    try:
        T, H, W = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected TxHxW, got {text!r}") from None
    if min(T, H, W) < 1:
        raise argparse.ArgumentTypeError(f"resolution entries must be positive, got {text!r}")
    return T, H, W


def parse_conds(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascadeflow", description="Two-stage flow-matching video cascade (toy scale).")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="config file of 'section.key = value' lines")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field")
        p.add_argument("--seed", type=int, help="run seed (model init, training and sampling noise)")
        p.add_argument("--out", type=Path, help=f"output directory (default ${pl.OUT_ENV} or ./{pl.DEFAULT_ROOT})")
        return p

    def sampling_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--nfe", type=int, help="function evaluations per sample")
        p.add_argument("--cfg", type=float, help="classifier-free guidance scale")
        p.add_argument("--noise", type=int, help="latent degradation step applied before Stage II")

    p = add("gen-data", "render the synthetic dataset and its manifest")
    p.add_argument("--resolution", type=parse_resolution, help="high-resolution clip grid TxHxW")

    for stage in (1, 2):
        p = add(f"train-stage{stage}", f"train the stage-{'I' if stage == 1 else 'II'} model")
        p.add_argument("--data", type=Path, help="dataset directory (default OUT/data)")
        p.add_argument("--iterations", type=int, help="override train.iterations")
        if stage == 1:
            p.add_argument("--init", "--checkpoint", dest="init", type=Path, help="stage-I checkpoint to adapt")

    p = add("sample", "stage-I preview at low resolution")
    p.add_argument("--checkpoint", "--stage1-checkpoint", dest="checkpoint", type=Path, required=True)
    p.add_argument("--conds", type=parse_conds, default=[0], help="comma-separated condition indices")
    p.add_argument("--resolution", type=parse_resolution, help="preview grid TxHxW")
    p.add_argument("--nfe", type=int, help="stage-I function evaluations (default preview_nfe)")
    p.add_argument("--cfg", type=float, help="stage-I guidance scale")
    p.add_argument("--dump-frames", action="store_true", help="also write PGM frames")

    p = add("enhance", "stage-II enhancement of a preview")
    p.add_argument("--checkpoint", "--stage2-checkpoint", dest="checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, help="preview tensor file (default OUT/preview.ckpt)")
    p.add_argument("--resolution", type=parse_resolution, help="output grid TxHxW")
    p.add_argument("--dump-frames", action="store_true", help="also write PGM frames")
    sampling_flags(p)

    for name, help_ in (("eval", "score stage II on held-out clips"), ("sweep", "sweep one sampling hyperparameter")):
        p = add(name, help_)
        p.add_argument("--stage2-checkpoint", "--checkpoint", dest="stage2", type=Path, required=True)
        p.add_argument("--stage1-checkpoint", dest="stage1", type=Path, help="use anchored stage-I previews as inputs")
        p.add_argument("--data", type=Path, help="dataset directory (default OUT/data)")
        sampling_flags(p)
        if name == "sweep":
            p.add_argument("--axis", choices=sorted(pl.SWEEP_AXES), required=True)
            p.add_argument("--values", help="comma-separated values (default: the reference axis)")

    add("cost", "analytical cost model report")
    return parser


def overrides_from(args: argparse.Namespace) -> dict:
    ov: dict = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        ov[key.strip()] = parse_value(value)
    if args.seed is not None:
        ov["seed"] = args.seed
        ov["sample.seed"] = args.seed
    if args.command == "sample":
        if args.nfe is not None:
            ov["preview_nfe"] = args.nfe
        if args.cfg is not None:
            ov["preview_cfg"] = args.cfg
    elif hasattr(args, "noise"):
        for flag, key in (("nfe", "sample.nfe"), ("cfg", "sample.cfg_scale"), ("noise", "sample.noise_step")):
            if getattr(args, flag) is not None:
                ov[key] = getattr(args, flag)
    if args.command == "gen-data" and args.resolution is not None:
        ov["data.T"], ov["data.height"], ov["data.width"] = args.resolution
    return ov


def run(args: argparse.Namespace, argv: list[str]) -> int:
    cfg = load_config(args.config, overrides_from(args))
    out = pl.output_dir(args.out)
    cmd = args.command
    record_extra: dict = {}

    # ---- validate and load every input before touching the output directory
    if cmd in ("train-stage1", "train-stage2", "eval", "sweep"):
        data_dir = args.data or out / "data"
        split = "val" if cmd in ("eval", "sweep") else "train"
        clips = pl.load_split(data_dir, split)
        record_extra["data"] = str(data_dir)
    if cmd == "train-stage1" and args.init is not None:
        init = pl.load_stage(args.init, cfg, 1)
    if cmd == "sample":
        stage1 = pl.load_stage(args.checkpoint, cfg, 1)
    if cmd == "enhance":
        stage2 = pl.load_stage(args.checkpoint, cfg, 2)
        src = args.input or out / "preview.ckpt"
        video_lr, conds = pl.load_video(src)
        cfg.latent.schedule.check_step(cfg.sample.noise_step)
        record_extra["input"] = str(src)
    if cmd in ("eval", "sweep"):
        stage2 = pl.load_stage(args.stage2, cfg, 2)
        stage1 = pl.load_stage(args.stage1, cfg, 1) if args.stage1 else None
        cfg.latent.schedule.check_step(cfg.sample.noise_step)
        values = None
        if cmd == "sweep" and args.values:
            values = [parse_value(v) for v in args.values.split(",")]
            kind = int if args.axis in ("nfe", "noise") else float
            if not all(isinstance(v, (int, float)) and kind(v) == v for v in values):
                raise UsageError(f"--values for {args.axis} must be {kind.__name__}s, got {args.values!r}")
            if args.axis == "noise":
                for v in values:
                    cfg.latent.schedule.check_step(int(v))

    with pl.run_lock(out):
        if cmd == "gen-data":
            manifest = pl.gen_data(cfg, out / "data")
            print(f"wrote {manifest}")
        elif cmd in ("train-stage1", "train-stage2"):
            stage = int(cmd[-1])
            state = pl.train_stage(cfg, stage, clips, out, init=init if stage == 1 and args.init else None, iterations=args.iterations)
            record_extra["final_loss"] = state.loss_history[-1] if state.loss_history else None
            print(f"stage {stage}: {state.iteration} iterations, final loss {record_extra['final_loss']:.6f}")
        elif cmd == "sample":
            grid = args.resolution or pl.lr_grid(cfg)
            video = pl.preview(cfg, stage1, args.conds, grid=grid)
            pl.save_video(out / "preview.ckpt", video, args.conds, cfg, stage=1, nfe=cfg.preview_nfe)
            if args.dump_frames:
                pl.dump_frames(video, out / "frames", "preview")
            print(f"wrote {out / 'preview.ckpt'} {tuple(video.shape)}")
        elif cmd == "enhance":
            hr = args.resolution[1:] if args.resolution else None
            if args.resolution and args.resolution[0] != video_lr.shape[1]:
                raise UsageError(f"--resolution T={args.resolution[0]} differs from input T={video_lr.shape[1]}")
            res = pl.commit(cfg, stage2, video_lr, conds or [-1] * video_lr.shape[0], hr=hr)
            pl.save_video(out / "final.ckpt", res.video, conds, cfg, stage=2, nfe=res.nfe)
            if args.dump_frames:
                pl.dump_frames(res.video, out / "frames", "final")
            record_extra["function_evaluations"] = res.nfe
            print(f"wrote {out / 'final.ckpt'} {tuple(res.video.shape)} with {res.nfe} function evaluations")
        elif cmd == "eval":
            res = pl.run_eval(cfg, stage2, clips, stage1)
            pl.write_json(out / "eval.json", pl.eval_record(res))
            summary = res.summary()
            text = "\n".join(f"{k:<12} {v:.4f}" if isinstance(v, float) else f"{k:<12} {v}" for k, v in summary.items())
            (out / "eval.txt").write_text(text + "\n", encoding="utf-8")
            record_extra["summary"] = summary
            print(text)
        elif cmd == "sweep":
            held = pl._limit(cfg, clips)
            rows = pl.sweep(cfg, stage2, held, pl.held_out_inputs(cfg, held, stage1), args.axis, values)
            pl.write_sweep(out, rows)
            print(pl.format_sweep(rows), end="")
        elif cmd == "cost":
            report = paradigm_report()
            text = format_report(report)
            (out / "cost.txt").write_text(text + "\n", encoding="utf-8")
            with (out / "cost.jsonl").open("w", encoding="utf-8") as fh:
                for name, plan in report["plans"].items():
                    fh.write(json.dumps({"plan": name, **plan}, sort_keys=True) + "\n")
            print(text)
        pl.write_record(out, pl.reproducibility_record(cfg, cmd, argv, **record_extra))
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args, argv)
    except (ConfigError, UsageError) as exc:
        print(f"cascadeflow: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, pl.CheckpointMismatch, pl.LockHeld, TrainingDiverged, ValueError) as exc:
        print(f"cascadeflow: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
