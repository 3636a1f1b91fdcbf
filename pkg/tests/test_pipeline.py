from dataclasses import replace

import numpy as np
import pytest
import torch

from cascadeflow import pipeline as pl
from cascadeflow.codec import decode, encode
from cascadeflow.config import apply_overrides, load_config, parse_text
from cascadeflow.flowmatch import load_model
from cascadeflow.resample import upsample
from cascadeflow.synthdata import build_clips, make_specs

TINY_OVERRIDES = {
    "data.n_clips": 12,
    "data.val_fraction": 0.25,
    "stage1.dit.layers": 1,
    "stage1.dit.dim": 32,
    "stage2.dit.layers": 1,
    "stage2.dit.dim": 32,
    "stage1.train.iterations": 3,
    "stage2.train.iterations": 3,
    "stage1.train.batch_size": 2,
    "stage2.train.batch_size": 2,
    "latent.step_min": 0,
    "latent.step_max": 40,
    "preview_nfe": 2,
    "sample.noise_step": 20,
    "eval.max_clips": 2,
}


@pytest.fixture(scope="module")
def tiny():
    cfg = load_config(None, TINY_OVERRIDES)
    clips = build_clips(make_specs(4, 0), cfg.data.resolutions)
    s1 = pl.train_stage(cfg, 1, clips).model
    s2 = pl.train_stage(cfg, 2, clips).model
    return cfg, clips, s1, s2


def test_zero_field_stage2_is_identity_enhancement(tiny):
    cfg, _, s1, _ = tiny
    zero = pl.seeded_model(cfg.stage2.dit, 0)
    cfg0 = replace(cfg, sample=replace(cfg.sample, noise_step=0))
    lo, final = pl.two_stage_generate(cfg0, s1, zero, [3, 7])
    expected = decode(encode(upsample(lo, 32, 32), cfg.codec), cfg.codec).clamp(-1, 1)
    assert torch.allclose(final, expected, atol=1e-6)


def test_two_stage_is_reproducible_and_persisted(tiny, tmp_path):
    cfg, _, s1, s2 = tiny
    a = pl.two_stage_generate(cfg, s1, s2, [1, 2], out=tmp_path)
    b = pl.two_stage_generate(cfg, s1, s2, [1, 2])
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert a[0].shape == (2, 5, 16, 16, 1) and a[1].shape == (2, 5, 32, 32, 1)
    video, conds = pl.load_video(tmp_path / "preview.ckpt")
    assert torch.equal(video, a[0]) and conds == [1, 2]
    assert torch.equal(pl.load_video(tmp_path / "final.ckpt")[0], a[1])


def test_preview_then_commit_equals_two_stage(tiny):
    cfg, _, s1, s2 = tiny
    lo = pl.preview(cfg, s1, [5])
    final = pl.commit(cfg, s2, lo, [5]).video
    assert torch.equal(final, pl.two_stage_generate(cfg, s1, s2, [5])[1])


def test_checkpoint_mismatches_rejected(tiny, tmp_path):
    cfg, clips, _, _ = tiny
    pl.train_stage(cfg, 2, clips, out=tmp_path, iterations=1)
    ckpt = tmp_path / "stage2.ckpt"
    assert isinstance(pl.load_stage(ckpt, cfg, 2), torch.nn.Module)
    with pytest.raises(pl.CheckpointMismatch, match="stage-1"):
        pl.load_stage(ckpt, cfg, 1)
    with pytest.raises(pl.CheckpointMismatch, match="schedule"):
        pl.load_stage(ckpt, apply_overrides(cfg, {"latent.schedule.beta_end": 0.03}), 2)
    with pytest.raises(pl.CheckpointMismatch, match="codec"):
        pl.load_stage(ckpt, apply_overrides(cfg, {"codec.seed": 1}), 2)
    assert (tmp_path / "stage2_train.jsonl").is_file()


def test_commit_rejects_noise_outside_schedule(tiny):
    cfg, clips, _, s2 = tiny
    with pytest.raises(ValueError):
        pl.commit(cfg, s2, clips.lr[:1], [0], replace(cfg.sample, noise_step=5000))


def test_held_out_inputs_independent_of_workers(tiny):
    cfg, clips, s1, s2 = tiny
    a = pl.held_out_inputs(cfg, clips, s1)
    b = pl.held_out_inputs(replace(cfg, workers=2), clips, s1)
    assert torch.equal(a, b)
    ra = pl.evaluate(cfg, s2, clips, a)
    rb = pl.evaluate(replace(cfg, workers=3), s2, clips, a)
    assert ra.psnr_final == rb.psnr_final and ra.ids == clips.ids


def test_pixel_fallback_inputs(tiny):
    cfg, clips, _, _ = tiny
    x = pl.held_out_inputs(cfg, clips)
    assert x.shape == clips.hr.shape
    assert torch.equal(x, pl.held_out_inputs(cfg, clips))


def test_single_value_sweep_equals_eval(tiny):
    cfg, clips, s1, s2 = tiny
    x = pl.held_out_inputs(cfg, clips, s1)
    rows = pl.sweep(cfg, s2, clips, x, "nfe", [cfg.sample.nfe])
    direct = pl.evaluate(cfg, s2, clips, x).summary()
    assert {k: rows[0][k] for k in direct} == direct


def test_sweep_table_marks_recommended(tiny):
    cfg, clips, _, s2 = tiny
    x = pl.held_out_inputs(cfg, clips)
    rows = pl.sweep(cfg, s2, clips.subset([0]), x[:1], "nfe", [1, 4, 7])
    assert [r["recommended"] for r in rows] == [False, True, False]
    table = pl.format_sweep(rows)
    lines = table.splitlines()
    assert lines[0].strip().startswith("NFE") and lines[3].startswith("* 4")
    with pytest.raises(ValueError):
        pl.sweep(cfg, s2, clips, x, "steps", [1])


def test_reference_sweep_axes():
    assert pl.SWEEP_AXES["nfe"] == tuple(range(1, 9))
    assert pl.SWEEP_AXES["noise"] == (650, 675, 700, 725, 750)


def test_run_lock_is_exclusive(tmp_path):
    with pl.run_lock(tmp_path / "out"):
        with pytest.raises(pl.LockHeld):
            with pl.run_lock(tmp_path / "out"):
                pass
    with pl.run_lock(tmp_path / "out"):
        pass


def test_output_root_variable(monkeypatch, tmp_path):
    monkeypatch.setenv(pl.OUT_ENV, str(tmp_path))
    assert pl.output_dir() == tmp_path
    assert pl.output_dir(tmp_path / "x") == tmp_path / "x"
    monkeypatch.delenv(pl.OUT_ENV)
    assert str(pl.output_dir()) == pl.DEFAULT_ROOT


def test_record_reconstructs_config(tiny):
    cfg = tiny[0]
    rec = pl.reproducibility_record(cfg, "eval", ["eval", "--seed", "0"])
    again = apply_overrides(type(cfg)(), parse_text(rec["config"]))
    assert again.hash() == rec["config_hash"] == cfg.hash()
    assert set(rec["versions"]) == {"cascadeflow", "python", "numpy", "torch"}


def test_dump_frames_writes_pgm(tmp_path):
    v = torch.linspace(-1, 1, 2 * 3 * 4 * 5).reshape(2, 3, 4, 5, 1)
    paths = pl.dump_frames(v, tmp_path)
    assert len(paths) == 6
    data = paths[0].read_bytes()
    assert data.startswith(b"P5\n5 4\n255\n") and len(data) == len(b"P5\n5 4\n255\n") + 20
    assert data[-20] == 0


def test_lora_stage1_training_from_init(tiny):
    cfg, clips, s1, _ = tiny
    lcfg = apply_overrides(cfg, {"stage1.dit.lora.rank": 2})
    state = pl.train_stage(lcfg, 1, clips, init=s1, iterations=2)
    assert state.model.cfg.lora.rank == 2
    base = dict(s1.named_parameters())
    for n, p in state.model.named_parameters():
        if "lora_" not in n:
            assert torch.equal(p, base[n.replace(".base", "")])


def test_saved_stage_reloads_bitwise(tiny, tmp_path):
    cfg, clips, _, _ = tiny
    state = pl.train_stage(cfg, 1, clips, out=tmp_path, iterations=2)
    model, meta = load_model(tmp_path / "stage1.ckpt")
    assert meta["stage"] == 1 and meta["resolution"] == [5, 16, 16]
    for (n, a), (_, b) in zip(state.model.state_dict().items(), model.state_dict().items()):
        assert torch.equal(a, b), n
    assert np.isfinite(state.loss_history).all()
