import json

import pytest

from cascadeflow import pipeline as pl
from cascadeflow.cli import main, parse_resolution

TINY_CFG = """\
# tiny end-to-end run
data.n_clips = 8
data.val_fraction = 0.25
stage1.dit.layers = 1
stage1.dit.dim = 32
stage2.dit.layers = 1
stage2.dit.dim = 32
stage1.train.iterations = 3
stage2.train.iterations = 3
stage1.train.batch_size = 2
stage2.train.batch_size = 2
latent.step_min = 0
latent.step_max = 40
preview_nfe = 2
sample.noise_step = 20
eval.max_clips = 2
"""

ARTIFACTS = (
    "data/manifest.jsonl",
    "stage1.ckpt",
    "stage2.ckpt",
    "preview.ckpt",
    "final.ckpt",
    "eval.json",
    "sweep_nfe.txt",
    "sweep_nfe.jsonl",
    "cost.jsonl",
)


def run_all(cfg_path, out, seed=0):
    common = ["--config", str(cfg_path), "--out", str(out), "--seed", str(seed)]
    steps = [
        ["gen-data"],
        ["train-stage1"],
        ["train-stage2"],
        ["sample", "--checkpoint", str(out / "stage1.ckpt"), "--conds", "1,2"],
        ["enhance", "--checkpoint", str(out / "stage2.ckpt"), "--nfe", "2", "--cfg", "1"],
        ["eval", "--stage2-checkpoint", str(out / "stage2.ckpt"), "--stage1-checkpoint", str(out / "stage1.ckpt")],
        ["sweep", "--stage2-checkpoint", str(out / "stage2.ckpt"), "--axis", "nfe", "--values", "1,2", "--cfg", "1"],
        ["cost"],
    ]
    for step in steps:
        assert main(step + common) == 0, step


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    run_all(cfg, root / "a")
    run_all(cfg, root / "b")
    return root, cfg


def test_full_workflow_writes_artifacts(two_runs):
    root, _ = two_runs
    for rel in ARTIFACTS:
        assert (root / "a" / rel).is_file(), rel
    records = sorted(p.stem for p in (root / "a" / "records").iterdir())
    assert records == sorted(
        ["gen-data", "train-stage1", "train-stage2", "sample", "enhance", "eval", "sweep", "cost"]
    )
    rec = json.loads((root / "a" / "records" / "enhance.json").read_text())
    assert rec["function_evaluations"] == 2 and rec["seeds"]["run"] == 0
    assert not (root / "a" / ".lock").exists()


def test_repeated_runs_are_bitwise_identical(two_runs):
    root, _ = two_runs
    for rel in ARTIFACTS:
        assert (root / "a" / rel).read_bytes() == (root / "b" / rel).read_bytes(), rel


def test_enhance_defaults_to_reference_settings(two_runs, tmp_path):
    root, cfg = two_runs
    args = ["enhance", "--config", str(cfg), "--set", "sample.noise_step=675", "--out", str(tmp_path)]
    args += ["--checkpoint", str(root / "a" / "stage2.ckpt"), "--input", str(root / "a" / "preview.ckpt")]
    assert main(args) == 0
    rec = json.loads((tmp_path / "records" / "enhance.json").read_text())
    # NFE 4 with guidance scale 13 costs two evaluations per step
    assert rec["function_evaluations"] == 8
    assert "sample.cfg_scale = 13.0" in rec["config"] and "sample.noise_step = 675" in rec["config"]


def test_sample_defaults_to_fifty_steps(two_runs, tmp_path):
    root, _ = two_runs
    assert main(["sample", "--out", str(tmp_path), "--checkpoint", str(root / "a" / "stage1.ckpt"), "--set", "stage1.dit.layers=1"]) == 0
    rec = json.loads((tmp_path / "records" / "sample.json").read_text())
    assert "preview_nfe = 50" in rec["config"]


def test_missing_config_leaves_no_outputs(tmp_path, capsys):
    out = tmp_path / "never"
    assert main(["gen-data", "--config", str(tmp_path / "missing.cfg"), "--out", str(out)]) == 2
    assert not out.exists()
    assert capsys.readouterr().err.startswith("cascadeflow: error:")


def test_invalid_config_field_reported(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("stage2.train.lr = fast\n")
    assert main(["cost", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "stage2.train.lr" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_wrong_stage_checkpoint_rejected_before_outputs(two_runs, tmp_path):
    root, cfg = two_runs
    out = tmp_path / "o"
    args = ["enhance", "--config", str(cfg), "--out", str(out), "--checkpoint", str(root / "a" / "stage1.ckpt")]
    args += ["--input", str(root / "a" / "preview.ckpt")]
    assert main(args) == 1
    assert not out.exists()


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["cost", "--bogus"])
    assert info.value.code == 2


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(pl.OUT_ENV, str(tmp_path / "root"))
    assert main(["cost"]) == 0
    lines = (tmp_path / "root" / "cost.jsonl").read_text().splitlines()
    assert [json.loads(x)["plan"] for x in lines] == ["single_stage_1080p", "vanilla_cascade", "fast_cascade"]


def test_parse_resolution():
    assert parse_resolution("5x32x32") == (5, 32, 32)
    with pytest.raises(Exception):
        parse_resolution("5x32")
