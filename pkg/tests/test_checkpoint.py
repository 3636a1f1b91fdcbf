import struct

import numpy as np
import pytest
import torch

from cascadeflow.checkpoint import MAGIC, CheckpointError, load_tensors, pack, save_tensors, unpack


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "a": torch.from_numpy(rng.standard_normal((3, 4)).astype(np.float32)),
        "b/c": torch.from_numpy(rng.standard_normal(7).astype(np.float32)),
        "scalar": torch.tensor(3.5),
        "empty": torch.zeros(0, 2),
    }


def test_roundtrip_bitwise(tmp_path):
    t = sample_tensors()
    meta = {"iteration": 7, "nested": {"x": [1, 2.5, "s"]}}
    save_tensors(tmp_path / "x.ckpt", t, meta)
    back, m = load_tensors(tmp_path / "x.ckpt")
    assert m == meta
    assert set(back) == set(t)
    for k in t:
        assert back[k].dtype == torch.float32 and back[k].shape == t[k].shape
        assert back[k].numpy().tobytes() == t[k].numpy().tobytes()


def test_special_values_survive():
    t = {"v": torch.tensor([float("inf"), -0.0, float("nan"), 1e-45])}
    back, _ = unpack(pack(t))
    assert back["v"].numpy().tobytes() == t["v"].numpy().tobytes()


def test_pack_is_canonical():
    t = sample_tensors()
    reordered = dict(reversed(list(t.items())))
    assert pack(t, {"b": 1, "a": 2}) == pack(reordered, {"a": 2, "b": 1})


def test_float64_stored_as_float32():
    back, _ = unpack(pack({"d": torch.tensor([0.1], dtype=torch.float64)}))
    assert back["d"].dtype == torch.float32 and back["d"].item() == np.float32(0.1)


def test_integer_tensors_rejected():
    with pytest.raises(TypeError):
        pack({"i": torch.tensor([1, 2])})


def test_payload_corruption_detected():
    blob = bytearray(pack(sample_tensors()))
    blob[-3] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        unpack(bytes(blob))


def test_header_corruption_detected():
    blob = bytearray(pack(sample_tensors(), {"k": 1}))
    blob[20] ^= 0x01
    with pytest.raises(CheckpointError, match="header"):
        unpack(bytes(blob))


def test_truncated_payload_detected():
    blob = pack(sample_tensors())
    with pytest.raises(CheckpointError):
        unpack(blob[:-4])


def test_bad_magic_and_short_input():
    with pytest.raises(CheckpointError, match="magic"):
        unpack(b"NOTMAGIC" + bytes(100))
    with pytest.raises(CheckpointError):
        unpack(MAGIC + b"\x00")


def test_overlapping_entries_detected():
    import hashlib
    import json

    raw = np.zeros(2, dtype="<f4").tobytes()
    sha = hashlib.sha256(raw).hexdigest()
    entries = [
        {"name": "a", "shape": [2], "dtype": "<f4", "offset": 0, "nbytes": 8, "sha256": sha},
        {"name": "b", "shape": [2], "dtype": "<f4", "offset": 4, "nbytes": 8, "sha256": sha},
    ]
    header = json.dumps({"entries": entries, "metadata": {}}).encode()
    blob = MAGIC + struct.pack("<Q", len(header)) + header + hashlib.sha256(header).digest() + bytes(12)
    with pytest.raises(CheckpointError, match="overlap"):
        unpack(blob)


def test_missing_file_reports_path(tmp_path):
    with pytest.raises(CheckpointError, match="nope.ckpt"):
        load_tensors(tmp_path / "nope.ckpt")


def test_save_is_atomic(tmp_path):
    save_tensors(tmp_path / "x.ckpt", {"a": torch.ones(2)})
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x.ckpt"]
