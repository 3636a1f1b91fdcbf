"""Named-tensor container with per-entry checksums.

Layout (all integers little-endian)::

    magic      8 bytes   b"CFTENSR1"
    hlen       uint64    byte length of the header
    header     hlen      UTF-8 JSON: {"entries": [...], "metadata": {...}}
    hsum       32 bytes  SHA-256 of the header bytes
    payload    ...       packed float32 little-endian arrays

Each entry records ``name``, ``shape``, ``dtype`` (always ``"<f4"``),
``offset`` (relative to the payload start), ``nbytes`` and ``sha256``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

MAGIC = b"CFTENSR1"
DTYPE = "<f4"


class CheckpointError(ValueError):
    """Malformed or corrupted container."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def pack(tensors: dict[str, Tensor], metadata: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        if not isinstance(t, Tensor):
            raise TypeError(f"entry {name!r} is not a tensor")
        if not t.is_floating_point():
            raise TypeError(f"entry {name!r} has dtype {t.dtype}; only float tensors are stored")
        # np.ascontiguousarray would promote 0-d tensors to shape (1,)
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype(DTYPE, copy=False)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": DTYPE,
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = _canonical_json({"entries": entries, "metadata": metadata or {}})
    return b"".join(
        [MAGIC, struct.pack("<Q", len(header)), header, hashlib.sha256(header).digest(), *chunks]
    )


def unpack(blob: bytes) -> tuple[dict[str, Tensor], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a tensor container (bad magic)")
    if len(blob) < 16:
        raise CheckpointError("truncated container header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = blob[16 : 16 + hlen]
    hsum = blob[16 + hlen : 48 + hlen]
    if len(header) != hlen or hashlib.sha256(header).digest() != hsum:
        raise CheckpointError("header checksum mismatch")
    doc = json.loads(header.decode("utf-8"))
    payload = memoryview(blob)[48 + hlen :]

    spans = sorted((e["offset"], e["offset"] + e["nbytes"], e["name"]) for e in doc["entries"])
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CheckpointError(f"entries {a!r} and {b!r} overlap")
    if spans and spans[-1][1] > len(payload):
        raise CheckpointError("payload truncated")

    # verify everything before materializing anything
    for e in doc["entries"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"checksum mismatch for entry {e['name']!r}")
        if e["dtype"] != DTYPE or int(np.prod(e["shape"], dtype=np.int64)) * 4 != e["nbytes"]:
            raise CheckpointError(f"entry {e['name']!r} has inconsistent dtype/shape")

    tensors = {}
    for e in doc["entries"]:
        raw = bytes(payload[e["offset"] : e["offset"] + e["nbytes"]])
        arr = np.frombuffer(raw, dtype=DTYPE).reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, doc["metadata"]


def save_tensors(path: str | Path, tensors: dict[str, Tensor], metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = pack(tensors, metadata)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_tensors(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    try:
        return unpack(blob)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
