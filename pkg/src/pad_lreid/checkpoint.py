"""Single-file checkpoint container: a JSON header followed by raw tensor blobs.

Layout::

    b"PADCKPT\\0" | u64 little-endian header length | header JSON (UTF-8) | blobs

The header lists every blob as ``{name, dtype, shape, offset, nbytes}`` with
offsets relative to the first byte after the header. All blobs are stored
little-endian and C-contiguous.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"PADCKPT\0"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    domain_index: int
    config_hash: str
    tensors: dict[str, torch.Tensor]
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"version": ckpt.version, "config_hash": ckpt.config_hash,
              "domain_index": ckpt.domain_index, "meta": ckpt.meta, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def decode_checkpoint(data: bytes, expected_hash: str | None = None) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} != {FORMAT_VERSION}")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {header['config_hash']}, expected {expected_hash}")
    body = data[start + hlen:]
    tensors = {}
    for e in header["tensors"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated blob {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(_TORCH[e["dtype"]])
    return Checkpoint(header["domain_index"], header["config_hash"], tensors, header["meta"],
                      header["version"])


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically: a partially written file never appears under ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_ckpt_")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data, expected_hash)
