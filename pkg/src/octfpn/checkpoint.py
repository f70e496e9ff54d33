"""Checkpoint container.

Layout::

    8 bytes   magic b"OCTFPNCK"
    8 bytes   header length, unsigned little-endian
    N bytes   UTF-8 JSON header (sorted keys)
    ...       raw little-endian tensor payloads, in header order

The header carries ``format_version``, the run metadata and, per tensor, its
name, dtype, shape, byte offset (relative to the payload start) and size.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"OCTFPNCK"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    backbone: dict
    fusion: dict
    epoch: int = 0
    best_val_loss: float | None = None
    rng_cursor: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    best_params: dict[str, np.ndarray] = field(default_factory=dict)


def _header(ckpt: Checkpoint, tensors):
    entries = []
    offset = 0
    for name, arr in tensors:
        dt = str(arr.dtype)
        if dt not in _DTYPES:
            raise TypeError(f"tensor {name!r} has unsupported dtype {dt}")
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                        "offset": offset, "nbytes": int(arr.nbytes)})
        offset += int(arr.nbytes)
    return {
        "format_version": FORMAT_VERSION,
        "backbone": ckpt.backbone,
        "fusion": ckpt.fusion,
        "epoch": ckpt.epoch,
        "best_val_loss": ckpt.best_val_loss,
        "rng_cursor": ckpt.rng_cursor,
        "state": ckpt.state,
        "optimizer_step": ckpt.optimizer_step,
        "tensors": entries,
    }


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = [("params/" + k, np.asarray(ckpt.params[k])) for k in sorted(ckpt.params)]
    tensors += [("optimizer/" + k, np.asarray(ckpt.optimizer[k])) for k in sorted(ckpt.optimizer)]
    tensors += [("best/" + k, np.asarray(ckpt.best_params[k])) for k in sorted(ckpt.best_params)]
    header = json.dumps(_header(ckpt, tensors), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(header)), header]
    for _, arr in tensors:
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[str(arr.dtype)]).tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {header.get('format_version')}")
    base = 16 + n
    groups = {"params": {}, "optimizer": {}, "best": {}}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=_DTYPES[e["dtype"]])
        arr = arr.astype(e["dtype"]).reshape(e["shape"])
        group, name = e["name"].split("/", 1)
        groups[group][name] = arr
    return Checkpoint(groups["params"], header["backbone"], header["fusion"], header["epoch"],
                      header["best_val_loss"], header["rng_cursor"], header["state"],
                      groups["optimizer"], header["optimizer_step"], groups["best"])


def save(path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
