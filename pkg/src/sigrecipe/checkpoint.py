"""Self-describing checkpoint container.

Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header,
then raw little-endian float32 arrays at the offsets listed in the header.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"SGRCKPT\x00"
FORMAT_VERSION = 1
AUX_PREFIXES = ("decoder.", "distill.")
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    step: int = 0
    stage: str = ""
    config: dict = field(default_factory=dict)
    auxiliary: set[str] = field(default_factory=set)
    extra: dict = field(default_factory=dict)


def is_auxiliary(name: str) -> bool:
    return name.startswith(AUX_PREFIXES)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    table, offset = [], 0
    blobs = []
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype="<f4", order="C")   # keeps 0-d shapes
        blobs.append(arr.tobytes())
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes,
                      "auxiliary": name in ckpt.auxiliary or is_auxiliary(name)})
        offset += arr.nbytes
    header = {"version": FORMAT_VERSION, "step": ckpt.step, "stage": ckpt.stage,
              "config": ckpt.config, "extra": ckpt.extra, "arrays": table}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def read_header(path) -> tuple[dict, int]:
    with Path(path).open("rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        n = f.read(_LEN.size)
        if len(n) != _LEN.size:
            raise CheckpointError(f"{path}: truncated header")
        (size,) = _LEN.unpack(n)
        raw = f.read(size)
        if len(raw) != size:
            raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw.decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('version')} != {FORMAT_VERSION}")
    return header, len(MAGIC) + _LEN.size + size


def load_checkpoint(path) -> Checkpoint:
    header, start = read_header(path)
    data = Path(path).read_bytes()[start:]
    arrays, aux = {}, set()
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        lo, n = entry["offset"], entry["nbytes"]
        if n != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: shape table entry for {entry['name']} is inconsistent")
        if lo + n > len(data):
            raise CheckpointError(f"{path}: truncated array data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data[lo:lo + n], dtype="<f4").reshape(shape).astype(np.float32)
        if entry.get("auxiliary"):
            aux.add(entry["name"])
    return Checkpoint(arrays, header.get("step", 0), header.get("stage", ""), header.get("config", {}),
                      aux, header.get("extra", {}))


def export_for_eval(ckpt: Checkpoint) -> Checkpoint:
    """Drop decoder and distillation arrays; only the released encoders remain."""
    keep = {k: v for k, v in ckpt.arrays.items() if not is_auxiliary(k) and k not in ckpt.auxiliary}
    return Checkpoint(keep, ckpt.step, ckpt.stage, ckpt.config, set(), dict(ckpt.extra, eval_only=True))


def load_into(params: dict, ckpt: Checkpoint, required: set[str] | None = None) -> list[str]:
    """Copy checkpoint arrays into a parameter dict of Tensors.

    Unknown auxiliary arrays are skipped with a warning; unknown encoder
    arrays and shape mismatches are errors. Returns the names loaded.
    """
    loaded, skipped = [], []
    for name, arr in ckpt.arrays.items():
        if name not in params:
            if name in ckpt.auxiliary or is_auxiliary(name):
                skipped.append(name)
                continue
            raise CheckpointError(f"unknown array {name!r}")
        if params[name].shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {params[name].shape}")
        params[name].data = arr.copy()
        loaded.append(name)
    if skipped:
        log.warning("skipping %d auxiliary arrays not in the model (%s, ...)", len(skipped), sorted(skipped)[0])
    missing = (required or set()) - set(loaded)
    if missing:
        raise CheckpointError(f"missing arrays: {sorted(missing)[:5]}")
    return loaded
