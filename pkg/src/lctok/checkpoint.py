"""Self-describing checkpoint archive.

Layout::

    b"LCTKCKPT" | u32 little-endian header length | UTF-8 JSON header | payload

The header holds ``format_version``, a ``metadata`` record (stage, step,
config hash, parent checkpoint hash, free-form extras), the SHA-256 of the
payload, and one entry per array with its dtype, shape and byte range. Arrays
are stored C-contiguous and little-endian, so a round trip is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .errors import IntegrityError, ShapeMismatch, StageOrderError

MAGIC = b"LCTKCKPT"
FORMAT_VERSION = 1
_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.float16: "<f2",
    torch.int64: "<i8", torch.int32: "<i4", torch.uint8: "|u1", torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class FormatVersionError(IntegrityError):
    pass


@dataclass
class Checkpoint:
    metadata: dict
    arrays: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return self.metadata.get("stage", "")

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        """Arrays under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def file_hash(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path: Path | str, arrays: Mapping[str, torch.Tensor], metadata: Mapping) -> str:
    """Write atomically (temp file + rename). Returns the file's SHA-256."""
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        t = arrays[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise IntegrityError(f"unsupported dtype {t.dtype} for {name}")
        code = _DTYPES[t.dtype]
        raw = t.numpy().astype(np.dtype(code), copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": code, "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"format_version": FORMAT_VERSION, "metadata": dict(metadata), "arrays": entries,
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return file_hash(path)


def read_header(path: Path | str) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(12)
        if len(raw) < 12 or raw[:8] != MAGIC:
            raise IntegrityError(f"{path}: not a checkpoint (bad magic or truncated)")
        (n,) = struct.unpack("<I", raw[8:12])
        blob = fh.read(n)
    if len(blob) != n:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format version {header.get('format_version')} != supported {FORMAT_VERSION}")
    return header


def load_checkpoint(path: Path | str, stage: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint; nothing is returned unless every check passes."""
    raw = Path(path).read_bytes()
    header = read_header(path)
    start = 12 + struct.unpack("<I", raw[8:12])[0]
    payload = raw[start:]
    size = sum(e["nbytes"] for e in header["arrays"])
    if len(payload) != size:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, header says {size}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    meta = header["metadata"]
    if stage is not None and meta.get("stage") != stage:
        raise StageOrderError(stage, f"{path} holds stage {meta.get('stage')!r}, expected {stage!r}")
    arrays = {}
    for e in header["arrays"]:
        if e["dtype"] not in _TORCH:
            raise IntegrityError(f"{path}: unknown dtype {e['dtype']}")
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return Checkpoint(meta, arrays)


def load_into(module: nn.Module, arrays: Mapping[str, torch.Tensor]) -> None:
    """Copy ``arrays`` into ``module``'s state; every mismatch is reported at once."""
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    unexpected = sorted(set(arrays) - set(state))
    bad_shape = sorted(k for k in set(state) & set(arrays) if tuple(state[k].shape) != tuple(arrays[k].shape))
    if missing or unexpected or bad_shape:
        detail = [f"{k} (stored {tuple(arrays[k].shape)}, model {tuple(state[k].shape)})" for k in bad_shape]
        detail += [f"{k} (missing)" for k in missing] + [f"{k} (unexpected)" for k in unexpected]
        raise ShapeMismatch(bad_shape + missing + unexpected,
                            "checkpoint does not fit the model: " + ", ".join(detail))
    with torch.no_grad():
        for k, v in state.items():
            v.copy_(arrays[k].to(v.dtype))


def prefixed(prefix: str, arrays: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in arrays.items()}
