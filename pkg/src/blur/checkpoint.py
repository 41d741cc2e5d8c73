"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"BLURCKPT"
    u32       format version
    u32 + N   JSON header (model config and free-form metadata), UTF-8
    u32       number of entries
    entries   u16 name length, name (UTF-8), u8 dtype tag, u8 ndim,
              ndim x u64 dims, raw float64 values (complex: real plane, then
              imaginary plane)

The header is written with sorted keys and no whitespace, and entries keep the
model's fixed ordering, so load followed by save reproduces the file byte for
byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .network import BlurModelParams, ModelConfig, init_model, state_dict

MAGIC = b"BLURCKPT"
VERSION = 1
REAL64 = 0
COMPLEX128 = 1
EXTRA_PREFIX = "extra."


def _encode_entry(name: str, arr: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    tag = COMPLEX128 if np.iscomplexobj(arr) else REAL64
    out = [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<BB", tag, arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    if tag == COMPLEX128:
        out.append(np.ascontiguousarray(arr.real, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(arr.imag, dtype="<f8").tobytes())
    else:
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def dumps(model: BlurModelParams, extras: Optional[dict] = None, meta: Optional[dict] = None) -> bytes:
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries = list(state_dict(model).items())
    entries += [(EXTRA_PREFIX + k, np.asarray(v, dtype=np.float64)) for k, v in sorted((extras or {}).items())]
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(entries))]
    parts += [_encode_entry(name, arr) for name, arr in entries]
    return b"".join(parts)


def save_checkpoint(model: BlurModelParams, path, extras: Optional[dict] = None, meta: Optional[dict] = None) -> Path:
    """Write ``model`` (plus optional float arrays ``extras``) to ``path``."""
    extras = extras if extras is not None else getattr(model, "extras", None)
    meta = meta if meta is not None else getattr(model, "meta", None)
    path = Path(path)
    path.write_bytes(dumps(model, extras, meta))
    return path


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointError(f"{self.source}: truncated while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _parse(data: bytes, source: str):
    r = _Reader(data, source)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version} (expected {VERSION})")
    (hlen,) = r.unpack("<I", "header length")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    (count,) = r.unpack("<I", "entry count")
    entries = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "entry name length")
        name = r.take(nlen, "entry name").decode("utf-8")
        tag, ndim = r.unpack("<BB", f"dtype of {name!r}")
        if tag not in (REAL64, COMPLEX128):
            raise CheckpointError(f"{source}: entry {name!r} has unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name!r}")
        size = int(np.prod(shape, dtype=np.int64))
        planes = [np.frombuffer(r.take(8 * size, f"values of {name!r}"), dtype="<f8").reshape(shape)
                  for _ in range(2 if tag == COMPLEX128 else 1)]
        if tag == COMPLEX128:
            # assign the planes directly: arithmetic would turn -0.0 into 0.0
            value = np.empty(shape, dtype=np.complex128)
            value.real, value.imag = planes
        else:
            value = planes[0].copy()
        entries[name] = value
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes after the last entry")
    return header, entries


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> BlurModelParams:
    """Rebuild a model from ``path``.

    With ``config`` the entries are loaded into a model built from that config
    and any unknown, missing or mis-shaped entry is reported.  Extra arrays are
    returned on ``model.extras`` and metadata on ``model.meta``.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    header, entries = _parse(data, str(path))
    try:
        stored_cfg = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config in header ({exc})") from None
    model = init_model(config or stored_cfg)
    target = state_dict(model)
    extras = {k[len(EXTRA_PREFIX):]: v for k, v in entries.items() if k.startswith(EXTRA_PREFIX)}
    weights = {k: v for k, v in entries.items() if not k.startswith(EXTRA_PREFIX)}

    problems = []
    for name, arr in weights.items():
        if name not in target:
            problems.append(f"unexpected entry {name!r} with shape {arr.shape}")
        elif target[name].shape != arr.shape or np.iscomplexobj(target[name]) != np.iscomplexobj(arr):
            problems.append(f"entry {name!r}: checkpoint shape {arr.shape}, model expects {target[name].shape}")
    problems += [f"missing entry {name!r}" for name in target if name not in weights]
    if problems:
        raise CheckpointError(f"{path}: checkpoint does not match model config: " + "; ".join(problems))
    for name, arr in weights.items():
        target[name][...] = arr
    model.extras = extras
    model.meta = header.get("meta", {})
    return model
