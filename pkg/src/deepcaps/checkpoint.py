"""Checkpoint files: a JSON header followed by raw little-endian tensor payload.

Layout::

    bytes 0-7   magic b"DCAPCKPT"
    byte  8     format version (uint8)
    bytes 9-16  header length in bytes (uint64, little-endian)
    header      UTF-8 JSON (sorted keys): arch, step, epoch, rng, metrics,
                config, and a tensor table of name / kind / dtype / shape / offset
    payload     tensors back to back in table order, little-endian
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from deepcaps.errors import (ArchitectureMismatchError, CheckpointFormatError, CheckpointTruncatedError,
                             CheckpointVersionError)
from deepcaps.model import ArchSpec, DeepCaps, build_model

MAGIC = b"DCAPCKPT"
FORMAT_VERSION = 1
_PREFIX = len(MAGIC) + 1 + 8


@dataclass
class Checkpoint:
    arch: dict
    tensors: dict  # name -> ndarray, parameters then buffers
    kinds: dict = field(default_factory=dict)  # name -> "param" | "buffer"
    step: int = 0
    epoch: int = 0
    rng: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


def capture(model: DeepCaps, step=0, epoch=0, rng=None, metrics=None, config=None) -> Checkpoint:
    tensors, kinds = {}, {}
    for name, p in model.named_parameters():
        tensors[name] = p.data.copy()
        kinds[name] = "param"
    for name, b in model.named_buffers():
        tensors[name] = b.copy()
        kinds[name] = "buffer"
    return Checkpoint(model.spec.to_dict(), tensors, kinds, step, epoch, rng or {}, metrics or {}, config or {})


def to_bytes(ckpt: Checkpoint) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        le = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"name": name, "kind": ckpt.kinds.get(name, "param"), "dtype": le.dtype.str,
                      "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "arch": ckpt.arch, "step": ckpt.step, "epoch": ckpt.epoch,
              "rng": ckpt.rng, "metrics": ckpt.metrics, "config": ckpt.config, "tensors": table,
              "payload_bytes": offset}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<BQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX:
        raise CheckpointTruncatedError("checkpoint shorter than its fixed prefix")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<BQ", raw[len(MAGIC):_PREFIX])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    if len(raw) < _PREFIX + hlen:
        raise CheckpointTruncatedError(f"checkpoint header needs {hlen} bytes, only {len(raw) - _PREFIX} present")
    try:
        header = json.loads(raw[_PREFIX:_PREFIX + hlen].decode("utf-8"))
        table = header["tensors"]
        payload_bytes = header["payload_bytes"]
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointVersionError(f"header format version {header.get('format_version')}")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"corrupt checkpoint header: {e}") from None
    payload = raw[_PREFIX + hlen:]
    if len(payload) < payload_bytes:
        raise CheckpointTruncatedError(f"parameter payload has {len(payload)} of {payload_bytes} bytes")
    if len(payload) > payload_bytes:
        raise CheckpointFormatError("trailing bytes after parameter payload")
    tensors, kinds = {}, {}
    for entry in table:
        try:
            dt = np.dtype(entry["dtype"])
            chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(chunk, dtype=dt).reshape(entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"corrupt tensor entry {entry.get('name')!r}: {e}") from None
        tensors[entry["name"]] = arr.astype(dt.newbyteorder("="))
        kinds[entry["name"]] = entry["kind"]
    return Checkpoint(header["arch"], tensors, kinds, header["step"], header["epoch"], header["rng"],
                      header["metrics"], header["config"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def restore(model: DeepCaps, ckpt: Checkpoint) -> DeepCaps:
    """Copy checkpoint tensors into ``model``; the architecture specs must be equal."""
    if ckpt.arch != model.spec.to_dict():
        raise ArchitectureMismatchError("checkpoint architecture differs from the model's")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = list(params) + list(buffers)
    if list(ckpt.tensors) != expected:
        raise ArchitectureMismatchError("checkpoint tensor table does not match the model's parameters")
    for name, p in params.items():
        src = ckpt.tensors[name]
        if src.shape != p.shape:
            raise ArchitectureMismatchError(f"{name}: checkpoint shape {src.shape} != model shape {p.shape}")
        p.data = src.astype(p.dtype, copy=True)
    for name, b in buffers.items():
        b[...] = ckpt.tensors[name]
    return model


def model_from_checkpoint(ckpt) -> DeepCaps:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    return restore(build_model(ArchSpec.from_dict(ckpt.arch)), ckpt)
