"""Versioned, checksummed model checkpoints.

File layout::

    b"IRMTCKPT"                 8-byte magic
    uint32 little-endian        format version
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON
    array block                 float64 little-endian arrays, back to back

The header lists every array (name, shape, byte offset) and carries the SHA-256
of the array block. Arrays are namespaced ``param/<name>``, ``adam_m/<name>``
and ``adam_v/<name>``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CheckpointError, CheckpointIntegrityError, CheckpointTruncatedError,
                     CheckpointVersionError, FingerprintError)
from .io import atomic_write_bytes

MAGIC = b"IRMTCKPT"
FORMAT_VERSION = 1
PROVENANCES = ("scratch", "pretrained-generic", "pretrained-indomain")
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class ModelCheckpoint:
    kind: str
    config: dict
    vocab_fingerprint: str
    params: dict[str, np.ndarray]
    provenance: str = "scratch"
    heads: dict[str, list[int]] = field(default_factory=dict)
    optimizer: dict | None = None
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise CheckpointError(f"unknown provenance {self.provenance!r}")

    def check_fingerprint(self, fingerprint: str) -> None:
        if fingerprint != self.vocab_fingerprint:
            raise FingerprintError(
                f"vocabulary fingerprint {fingerprint[:12]}... does not match checkpoint's "
                f"{self.vocab_fingerprint[:12]}...")


def _arrays(ckpt: ModelCheckpoint) -> dict[str, np.ndarray]:
    out = {f"param/{k}": v for k, v in ckpt.params.items()}
    if ckpt.optimizer is not None:
        for k, v in ckpt.optimizer.get("first_moment", {}).items():
            out[f"adam_m/{k}"] = v
        for k, v in ckpt.optimizer.get("second_moment", {}).items():
            out[f"adam_v/{k}"] = v
    return out


def dumps_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in _arrays(ckpt).items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    block = b"".join(chunks)
    optimizer = None
    if ckpt.optimizer is not None:
        optimizer = {k: v for k, v in ckpt.optimizer.items() if k not in ("first_moment", "second_moment")}
    header = {
        "format_version": ckpt.format_version,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "vocab_fingerprint": ckpt.vocab_fingerprint,
        "provenance": ckpt.provenance,
        "heads": ckpt.heads,
        "optimizer": optimizer,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "arrays": entries,
        "block_nbytes": len(block),
        "block_sha256": hashlib.sha256(block).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, ckpt.format_version, len(hbytes)) + hbytes + block


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    atomic_write_bytes(path, dumps_checkpoint(ckpt))


def loads_checkpoint(raw: bytes, fingerprint: str | None = None) -> ModelCheckpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"file is {len(raw)} bytes, shorter than the {_PREFIX.size}-byte prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointIntegrityError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version} unsupported (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointTruncatedError("file ends inside the header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"header is corrupt: {exc}") from None
    block = raw[start + hlen:]
    if len(block) < header["block_nbytes"]:
        raise CheckpointTruncatedError(
            f"array block has {len(block)} of {header['block_nbytes']} bytes")
    if len(block) > header["block_nbytes"]:
        raise CheckpointIntegrityError("trailing bytes after the array block")
    if hashlib.sha256(block).hexdigest() != header["block_sha256"]:
        raise CheckpointIntegrityError("array block checksum mismatch")

    params, first, second = {}, {}, {}
    for e in header["arrays"]:
        arr = np.frombuffer(block, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        arr = arr.astype(np.float64).reshape(e["shape"])
        section, name = e["name"].split("/", 1)
        {"param": params, "adam_m": first, "adam_v": second}[section][name] = arr
    optimizer = header["optimizer"]
    if optimizer is not None:
        optimizer = dict(optimizer, first_moment=first, second_moment=second)
    ckpt = ModelCheckpoint(
        kind=header["kind"], config=header["config"], vocab_fingerprint=header["vocab_fingerprint"],
        params=params, provenance=header["provenance"], heads=header["heads"], optimizer=optimizer,
        rng_state=header["rng_state"], meta=header["meta"], format_version=version,
    )
    if fingerprint is not None:
        ckpt.check_fingerprint(fingerprint)
    return ckpt


def load_checkpoint(path, fingerprint: str | None = None) -> ModelCheckpoint:
    """Read a checkpoint; ``fingerprint`` (a vocabulary hash) is verified when given."""
    return loads_checkpoint(Path(path).read_bytes(), fingerprint)
