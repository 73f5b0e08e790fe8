"""Single-file model container.

Layout::

    DSEBM-MODEL\\n
    <one line of JSON header>\\n
    <payload: little-endian float64 tensors, concatenated in header order>

The header records the format version, architecture tag, layer descriptor,
tensor names/shapes, normalization statistics, the training config and a
SHA-256 checksum of the payload. Keys are sorted so identical models
serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conv import ConvEnergyParams
from .datasets import Normalizer
from .dense import DenseEnergyParams
from .recurrent import RecurrentEnergyParams

MAGIC = b"DSEBM-MODEL\n"
FORMAT_VERSION = 1
ARCHITECTURES = {
    "dense": DenseEnergyParams,
    "recurrent": RecurrentEnergyParams,
    "conv": ConvEnergyParams,
}


class ArtifactError(ValueError):
    """Unreadable, corrupted or mismatched model file."""


@dataclass
class ModelArtifact:
    model: object
    normalizer: Normalizer | None = None
    config: dict = field(default_factory=dict)

    @property
    def arch(self) -> str:
        return self.model.arch


def _pack(arrays: dict[str, np.ndarray]):
    entries, chunks = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    return entries, b"".join(chunks)


def _unpack(entries, payload: bytes, offset: int):
    out = {}
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if offset + 8 * count > len(payload):
            raise ArtifactError("truncated payload")
        out[e["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(e["shape"]).astype(np.float64)
        offset += 8 * count
    return out, offset


def dumps(artifact: ModelArtifact) -> bytes:
    model = artifact.model
    tensor_entries, payload = _pack(model.tensors())
    norm_entries, norm_payload = ([], b"")
    if artifact.normalizer is not None:
        norm_entries, norm_payload = _pack({"mean": artifact.normalizer.mean, "std": artifact.normalizer.std})
    payload = payload + norm_payload
    header = {
        "version": FORMAT_VERSION,
        "arch": model.arch,
        "descriptor": model.descriptor(),
        "tensors": tensor_entries,
        "normalizer": norm_entries,
        "config": artifact.config,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    return MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload


def loads(raw: bytes, expect_arch: str | None = None) -> ModelArtifact:
    if not raw.startswith(MAGIC):
        raise ArtifactError("not a DSEBM model file")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise ArtifactError("truncated header")
    try:
        header = json.loads(raw[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"bad header: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise ArtifactError(f"unsupported model format version {header.get('version')}")
    arch = header.get("arch")
    if arch not in ARCHITECTURES:
        raise ArtifactError(f"unknown architecture {arch!r}")
    if expect_arch is not None and arch != expect_arch:
        raise ArtifactError(f"model architecture is {arch!r}, expected {expect_arch!r}")
    payload = raw[end + 1:]
    if len(payload) != header["payload_bytes"]:
        raise ArtifactError(f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ArtifactError("checksum mismatch: model payload is corrupted")
    tensors, offset = _unpack(header["tensors"], payload, 0)
    norm, _ = _unpack(header["normalizer"], payload, offset)
    model = ARCHITECTURES[arch].from_tensors(header["descriptor"], tensors)
    normalizer = Normalizer(norm["mean"], norm["std"]) if norm else None
    return ModelArtifact(model, normalizer, header.get("config", {}))


def save_model(artifact: ModelArtifact, path) -> None:
    Path(path).write_bytes(dumps(artifact))


def load_model(path, expect_arch: str | None = None) -> ModelArtifact:
    return loads(Path(path).read_bytes(), expect_arch)
