"""Single-file checkpoint container.

Layout::

    b"NESTDIFF" | uint64 LE manifest length | manifest JSON (UTF-8) | tensor sections

The manifest records the format version, config and config hash, schedule,
normalisation stats, class names and, for every tensor, its name, dtype, shape,
offset and byte length. Tensor sections are raw little-endian buffers in
manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, build_config
from .data import NormStats
from .pipeline import Pipeline

MAGIC = b"NESTDIFF"
FORMAT_VERSION = 1

_NP_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}
_TORCH_DTYPES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64"}


class CheckpointError(Exception):
    """Base class for checkpoint failures."""


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ConfigMismatch(CheckpointError):
    pass


def _state(pipe: Pipeline) -> list[tuple[str, torch.Tensor]]:
    items = [(f"backbone.{k}", v) for k, v in pipe.backbone.state_dict().items()]
    for i, m in enumerate(pipe.shallow):
        items += [(f"shallow.{i}.{k}", v) for k, v in m.state_dict().items()]
    for i, m in enumerate(pipe.denoisers):
        items += [(f"denoiser.{i}.{k}", v) for k, v in m.state_dict().items()]
    return items


def to_bytes(pipe: Pipeline) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in _state(pipe):
        dtype = _TORCH_DTYPES[t.dtype]
        buf = t.detach().contiguous().cpu().numpy().astype(_NP_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    manifest = {
        "version": FORMAT_VERSION,
        "config_hash": pipe.config_hash(),
        "config": pipe.config.to_dict(),
        "num_classes": pipe.num_classes,
        "class_names": list(pipe.class_names),
        "schedule": pipe.schedule.to_dict(),
        "norm": None if pipe.norm is None else pipe.norm.to_dict(),
        "stages_done": pipe.stages_done,
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save(pipe: Pipeline, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(pipe))
    return path


def read_manifest(blob: bytes) -> tuple[dict, int]:
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CorruptCheckpoint("not a checkpoint file (bad magic or too short)")
    (n,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + n > len(blob):
        raise CorruptCheckpoint("manifest truncated")
    try:
        manifest = json.loads(blob[start:start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"manifest unreadable: {exc}") from exc
    return manifest, start + n


def from_bytes(blob: bytes, expected: ExperimentConfig | None = None) -> Pipeline:
    manifest, data_start = read_manifest(blob)
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {manifest.get('version')} != supported {FORMAT_VERSION}")
    entries = manifest["tensors"]
    total = sum(e["nbytes"] for e in entries)
    if len(blob) - data_start != total:
        raise CorruptCheckpoint(f"tensor data has {len(blob) - data_start} bytes, manifest declares {total}")
    config = build_config(manifest["config"])
    num_classes = int(manifest["num_classes"])
    if config.model_hash(num_classes) != manifest["config_hash"]:
        raise CorruptCheckpoint("stored config does not match stored config hash")
    if expected is not None and expected.model_hash(num_classes) != manifest["config_hash"]:
        raise ConfigMismatch("checkpoint was trained under a different model/schedule configuration")
    pipe = Pipeline.initialize(config, num_classes, manifest["class_names"])
    tensors = {}
    for e in entries:
        raw = blob[data_start + e["offset"]:data_start + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    own = dict(_state(pipe))
    if set(own) != set(tensors):
        raise CorruptCheckpoint("tensor set does not match the configured architecture")
    with torch.no_grad():
        for name, t in own.items():
            if tuple(t.shape) != tuple(tensors[name].shape):
                raise CorruptCheckpoint(f"shape mismatch for {name}")
            t.copy_(tensors[name])
    pipe.norm = None if manifest["norm"] is None else NormStats.from_dict(manifest["norm"])
    pipe.stages_done = int(manifest["stages_done"])
    return pipe


def load(path: str | Path, expected: ExperimentConfig | None = None) -> Pipeline:
    return from_bytes(Path(path).read_bytes(), expected)
