"""Versioned model checkpoints: a text header, a JSON manifest, then raw little-endian f64 tensors.

Layout::

    # se3gconv-checkpoint
    format-version: 1
    manifest-bytes: <n>
    ---
    <n bytes of JSON manifest>
    <payload: tensors back to back, each '<f8', offsets given in the manifest>

The manifest stores the model config, the parameter grid in its text format,
the RBF settings of every group convolution and a crc32 per tensor.
"""
from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from . import grids
from .gconv import GroupConvLayer
from .model import Model, ModelConfig
from .rbf import RbfConfig

MAGIC = "# se3gconv-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Base class; ``kind`` is one of "version", "shape", "corrupt"."""

    kind = "corrupt"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class CheckpointVersionError(CheckpointError):
    kind = "version"


class CheckpointShapeError(CheckpointError):
    kind = "shape"


class CheckpointCorruptError(CheckpointError):
    kind = "corrupt"


def _tensors(model: Model) -> dict:
    out = dict(model.parameters())
    out.update(model.buffers())
    return out


def _gconv_layers(model: Model):
    return [(name, layer) for name, layer in model.named_layers() if isinstance(layer, GroupConvLayer)]


def checkpoint_bytes(model: Model) -> bytes:
    tensors = _tensors(model)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        raw = np.ascontiguousarray(tensors[name], dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(tensors[name])), "offset": offset,
                        "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "model_config": model.cfg.to_dict(),
        "grid": grids.format_grid(model.param_grid) if model.cfg.is_group else None,
        "rbf": {name: {"sigma": layer.mixing.rbf.sigma, "normalize": layer.mixing.rbf.normalize}
                for name, layer in _gconv_layers(model)},
        "tensors": entries,
    }
    body = json.dumps(manifest, sort_keys=True).encode()
    head = f"{MAGIC}\nformat-version: {FORMAT_VERSION}\nmanifest-bytes: {len(body)}\n---\n".encode()
    return head + body + b"".join(chunks)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def _split(blob: bytes):
    lines = []
    pos = 0
    for _ in range(4):
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointCorruptError("truncated checkpoint header")
        lines.append(blob[pos:end].decode("utf-8", "replace"))
        pos = end + 1
    if lines[0] != MAGIC or lines[3] != "---":
        raise CheckpointCorruptError("not a checkpoint file (bad magic or header)")
    fields = {}
    for ln in lines[1:3]:
        key, _, val = ln.partition(":")
        fields[key.strip()] = val.strip()
    try:
        version = int(fields["format-version"])
        n = int(fields["manifest-bytes"])
    except (KeyError, ValueError) as exc:
        raise CheckpointCorruptError(f"malformed checkpoint header: {exc}") from None
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})",
                                     found=version, expected=FORMAT_VERSION)
    try:
        manifest = json.loads(blob[pos:pos + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable manifest: {exc}") from None
    return manifest, blob[pos + n:]


def _read_tensors(manifest, payload) -> dict:
    out = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"] or zlib.crc32(raw) != e["crc32"]:
            raise CheckpointCorruptError(f"payload of tensor {e['name']!r} is truncated or corrupt", tensor=e["name"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if arr.size != int(np.prod(e["shape"])):
            raise CheckpointCorruptError(f"tensor {e['name']!r} size does not match its shape", tensor=e["name"])
        out[e["name"]] = arr.reshape(e["shape"])
    return out


def load_into(model: Model, tensors: dict, rbf: dict | None = None, grid=None) -> Model:
    """Copy ``tensors`` (and optionally RBF settings and the parameter grid) into ``model``.

    Names and shapes are checked against the model before anything is written.
    """
    expected = {k: np.shape(v) for k, v in _tensors(model).items()}
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointShapeError(f"checkpoint tensors do not match the model (missing {missing}, unexpected {extra})",
                                   missing=missing, unexpected=extra)
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointShapeError(f"tensor {name!r}: checkpoint shape {tuple(tensors[name].shape)}, model expects {tuple(shape)}",
                                       tensor=name, found=tuple(tensors[name].shape), expected=tuple(shape))
    if grid is not None and grid.resolution != model.param_grid.resolution:
        raise CheckpointShapeError(f"checkpoint grid has {grid.resolution} elements, model expects {model.param_grid.resolution}",
                                   found=grid.resolution, expected=model.param_grid.resolution)
    for name in expected:
        model.set_tensor(name, tensors[name])
    if grid is not None:
        model.param_grid = grid
    for name, layer in _gconv_layers(model):
        if grid is not None:
            layer.mixing.param_grid = grid
        if rbf and name in rbf:
            layer.mixing.rbf = RbfConfig(float(rbf[name]["sigma"]), bool(rbf[name]["normalize"]))
        layer._weight_cache.clear()
    return model


def load_checkpoint(path, model: Model | None = None) -> Model:
    """Rebuild the checkpointed model, or load into ``model`` (whose architecture must match)."""
    blob = Path(path).read_bytes()
    manifest, payload = _split(blob)
    try:
        cfg_dict = dict(manifest["model_config"])
        cfg = ModelConfig(**{**cfg_dict, "channels": tuple(cfg_dict["channels"])})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"invalid model config in manifest: {exc}") from None
    tensors = _read_tensors(manifest, payload)
    grid = grids.parse_grid(manifest["grid"]) if manifest.get("grid") else None
    if model is None:
        model = Model(cfg, param_grid=grid)
    elif model.cfg.variant != cfg.variant:
        raise CheckpointShapeError(f"checkpoint holds a {cfg.variant!r} model, target is {model.cfg.variant!r}",
                                   found=cfg.variant, expected=model.cfg.variant)
    return load_into(model, tensors, manifest.get("rbf"), grid)
