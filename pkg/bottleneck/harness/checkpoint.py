"""
Checkpoint directories: `manifest.json` plus `tensors.bin`.

Each tensor record in the blob is a 4-byte dtype tag (`f32\\0` or `f64\\0`), a
little-endian uint32 ndim, ndim little-endian uint32 dims, then the raw
little-endian values. The manifest holds the run config, an index of records
(name, dtype, shape, offset, nbytes) and the blob's sha256.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from ..model.backbone import Backbone, BackboneParams
from ..model.processor import CacheProcessor, ProcessorParams
from ..numerics.tensor import Tensor
from ..schemas.config import BackboneConfig, ProcessorConfig

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_TAGS = {np.dtype(np.float32): b"f32\0", np.dtype(np.float64): b"f64\0"}
_DTYPES = {tag: dtype for dtype, tag in _TAGS.items()}


def encode_tensor(array: np.ndarray) -> bytes:
    dtype = np.dtype(array.dtype)
    if dtype not in _TAGS:
        raise ValueError(f"Unsupported checkpoint dtype: {dtype}")
    header = _TAGS[dtype] + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype.newbyteorder("<")).tobytes()


def decode_tensor(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record at `offset`; returns the array and the next offset."""
    tag = blob[offset : offset + 4]
    if tag not in _DTYPES:
        raise ValueError(f"Unknown dtype tag {tag!r} at offset {offset}")
    dtype = _DTYPES[tag]
    (ndim,) = struct.unpack_from("<I", blob, offset + 4)
    shape = struct.unpack_from(f"<{ndim}I", blob, offset + 8)
    start = offset + 8 + 4 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    end = start + count * dtype.itemsize
    data = np.frombuffer(blob[start:end], dtype=dtype.newbyteorder("<")).astype(dtype)
    return data.reshape(shape), end


def save_checkpoint(
    path: Path, config: Mapping[str, Any], tensors: Mapping[str, "Tensor | np.ndarray"]
) -> Path:
    """
    Write a checkpoint directory.

    Raises:
        RuntimeError: If the directory or either file cannot be written.
    """
    blob = bytearray()
    index = []
    for name, tensor in tensors.items():
        array = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
        record = encode_tensor(array)
        index.append(
            {
                "name": name,
                "dtype": _TAGS[np.dtype(array.dtype)].rstrip(b"\0").decode(),
                "shape": list(array.shape),
                "offset": len(blob),
                "nbytes": len(record),
            }
        )
        blob += record
    manifest = {
        "config": dict(config),
        "tensors": index,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / BLOB).write_bytes(bytes(blob))
        with open(path / MANIFEST, "w", encoding="utf-8", newline="\n") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise RuntimeError(f"Failed to write checkpoint {path}: {e}") from e
    logger.debug("Wrote checkpoint %s (%d tensors)", path, len(index))
    return path


def load_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    """
    Read a checkpoint directory.

    Returns:
        tuple[dict, dict[str, np.ndarray]]: The config and the tensors by name.

    Raises:
        ValueError: If the blob does not match the manifest.
    """
    with open(path / MANIFEST, encoding="utf-8") as f:
        manifest = json.load(f)
    blob = (path / BLOB).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"Checkpoint {path} is corrupt: sha256 mismatch")
    tensors = {}
    for entry in manifest["tensors"]:
        array, end = decode_tensor(blob, entry["offset"])
        if end - entry["offset"] != entry["nbytes"] or list(array.shape) != entry["shape"]:
            raise ValueError(f"Checkpoint {path}: record {entry['name']!r} does not match its index")
        tensors[entry["name"]] = array
    return manifest["config"], tensors


def checkpoint_digest(path: Path) -> str:
    with open(path / MANIFEST, encoding="utf-8") as f:
        return json.load(f)["sha256"]


def save_backbone(path: Path, backbone: Backbone, **extra) -> Path:
    config = {"kind": "backbone", "backbone": backbone.config.model_dump(mode="json"), **extra}
    return save_checkpoint(path, config, backbone.params.named())


def _assign(named: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray], path: Path) -> None:
    missing = set(named) - set(arrays)
    if missing:
        raise ValueError(f"Checkpoint {path} is missing tensors: {sorted(missing)}")
    for name, tensor in named.items():
        if arrays[name].shape != tensor.shape:
            raise ValueError(
                f"Checkpoint {path}: {name} has shape {arrays[name].shape}, expected {tensor.shape}"
            )
        tensor.data = arrays[name].copy()


def load_backbone(path: Path) -> Backbone:
    config, arrays = load_checkpoint(path)
    if config.get("kind") != "backbone":
        raise ValueError(f"{path} is not a backbone checkpoint")
    backbone_config = BackboneConfig.model_validate(config["backbone"])
    params = BackboneParams.init(backbone_config)
    _assign(params.named(), arrays, path)
    return Backbone(backbone_config, params)


def save_processor(path: Path, processor: CacheProcessor, **extra) -> Path:
    config = {
        "kind": "processor",
        "processor": processor.config.model_dump(mode="json"),
        "backbone": processor.backbone.model_dump(mode="json"),
        **extra,
    }
    return save_checkpoint(path, config, processor.params.named())


def load_processor(path: Path, backbone_config: Optional[BackboneConfig] = None) -> CacheProcessor:
    """
    Load a processor, checking it fits `backbone_config` when given.

    Raises:
        ValueError: If the processor was trained for a backbone with a
            different layer count, head count or head size.
    """
    config, arrays = load_checkpoint(path)
    if config.get("kind") != "processor":
        raise ValueError(f"{path} is not a processor checkpoint")
    trained_for = BackboneConfig.model_validate(config["backbone"])
    if backbone_config is not None:
        mine = (backbone_config.n_layers, backbone_config.n_heads, backbone_config.d_k)
        theirs = (trained_for.n_layers, trained_for.n_heads, trained_for.d_k)
        if mine != theirs:
            raise ValueError(
                f"Processor checkpoint {path} expects (L, H, d_k) = {theirs}, backbone has {mine}"
            )
    processor_config = ProcessorConfig.model_validate(config["processor"])
    params = ProcessorParams.init(processor_config, trained_for)
    _assign(params.named(), arrays, path)
    return CacheProcessor(processor_config, trained_for, params)
