"""
On-disk formats: TNSR tensor files, JSON manifests and checkpoints.

TNSR layout:
    b"TNSR" | u8 version (1) | u8 rank | rank x u64 LE extents | f32 LE data
"""

from __future__ import annotations

import json
import logging
import struct
import threading
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import numpy as np

from .errors import TensorFormatError
from .layers import ParamGroup
from .wavelet import SubbandSet, band_names

logger = logging.getLogger("triplet.storage")

MAGIC = b"TNSR"
VERSION = 1
CHECKPOINT_FORMAT = 1
MANIFEST_NAME = "manifest.json"

PathLike = Union[str, Path]

_json_lock = threading.Lock()


# ============================================================================
# TNSR
# ============================================================================

def encode_tnsr(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f4", order="C")
    if array.ndim > 255:
        raise TensorFormatError(f"rank {array.ndim} does not fit in one byte")
    header = MAGIC + struct.pack("<BB", VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes()


def decode_tnsr(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(payload) < 6 or payload[:4] != MAGIC:
        raise TensorFormatError(f"{source}: not a TNSR file")
    version, rank = struct.unpack_from("<BB", payload, 4)
    if version != VERSION:
        raise TensorFormatError(f"{source}: unsupported TNSR version {version}")
    offset = 6 + 8 * rank
    if len(payload) < offset:
        raise TensorFormatError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", payload, 6)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(payload) != offset + 4 * count:
        raise TensorFormatError(f"{source}: expected {count} values, found {(len(payload) - offset) // 4}")
    data = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
    return data.reshape(shape).astype(np.float32)


def write_tnsr(path: PathLike, array: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tnsr(array))
    return path


def read_tnsr(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise TensorFormatError(f"{path}: file not found")
    return decode_tnsr(path.read_bytes(), str(path))


# ============================================================================
# JSON documents
# ============================================================================

def save_json(path: PathLike, document: Mapping[str, Any]) -> Path:
    path = Path(path)
    with _json_lock:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2, sort_keys=True)
    return path


def load_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise TensorFormatError(f"{path}: file not found") from None
    except json.JSONDecodeError as e:
        raise TensorFormatError(f"{path}: invalid JSON ({e})") from None


# ============================================================================
# Sub-band sets
# ============================================================================

def save_subbands(path: PathLike, bands: SubbandSet) -> Path:
    """One TNSR of stacked bands plus a JSON sidecar next to it."""
    path = Path(path)
    stacked = bands.stacked()
    write_tnsr(path, stacked)
    channels = stacked.shape[0] // len(bands)
    save_json(path.with_suffix(".json"), {
        "level": bands.level,
        "channels": channels,
        "band_order": band_names(bands.level),
    })
    return path


def load_subbands(path: PathLike) -> SubbandSet:
    path = Path(path)
    sidecar = load_json(path.with_suffix(".json"))
    try:
        level, channels = int(sidecar["level"]), int(sidecar["channels"])
    except (KeyError, TypeError, ValueError):
        raise TensorFormatError(f"{path}: sidecar lacks level/channels") from None
    return SubbandSet.from_stacked(read_tnsr(path), level, channels)


# ============================================================================
# Checkpoints
# ============================================================================

def save_checkpoint(directory: PathLike, groups: Mapping[str, ParamGroup],
                    config: Mapping[str, Any], config_hash: str) -> Path:
    """
    Write every parameter and buffer as `<network>.<name>.tnsr` plus a
    manifest listing names, shapes and frozen flags.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    networks: Dict[str, Any] = {}
    for net_name, group in groups.items():
        params = {}
        for name, tensor in group.params.items():
            filename = f"{net_name}.{name}.tnsr"
            write_tnsr(directory / filename, tensor.data)
            params[name] = {"shape": list(tensor.shape), "file": filename}
        buffers = {}
        for name, array in group.buffer_arrays().items():
            filename = f"{net_name}.{name}.tnsr"
            write_tnsr(directory / filename, array)
            buffers[name] = {"shape": list(array.shape), "file": filename}
        networks[net_name] = {"frozen": group.frozen, "params": params, "buffers": buffers,
                              "digest": group.digest()}
    save_json(directory / MANIFEST_NAME, {
        "format": CHECKPOINT_FORMAT,
        "config": dict(config),
        "config_hash": config_hash,
        "networks": networks,
    })
    logger.info("Checkpoint saved to %s (%d networks)", directory, len(networks))
    return directory


def read_manifest(directory: PathLike) -> Dict[str, Any]:
    manifest = load_json(Path(directory) / MANIFEST_NAME)
    if manifest.get("format") != CHECKPOINT_FORMAT or "networks" not in manifest:
        raise TensorFormatError(f"{directory}: unsupported checkpoint manifest")
    return manifest


def load_into(directory: PathLike, groups: Mapping[str, ParamGroup]) -> Dict[str, Any]:
    """Fill existing ParamGroups from a checkpoint; shapes must agree."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    for net_name, group in groups.items():
        entry = manifest["networks"].get(net_name)
        if entry is None:
            raise TensorFormatError(f"{directory}: checkpoint has no network {net_name!r}")
        missing = set(group.params) - set(entry["params"])
        if missing:
            raise TensorFormatError(f"{directory}: {net_name} lacks parameters {sorted(missing)}")
        for name, tensor in group.params.items():
            array = read_tnsr(directory / entry["params"][name]["file"])
            if array.shape != tensor.shape:
                raise TensorFormatError(
                    f"{directory}: {net_name}.{name} has shape {array.shape}, expected {tensor.shape}"
                )
            tensor.data = array
        buffers = {name: read_tnsr(directory / meta["file"]) for name, meta in entry["buffers"].items()}
        if buffers:
            group.load_buffer_arrays(buffers)
        if entry.get("frozen"):
            group.freeze()
        else:
            group.unfreeze()
    return manifest
