"""Versioned binary checkpoints.

Layout::

    b"CAMDSCK1"                     8-byte magic, last byte is the format version
    uint64 little-endian            length of the metadata document
    UTF-8 JSON metadata             config, iteration, array manifest, training state
    float32 little-endian arrays    in manifest order, offsets relative to this section

The metadata is serialized with sorted keys and fixed separators so that
save -> load -> save reproduces the same bytes.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from camds.errors import CheckpointFormatError, CheckpointVersionError, ConfigurationError
from camds.model import Model, ModelConfig
from camds.optim import OptimizerState

logger = logging.getLogger(__name__)

MAGIC_PREFIX = b"CAMDSCK"
FORMAT_VERSION = 1
MAGIC = MAGIC_PREFIX + str(FORMAT_VERSION).encode("ascii")
_LENGTH = struct.Struct("<Q")
_HEADER_SIZE = len(MAGIC) + _LENGTH.size


@dataclass
class Checkpoint:
    """Everything needed to resume training or run inference."""

    model: Model
    iteration: int = 0
    optimizer: Optional[OptimizerState] = None
    rng_state: Optional[dict[str, Any]] = None
    data_order: Optional[list[int]] = None
    cursor: int = 0
    train_config: Optional[dict[str, Any]] = None


def _canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(config: ModelConfig) -> str:
    return hashlib.sha256(_canonical_json(config.to_dict()).encode("utf-8")).hexdigest()


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    model = checkpoint.model
    arrays: list[tuple[str, str, np.ndarray]] = []
    for name, p in model.named_parameters().items():
        arrays.append((name, "parameter", p.data))
    for name, layer in model.norm_layers().items():
        arrays.append((name, "running_mean", layer.state.running_mean))
        arrays.append((name, "running_var", layer.state.running_var))
    if checkpoint.optimizer is not None:
        for name in model.named_parameters():
            arrays.append((name, "momentum", checkpoint.optimizer.buffers[name]))

    manifest = []
    chunks = []
    offset = 0
    for name, kind, array in arrays:
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        manifest.append({"name": name, "kind": kind, "shape": list(array.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)

    metadata = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "iteration": int(checkpoint.iteration),
        "arrays": manifest,
        "norm_initialized": model.norm_initialized(),
        "has_optimizer": checkpoint.optimizer is not None,
        "rng_state": checkpoint.rng_state,
        "data_order": checkpoint.data_order,
        "cursor": int(checkpoint.cursor),
        "train_config": checkpoint.train_config,
    }
    document = _canonical_json(metadata).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(document)) + document + b"".join(chunks)


def _read_arrays(
    blob: bytes, manifest: list[dict[str, Any]], data_start: int, dtype: np.dtype
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], int]:
    """Slice the float32 arrays listed in ``manifest`` out of ``blob``."""
    state: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    end = data_start
    for entry in manifest:
        name = str(entry["name"])
        shape = tuple(int(d) for d in entry["shape"])
        start = data_start + int(entry["offset"])
        if start < data_start or any(d < 0 for d in shape):
            raise CheckpointFormatError(
                f"array {name!r} has a negative extent", offset=_HEADER_SIZE
            )
        count = int(np.prod(shape, dtype=np.int64))
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointFormatError(f"truncated array {name!r}", offset=start)
        array = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        array = array.astype(dtype)
        kind = entry["kind"]
        if kind == "parameter":
            state[name] = array
        elif kind in ("running_mean", "running_var"):
            state[f"{name}.{kind}"] = array
        elif kind == "momentum":
            buffers[name] = array
        else:
            raise CheckpointFormatError(f"unknown array kind {kind!r}", offset=_HEADER_SIZE)
    return state, buffers, end


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC):
        raise CheckpointFormatError("truncated magic", offset=len(blob))
    if blob[: len(MAGIC_PREFIX)] != MAGIC_PREFIX:
        raise CheckpointFormatError("not a camds checkpoint (bad magic)", offset=0)
    found = blob[len(MAGIC_PREFIX) : len(MAGIC)].decode("ascii", errors="replace")
    if found != str(FORMAT_VERSION):
        raise CheckpointVersionError(
            f"checkpoint format version {found} is not supported (this build reads version "
            f"{FORMAT_VERSION})"
        )
    if len(blob) < _HEADER_SIZE:
        raise CheckpointFormatError("truncated metadata length", offset=len(MAGIC))
    (length,) = _LENGTH.unpack_from(blob, len(MAGIC))
    data_start = _HEADER_SIZE + length
    if data_start > len(blob):
        raise CheckpointFormatError(
            f"truncated metadata: need {length} bytes", offset=len(blob)
        )
    try:
        metadata = json.loads(blob[_HEADER_SIZE:data_start].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(
            "metadata is not UTF-8", offset=_HEADER_SIZE + exc.start
        ) from exc
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(
            f"metadata is not valid JSON: {exc.msg}", offset=_HEADER_SIZE + exc.pos
        ) from exc

    try:
        version = metadata["format_version"]
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint metadata declares version {version}, expected {FORMAT_VERSION}"
            )
        config = ModelConfig.from_dict(metadata["config"])
        if metadata["config_hash"] != config_hash(config):
            raise CheckpointFormatError("config hash does not match config", offset=_HEADER_SIZE)
        manifest = metadata["arrays"]
        initialized = metadata["norm_initialized"]
        iteration = int(metadata["iteration"])
        has_optimizer = bool(metadata["has_optimizer"])
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise CheckpointFormatError(f"invalid metadata: {exc}", offset=_HEADER_SIZE) from exc

    try:
        state, buffers, end = _read_arrays(blob, manifest, data_start, config.np_dtype)
    except CheckpointFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(
            f"invalid array manifest entry: {exc!r}", offset=_HEADER_SIZE
        ) from exc
    if end != len(blob):
        raise CheckpointFormatError(f"{len(blob) - end} trailing bytes", offset=end)

    model = Model(config)
    try:
        model.load_state_dict(state, initialized)
    except (ConfigurationError, ValueError) as exc:
        raise CheckpointFormatError(
            f"arrays do not match config: {exc}", offset=data_start
        ) from exc

    optimizer = OptimizerState(buffers, iteration) if has_optimizer else None
    return Checkpoint(
        model=model,
        iteration=iteration,
        optimizer=optimizer,
        rng_state=metadata.get("rng_state"),
        data_order=metadata.get("data_order"),
        cursor=int(metadata.get("cursor", 0)),
        train_config=metadata.get("train_config"),
    )


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> str:
    """Write ``checkpoint`` to ``path`` and return the SHA-256 of the file."""
    blob = encode_checkpoint(checkpoint)
    path = Path(path)
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    logger.info(
        "Saved checkpoint %s (iteration %d, sha256 %s)", path, checkpoint.iteration, digest[:12]
    )
    return digest


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    checkpoint = decode_checkpoint(Path(path).read_bytes())
    logger.info("Loaded checkpoint %s (iteration %d)", path, checkpoint.iteration)
    return checkpoint


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
