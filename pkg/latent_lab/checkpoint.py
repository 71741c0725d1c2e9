"""Checkpoint files: a JSON header followed by raw little-endian float32 blobs."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .const import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from .errors import CheckpointError, ConfigError
from .model import CausalTransformer, ModelConfig
from .tensor import ParameterStore
from .tokenizer import Vocabulary

_LOGGER = logging.getLogger(__name__)

_BLOB_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: CausalTransformer
    vocab: Vocabulary
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    model: CausalTransformer,
    vocab: Vocabulary,
    metadata: dict[str, Any] | None = None,
) -> Path:
    """Write ``model`` with its vocabulary and run metadata."""
    path = Path(path)
    tensors, offset = [], 0
    blobs = []
    for name, param in model.store.items():
        blob = np.ascontiguousarray(param.data, dtype=_BLOB_DTYPE).tobytes()
        tensors.append({"name": name, "shape": list(param.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "vocabulary": list(vocab.tokens),
        "subword": vocab.subword,
        "metadata": metadata or {},
        "tensors": tensors,
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<Q", len(encoded)))
        handle.write(encoded)
        for blob in blobs:
            handle.write(blob)
    tmp.replace(path)
    _LOGGER.debug("Saved checkpoint %s (%d tensors)", path, len(tensors))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint and validate every tensor against its config."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"Cannot read checkpoint {path}: {err}") from err
    magic_len = len(CHECKPOINT_MAGIC)
    if raw[:magic_len] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a latent-lab checkpoint")
    if len(raw) < magic_len + 8:
        raise CheckpointError(f"Checkpoint {path} is truncated before its header")
    (header_len,) = struct.unpack("<Q", raw[magic_len : magic_len + 8])
    body_start = magic_len + 8 + header_len
    try:
        header = json.loads(raw[magic_len + 8 : body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"Corrupt checkpoint header in {path}: {err}") from err
    if not isinstance(header, dict):
        raise CheckpointError(f"Corrupt checkpoint header in {path}: not a mapping")
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format {header.get('format_version')}")

    try:
        config = ModelConfig.from_dict(header["model_config"])
        vocab = Vocabulary(tuple(header["vocabulary"]), bool(header["subword"]))
    except (KeyError, TypeError, ConfigError) as err:
        raise CheckpointError(f"Checkpoint config is invalid: {err}") from err
    if config.vocab_size != len(vocab):
        raise CheckpointError(f"Config vocab_size {config.vocab_size} != vocabulary length {len(vocab)}")

    expected = config.parameter_shapes()
    try:
        found = {entry["name"]: entry for entry in header["tensors"]}
    except (KeyError, TypeError) as err:
        raise CheckpointError(f"Checkpoint tensor table is invalid: {err}") from err
    if set(found) != set(expected):
        raise CheckpointError(
            f"Checkpoint tensors differ from config: missing {sorted(set(expected) - set(found))}, "
            f"unexpected {sorted(set(found) - set(expected))}"
        )
    store = ParameterStore()
    for name, shape in expected.items():
        entry = found[name]
        try:
            stored_shape, offset, nbytes = tuple(entry["shape"]), int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as err:
            raise CheckpointError(f"Tensor {name} has an invalid table entry: {err}") from err
        if stored_shape != shape:
            raise CheckpointError(f"Tensor {name} has shape {list(stored_shape)}, config expects {list(shape)}")
        start = body_start + offset
        blob = raw[start : start + nbytes]
        if len(blob) != int(np.prod(shape)) * _BLOB_DTYPE.itemsize:
            raise CheckpointError(f"Tensor {name} is truncated")
        store.add(name, np.frombuffer(blob, dtype=_BLOB_DTYPE).reshape(shape).astype(np.float32))
    _LOGGER.info("Loaded checkpoint %s (%d parameters)", path, store.num_parameters())
    return Checkpoint(model=CausalTransformer(config, store), vocab=vocab, metadata=header.get("metadata", {}))
