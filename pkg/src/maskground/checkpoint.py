"""Single-file checkpoint container.

Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON header
(architecture dims, vocabulary, tensor names/dtypes/shapes/offsets, metadata),
then the concatenated little-endian float32 tensor data. Saving and loading
round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .model import ModelConfig, VisionModel, build_vision_model
from .text import EmbeddingProvider

MAGIC = b"MGCP"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, model_config: ModelConfig,
                    tensors: Mapping[str, np.ndarray], *,
                    vocab: list[str], oov_policy: str = "unk",
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        # asarray, not ascontiguousarray: the latter promotes 0-dim scalars
        # (like the log-temperature) to 1-dim and breaks the round-trip.
        arr = np.asarray(tensors[name], dtype=np.float32)
        data = arr.astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": "<f4", "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "model": model_config.to_dict(),
        "vocab": list(vocab),
        "oov_policy": oov_policy,
        "tensors": entries,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (header, name -> float32 array)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    base = 8 + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        flat = np.frombuffer(raw, dtype="<f4", count=entry["nbytes"] // 4,
                             offset=start)
        tensors[entry["name"]] = flat.reshape(entry["shape"]).copy()
    return header, tensors


def checkpoint_model_id(path: str | Path) -> str:
    """Stable identifier for a checkpoint: the sha256 of its bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_to_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + name: tensor.detach().cpu().numpy().astype(np.float32)
            for name, tensor in module.state_dict().items()}


def arrays_to_state(module: torch.nn.Module, arrays: Mapping[str, np.ndarray],
                    prefix: str = "") -> None:
    state = {}
    for name, tensor in module.state_dict().items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        arr = arrays[key]
        if list(arr.shape) != list(tensor.shape):
            raise CheckpointError(
                f"tensor {key!r} has shape {list(arr.shape)}, expected {list(tensor.shape)}")
        state[name] = torch.from_numpy(arr.copy())
    module.load_state_dict(state)


def save_model(path: str | Path, model: VisionModel,
               embedder: EmbeddingProvider, *, meta: dict | None = None,
               extra_tensors: Mapping[str, np.ndarray] | None = None) -> Path:
    tensors = state_to_arrays(model, "vision.")
    tensors.update(state_to_arrays(embedder, "text."))
    if extra_tensors:
        tensors.update({k: np.asarray(v, dtype=np.float32)
                        for k, v in extra_tensors.items()})
    return save_checkpoint(path, model.config, tensors,
                           vocab=list(embedder.vocab),
                           oov_policy=embedder.oov_policy, meta=meta)


def load_model(path: str | Path) -> tuple[VisionModel, EmbeddingProvider, dict,
                                          dict[str, np.ndarray]]:
    """Rebuild the model and embedding provider from a checkpoint.

    Returns (model, embedder, header, extra tensors not owned by either
    module, e.g. optimizer state).
    """
    header, tensors = load_checkpoint(path)
    config = ModelConfig.from_dict(header["model"])
    model = build_vision_model(config, seed=0)
    vocab = [w for w in header["vocab"] if w != EmbeddingProvider.UNK]
    embedder = EmbeddingProvider(vocab, config.embed_dim,
                                 oov_policy=header.get("oov_policy", "unk"))
    arrays_to_state(model, tensors, "vision.")
    arrays_to_state(embedder, tensors, "text.")
    consumed = {f"vision.{n}" for n in model.state_dict()}
    consumed |= {f"text.{n}" for n in embedder.state_dict()}
    extra = {k: v for k, v in tensors.items() if k not in consumed}
    model.eval()
    return model, embedder, header, extra
