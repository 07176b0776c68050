"""Checkpoint container, binary serialization, and weight-space merging.

File layout (all integers little-endian):
  magic "MELT" | version u32 | entry_count u32 | entries...
  entry: name_len u16 | name utf-8 | rank u8 | dims u32 x rank | payload f32

Model configuration rides along as rank-0 "config/" entries at the front, so
one file is self-describing; every integer field is exactly representable in
float32 at any plausible size.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, MultiwayModel, POOL_MODES, init_params
from .tensor import Tensor

MAGIC = b"MELT"
VERSION = 1

_CONFIG_INT_FIELDS = ("vocab_size", "layers", "hidden_dim", "heads", "image_size",
                      "patch_size", "vl_expert_layers", "max_text_len", "proj_dim")


class CheckpointError(Exception):
    """Base class for unreadable checkpoint files."""


class BadMagic(CheckpointError):
    pass


class BadVersion(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    entries: dict[str, np.ndarray]  # float32, deterministic order

    def __post_init__(self):
        for name, arr in self.entries.items():
            if arr.dtype != np.float32:
                self.entries[name] = arr.astype(np.float32)


def checkpoint_from_model(model: MultiwayModel) -> Checkpoint:
    entries = {name: np.asarray(p.data, dtype=np.float32).copy()
               for name, p in model.params.items()}
    return Checkpoint(model.config, entries)


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float64) -> MultiwayModel:
    """Rebuild a model, validating entry names and shapes against the config."""
    template = init_params(ckpt.config, seed=0, dtype=np.float32)
    missing = set(template) - set(ckpt.entries)
    extra = set(ckpt.entries) - set(template)
    if missing or extra:
        raise CheckpointError(
            f"entry names do not match config: missing={sorted(missing)} extra={sorted(extra)}")
    params: dict[str, Tensor] = {}
    for name, ref in template.items():
        arr = ckpt.entries[name]
        if arr.shape != ref.data.shape:
            raise CheckpointError(
                f"entry {name!r} has shape {arr.shape}, config implies {ref.data.shape}")
        params[name] = Tensor(arr.astype(dtype))
    return MultiwayModel(ckpt.config, params)


# ---------------------------------------------------------------------------
# serialization


def _config_entries(config: ModelConfig) -> dict[str, np.ndarray]:
    out = {}
    for field in _CONFIG_INT_FIELDS:
        out[f"config/{field}"] = np.asarray(float(getattr(config, field)), dtype=np.float32)
    out["config/pool"] = np.asarray(float(POOL_MODES.index(config.pool)), dtype=np.float32)
    return out


def _config_from_entries(entries: dict[str, np.ndarray]) -> ModelConfig:
    kwargs = {}
    for field in _CONFIG_INT_FIELDS:
        key = f"config/{field}"
        if key not in entries:
            raise CheckpointError(f"missing config entry {key!r}")
        kwargs[field] = int(round(float(entries[key])))
    pool_idx = int(round(float(entries.get("config/pool", np.float32(0.0)))))
    if not 0 <= pool_idx < len(POOL_MODES):
        raise CheckpointError(f"bad pool selector {pool_idx}")
    kwargs["pool"] = POOL_MODES[pool_idx]
    return ModelConfig(**kwargs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: serialize to a sibling temp file, then rename over."""
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    ordered = {**_config_entries(ckpt.config), **ckpt.entries}
    blob += struct.pack("<I", len(ordered))
    for name, arr in ordered.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes, label: str):
        self.raw = raw
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise Truncated(f"{self.label}: needed {n} bytes at offset {self.pos}, "
                            f"file has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    reader = _Reader(path.read_bytes(), str(path))
    if reader.take(4) != MAGIC:
        raise BadMagic(f"{path}: not a model checkpoint (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise BadVersion(f"{path}: unsupported version {version}")
    count = reader.u32()
    raw_entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u16()).decode("utf-8")
        rank = reader.u8()
        shape = tuple(reader.u32() for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        payload = reader.take(4 * size)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        if name in raw_entries:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        raw_entries[name] = arr
    if reader.pos != len(reader.raw):
        raise Truncated(f"{path}: {len(reader.raw) - reader.pos} trailing bytes")
    config = _config_from_entries(raw_entries)
    entries = {k: v for k, v in raw_entries.items() if not k.startswith("config/")}
    return Checkpoint(config, entries)


# ---------------------------------------------------------------------------
# weight-space interpolation


@dataclass(frozen=True)
class MergeSpec:
    alpha: float = 0.5  # weight on the first checkpoint

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def wise_ft_merge(a: Checkpoint, b: Checkpoint, spec: MergeSpec = MergeSpec()) -> Checkpoint:
    """Elementwise convex combination alpha*a + (1-alpha)*b per named entry.

    Endpoint alphas return exact copies so no float round-trip can perturb
    them. Mismatched entry names are an error listing the difference.
    """
    if a.config != b.config:
        raise CheckpointError(f"config mismatch: {a.config} vs {b.config}")
    names_a, names_b = set(a.entries), set(b.entries)
    if names_a != names_b:
        diff = sorted(names_a.symmetric_difference(names_b))
        raise CheckpointError(f"entry names differ between checkpoints: {diff}")
    for name in a.entries:
        if a.entries[name].shape != b.entries[name].shape:
            raise CheckpointError(
                f"entry {name!r} shape mismatch: "
                f"{a.entries[name].shape} vs {b.entries[name].shape}")
    if spec.alpha == 1.0:
        return Checkpoint(a.config, {k: v.copy() for k, v in a.entries.items()})
    if spec.alpha == 0.0:
        return Checkpoint(b.config, {k: v.copy() for k, v in b.entries.items()})
    wa = np.float32(spec.alpha)
    wb = np.float32(1.0 - spec.alpha)
    merged = {name: wa * a.entries[name] + wb * b.entries[name] for name in a.entries}
    return Checkpoint(a.config, merged)
