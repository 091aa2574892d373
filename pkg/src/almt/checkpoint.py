"""Versioned binary checkpoints.

Layout (little-endian)::

    b"ALMT" | u32 version | u32 n | n bytes canonical JSON model config
    then per parameter, in registry order:
    u32 name_len | name (utf-8) | u32 rank | u32 extent * rank | f32 payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FormatError
from .model import ALMTModel, ModelConfig

MAGIC = b"ALMT"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]

    @classmethod
    def from_model(cls, model: ALMTModel) -> "Checkpoint":
        return cls(model.config, {k: v.astype(np.float32) for k, v in model.state_dict().items()})

    def build_model(self) -> ALMTModel:
        model = ALMTModel(self.config)
        model.load_state_dict(self.state)
        return model

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        cfg = self.config.to_json().encode("utf-8")
        buf.write(struct.pack("<II", VERSION, len(cfg)))
        buf.write(cfg)
        for name, arr in self.state.items():
            encoded = name.encode("utf-8")
            buf.write(struct.pack("<I", len(encoded)))
            buf.write(encoded)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        view = memoryview(raw)
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(view):
                raise FormatError(f"truncated checkpoint while reading {what}", pos)
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4, "magic")) != MAGIC:
            raise FormatError("bad checkpoint magic", 0)
        version, n_cfg = struct.unpack("<II", take(8, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        cfg_at = pos
        try:
            config = ModelConfig.from_dict(json.loads(bytes(take(n_cfg, "config")).decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"unreadable config block: {exc}", cfg_at) from exc
        state = {}
        while pos < len(view):
            (n_name,) = struct.unpack("<I", take(4, "name length"))
            name = bytes(take(n_name, "name")).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
            shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
            count = int(np.prod(shape)) if rank else 1
            payload = take(4 * count, f"payload of {name}")
            state[name] = np.frombuffer(payload, dtype=_F32).astype(np.float32).reshape(shape)
        return cls(config, state)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def save_checkpoint(model: ALMTModel, path) -> None:
    Checkpoint.from_model(model).save(path)


def load_checkpoint(path) -> ALMTModel:
    return Checkpoint.load(path).build_model()
