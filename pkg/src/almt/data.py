"""Multimodal feature datasets: MMF binary I/O, synthetic generation, splits, batches, noise probes.

MMF layout (little-endian)::

    b"MMF1" | u32 sample_count | u32 label_range_code
    per sample: f32 label, then language, visual, audio blocks,
    each block: u32 T | u32 d | T*d f32 row-major
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

MODALITIES = ("language", "visual", "audio")
MMF_MAGIC = b"MMF1"
LABEL_RANGES = {0: (-3.0, 3.0), 1: (-1.0, 1.0)}
SPLITS = ("train", "valid", "test")

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Malformed MMF or checkpoint bytes; ``offset`` is where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ValidationError(ValueError):
    pass


@dataclass
class Sample:
    language: np.ndarray
    visual: np.ndarray
    audio: np.ndarray
    label: float

    def __post_init__(self):
        for m in MODALITIES:
            arr = np.asarray(getattr(self, m), dtype=np.float32)
            if arr.ndim != 2:
                raise ValidationError(f"{m} features must be [T, d], got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValidationError(f"{m} features contain non-finite values")
            setattr(self, m, arr)
        self.label = float(np.float32(self.label))

    @property
    def features(self) -> dict[str, np.ndarray]:
        return {m: getattr(self, m) for m in MODALITIES}

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {m: getattr(self, m).shape for m in MODALITIES}


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)
    label_range_code: int = 0
    split: str | None = None

    def __post_init__(self):
        if self.label_range_code not in LABEL_RANGES:
            raise ValidationError(f"unknown label range code {self.label_range_code}")
        if self.split is not None and self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}")
        self.validate()

    @property
    def label_range(self) -> tuple[float, float]:
        return LABEL_RANGES[self.label_range_code]

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def shapes(self) -> dict[str, tuple[int, int]] | None:
        return self.samples[0].shapes() if self.samples else None

    def validate(self) -> None:
        if not self.samples:
            return
        lo, hi = self.label_range
        ref = self.samples[0].shapes()
        for i, s in enumerate(self.samples):
            if s.shapes() != ref:
                raise ValidationError(f"sample {i} has shapes {s.shapes()}, expected {ref}")
            if not lo <= s.label <= hi:
                raise ValidationError(f"sample {i} label {s.label} outside [{lo}, {hi}]")

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float32)

    def stack(self, indices: Sequence[int] | None = None) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Batch arrays ``{modality: [B, T_m, d_m]}`` and labels ``[B]``."""
        idx = range(len(self.samples)) if indices is None else indices
        chosen = [self.samples[i] for i in idx]
        inputs = {m: np.stack([getattr(s, m) for s in chosen]) for m in MODALITIES}
        return inputs, np.array([s.label for s in chosen], dtype=np.float32)

    def subset(self, indices: Sequence[int], split: str | None = None) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.label_range_code, split)


# ---------------------------------------------------------------------------
# MMF


def mmf_bytes(dataset: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MMF_MAGIC)
    buf.write(struct.pack("<II", len(dataset), dataset.label_range_code))
    for s in dataset:
        buf.write(struct.pack("<f", s.label))
        for m in MODALITIES:
            arr = getattr(s, m)
            buf.write(struct.pack("<II", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return buf.getvalue()


def write_mmf(dataset: Dataset, path) -> None:
    Path(path).write_bytes(mmf_bytes(dataset))


def parse_mmf(raw: bytes) -> Dataset:
    view = memoryview(raw)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated MMF: need {n} bytes for {what}, {len(view) - pos} left", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != MMF_MAGIC:
        raise FormatError(f"bad MMF magic {magic!r}", 0)
    count, code = struct.unpack("<II", take(8, "header"))
    if code not in LABEL_RANGES:
        raise FormatError(f"unknown label range code {code}", 8)
    samples = []
    for i in range(count):
        (label,) = struct.unpack("<f", take(4, f"label of sample {i}"))
        blocks = {}
        for m in MODALITIES:
            t, d = struct.unpack("<II", take(8, f"{m} header of sample {i}"))
            payload = take(4 * t * d, f"{m} payload of sample {i}")
            blocks[m] = np.frombuffer(payload, dtype=_F32).astype(np.float32).reshape(t, d)
        samples.append(Sample(label=label, **blocks))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after {count} samples", pos)
    return Dataset(samples, code)


def read_mmf(path) -> Dataset:
    return parse_mmf(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    """Language carries the label in every frame; each auxiliary frame does so
    with probability ``relevance`` and is ``N(0, noise_sigma^2)`` otherwise."""

    n_samples: int = 256
    lengths: Mapping[str, int] = field(default_factory=lambda: {"language": 10, "visual": 10, "audio": 10})
    dims: Mapping[str, int] = field(default_factory=lambda: {"language": 32, "visual": 8, "audio": 4})
    label_range_code: int = 0
    relevance: float = 1.0
    noise_sigma: float = 0.0
    language_noise: float = 0.1
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if not 0.0 <= self.relevance <= 1.0:
            raise ValidationError("relevance must lie in [0, 1]")
        if self.noise_sigma < 0 or self.language_noise < 0:
            raise ValidationError("noise levels must be non-negative")
        if self.n_samples < 0:
            raise ValidationError("n_samples must be non-negative")
        for table in (self.lengths, self.dims):
            if set(table) != set(MODALITIES) or min(table.values()) < 1:
                raise ValidationError(f"lengths/dims must give a positive value for each of {MODALITIES}")
        if self.label_range_code not in LABEL_RANGES:
            raise ValidationError(f"unknown label range code {self.label_range_code}")
        return self


def _unit_rows(rng, rows, cols):
    w = rng.normal(size=(rows, cols))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def synthetic_directions(cfg: SynthConfig) -> dict[str, np.ndarray]:
    """Per-frame unit direction vectors used by :func:`generate_synthetic`."""
    rng = np.random.default_rng([cfg.seed, 0])
    return {m: _unit_rows(rng, cfg.lengths[m], cfg.dims[m]) for m in MODALITIES}


def generate_synthetic(cfg: SynthConfig, split: str | None = None) -> Dataset:
    cfg.validate()
    directions = synthetic_directions(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    lo, hi = LABEL_RANGES[cfg.label_range_code]
    samples = []
    for _ in range(cfg.n_samples):
        y = np.float32(rng.uniform(lo, hi))
        feats = {}
        w = directions["language"]
        feats["language"] = y * w + rng.normal(0.0, cfg.language_noise, size=w.shape)
        for m in ("visual", "audio"):
            w = directions[m]
            carries = rng.random(w.shape[0]) < cfg.relevance
            noise = rng.normal(0.0, cfg.noise_sigma, size=w.shape)
            feats[m] = np.where(carries[:, None], y * w, noise)
        samples.append(Sample(label=y, **feats))
    return Dataset(samples, cfg.label_range_code, split)


# ---------------------------------------------------------------------------
# splitting and batching


def split_dataset(dataset: Dataset, fractions: Sequence[float], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle once and cut into train/valid/test by ``fractions``.

    Sizes are ``floor(f * n)`` for valid and test; train takes the rest when
    the fractions sum to 1, otherwise ``floor(f_train * n)``.
    """
    if len(fractions) != 3 or min(fractions) <= 0 or sum(fractions) > 1 + 1e-9:
        raise ValidationError(f"fractions must be three positive numbers summing to <= 1, got {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_valid = int(np.floor(fractions[1] * n + 1e-9))
    n_test = int(np.floor(fractions[2] * n + 1e-9))
    if abs(sum(fractions) - 1.0) <= 1e-9:
        n_train = n - n_valid - n_test
    else:
        n_train = int(np.floor(fractions[0] * n + 1e-9))
    if n_train < 1:
        raise ValidationError("split leaves the training set empty")
    cuts = np.cumsum([n_train, n_valid, n_test])
    parts = np.split(order[:cuts[-1]], cuts[:-1])
    return tuple(dataset.subset(p.tolist(), name) for p, name in zip(parts, SPLITS))


@dataclass
class Batch:
    inputs: dict[str, np.ndarray]
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


def iterate_batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[Batch]:
    """One pass over ``dataset``; the last batch may be short."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        inputs, labels = dataset.stack(idx)
        yield Batch(inputs, labels, idx)


# ---------------------------------------------------------------------------
# noise probe


def frame_noise(shape_d: int, amplitude: float, seed: int, dtype=np.float32) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, 1.0, size=shape_d).astype(dtype) * dtype(amplitude)


def inject_frame_noise(sample: Sample, modality: str, frame_index: int, amplitude: float, seed: int) -> Sample:
    """Copy of ``sample`` with ``N(0, amplitude^2)`` noise added to one frame of one modality."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    feats = getattr(sample, modality)
    if not 0 <= frame_index < feats.shape[0]:
        raise IndexError(f"frame {frame_index} outside {modality} length {feats.shape[0]}")
    copies = {m: getattr(sample, m).copy() for m in MODALITIES}
    if amplitude != 0:
        copies[modality][frame_index] += frame_noise(feats.shape[1], amplitude, seed)
    return replace(sample, **copies)
