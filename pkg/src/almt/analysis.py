"""Attention diagnostics: dataset-averaged AHL maps and the peak-frame noise probe."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, Sample, frame_noise
from .model import MODALITIES, ALMTModel, AttentionTrace

# which AHL attention map reads keys from which modality
MAP_FOR_MODALITY = {"audio": "alpha", "visual": "beta"}


def sample_inputs(sample: Sample) -> dict[str, np.ndarray]:
    return {m: getattr(sample, m)[None] for m in MODALITIES}


def trace_sample(model: ALMTModel, sample: Sample, embedded_noise=None) -> AttentionTrace:
    with T.no_grad():
        _, trace = model.forward(sample_inputs(sample), embedded_noise)
    return trace


def average_attention(model: ALMTModel, dataset: Dataset, n: int | None = None,
                      batch_size: int = 64) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Head- and sample-averaged alpha and beta per AHL layer over the first ``n`` samples."""
    n = len(dataset) if n is None else min(n, len(dataset))
    sums_a, sums_b = None, None
    with T.no_grad():
        for start in range(0, n, batch_size):
            inputs, _ = dataset.stack(range(start, min(n, start + batch_size)))
            _, trace = model.forward(inputs)
            part_a = [a.sum(axis=0) for a in trace.alpha]
            part_b = [b.sum(axis=0) for b in trace.beta]
            if sums_a is None:
                sums_a, sums_b = part_a, part_b
            else:
                sums_a = [s + p for s, p in zip(sums_a, part_a)]
                sums_b = [s + p for s, p in zip(sums_b, part_b)]
    if sums_a is None:
        return [], []
    return [s / n for s in sums_a], [s / n for s in sums_b]


def embedded_row_noise(model: ALMTModel, row: int, amplitude: float, seed: int) -> np.ndarray:
    """``[1, T, d]`` array that is zero except for ``N(0, amplitude^2)`` in ``row``."""
    cfg = model.config
    if not 0 <= row < cfg.token_len:
        raise IndexError(f"row {row} outside embedded length {cfg.token_len}")
    noise = np.zeros((1, cfg.token_len, cfg.model_dim), dtype=T.get_default_dtype())
    noise[0, row] = frame_noise(cfg.model_dim, amplitude, seed, noise.dtype.type)
    return noise


@dataclass
class ProbeResult:
    modality: str
    layer: int
    column: int
    clean_mass: float
    noised_mass: float
    clean: AttentionTrace
    noised: AttentionTrace

    @property
    def delta(self) -> float:
        return self.noised_mass - self.clean_mass

    @property
    def suppressed(self) -> bool:
        return self.noised_mass < self.clean_mass


def column_mass(trace: AttentionTrace, which: str, layer: int) -> np.ndarray:
    """Mean attention each key column receives (averaged over heads and query rows)."""
    maps = trace.alpha if which == "alpha" else trace.beta
    return maps[layer][0].mean(axis=0)


def peak_frame_probe(model: ALMTModel, sample: Sample, modality: str = "visual",
                     amplitude: float = 5.0, seed: int = 0, layer: int = -1,
                     column: int | None = None) -> ProbeResult:
    """Perturb the embedded frame with the most attention and measure its attention mass again.

    Noise goes into the embedded ``H1`` row of ``modality``, which is the key
    row behind one column of alpha (audio) or beta (visual). ``column``
    defaults to the column with the largest clean mass in ``layer``.
    """
    which = MAP_FOR_MODALITY[modality]
    clean = trace_sample(model, sample)
    if not clean.ahl_layers:
        raise ValueError("model has no language-guided layers to probe")
    clean_cols = column_mass(clean, which, layer)
    col = int(np.argmax(clean_cols)) if column is None else column
    noise = embedded_row_noise(model, col, amplitude, seed)
    noised = trace_sample(model, sample, {modality: noise})
    noised_cols = column_mass(noised, which, layer)
    layer_index = clean.ahl_layers[layer]
    return ProbeResult(modality, layer_index, col, float(clean_cols[col]), float(noised_cols[col]),
                       clean, noised)


def write_matrix_csv(matrix: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(matrix):
            writer.writerow([repr(float(v)) for v in row])


def write_trace_csv(trace: AttentionTrace, out_dir, batch_index: int = 0) -> list[Path]:
    """One CSV per AHL layer per map, e.g. ``alpha_layer1.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for j, a, b in zip(trace.ahl_layers, trace.alpha, trace.beta):
        for name, mat in (("alpha", a), ("beta", b)):
            path = out_dir / f"{name}_layer{j}.csv"
            write_matrix_csv(mat[batch_index], path)
            written.append(path)
    return written


def write_delta_summary(clean: AttentionTrace, noised: AttentionTrace, path) -> None:
    """Per layer, map and key column: clean mass, noised mass and their difference."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "map", "column", "clean_mass", "noised_mass", "delta"])
        for idx, j in enumerate(clean.ahl_layers):
            for which in ("alpha", "beta"):
                c = column_mass(clean, which, idx)
                n = column_mass(noised, which, idx)
                for col in range(c.size):
                    writer.writerow([j, which, col, repr(float(c[col])), repr(float(n[col])),
                                     repr(float(n[col] - c[col]))])
