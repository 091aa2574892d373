"""Sentiment regression metrics: bucketed accuracies, two Acc-2/F1 conventions, MAE, Pearson r."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class BucketSpec:
    """How a continuous score is mapped to an ordered class.

    Values are first clamped to ``[lo, hi]``. Without ``cuts`` the class is the
    clamped value rounded to the nearest integer, ties away from zero. With
    ``cuts`` (sorted interior boundaries) the class is the number of cuts
    below the value; ``tie="upper"`` puts a value equal to a cut in the upper
    class, ``tie="lower"`` in the lower one.
    """

    lo: float
    hi: float
    cuts: tuple[float, ...] | None = None
    tie: str = "upper"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"bucket range needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.cuts is not None:
            cuts = tuple(float(c) for c in self.cuts)
            if any(b <= a for a, b in zip(cuts, cuts[1:])):
                raise ValueError(f"cuts must be strictly increasing: {cuts}")
            if cuts and not (self.lo < cuts[0] and cuts[-1] < self.hi):
                raise ValueError("cuts must lie strictly inside the clamp range")
            object.__setattr__(self, "cuts", cuts)
        if self.tie not in ("upper", "lower"):
            raise ValueError("tie must be 'upper' or 'lower'")

    @property
    def n_buckets(self) -> int:
        if self.cuts is not None:
            return len(self.cuts) + 1
        return int(round_half_away(self.hi) - round_half_away(self.lo)) + 1

    def bucketize(self, values) -> np.ndarray:
        """Class index in ``[0, n_buckets)`` for each value."""
        x = np.clip(np.asarray(values, dtype=np.float64), self.lo, self.hi)
        if self.cuts is None:
            return (round_half_away(x) - round_half_away(self.lo)).astype(np.int64)
        side = "right" if self.tie == "upper" else "left"
        return np.searchsorted(np.asarray(self.cuts), x, side=side).astype(np.int64)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "cuts": None if self.cuts is None else list(self.cuts),
                "tie": self.tie}


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# Clamped-rounding buckets for labels in [-3, 3].
MOSI_BUCKETS = {
    "acc7": BucketSpec(-3.0, 3.0),
    "acc5": BucketSpec(-2.0, 2.0),
    "acc3": BucketSpec(-1.0, 1.0),
}
# Labels in [-1, 1]; boundaries are a configurable default, not a published value.
SIMS_BUCKETS = {
    "acc5": BucketSpec(-1.0, 1.0, cuts=(-0.7, -0.1, 0.1, 0.7), tie="lower"),
    "acc3": BucketSpec(-1.0, 1.0, cuts=(-0.1, 0.1), tie="lower"),
}
PROFILES = {"mosi": MOSI_BUCKETS, "mosei": MOSI_BUCKETS, "sims": SIMS_BUCKETS}


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.size == 0 or y.size == 0:
        raise ContractError("metrics need at least one (prediction, label) pair")
    if p.size != y.size:
        raise ContractError(f"{p.size} predictions vs {y.size} labels")
    return p, y


def bucket_accuracy(preds, labels, spec: BucketSpec) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(spec.bucketize(p) == spec.bucketize(y)))


def bucket_counts(preds, labels, spec: BucketSpec) -> dict[str, list[int]]:
    """Per-class label support and correct-prediction counts."""
    p, y = _pair(preds, labels)
    bp, by = spec.bucketize(p), spec.bucketize(y)
    n = spec.n_buckets
    return {
        "support": np.bincount(by, minlength=n).tolist(),
        "correct": np.bincount(by[bp == by], minlength=n).tolist(),
    }


def _binary_views(p, y):
    """Boolean (pred, label) pairs under the non-negative and positive conventions."""
    nonneg = (p >= 0, y >= 0)
    keep = y != 0
    posneg = (p[keep] >= 0, y[keep] > 0)
    return nonneg, posneg


def acc2_dual(preds, labels) -> tuple[float, float]:
    """Binary accuracy as (negative vs non-negative, negative vs positive).

    The second convention drops zero labels; a zero prediction counts as
    positive. It is ``nan`` when every label is zero.
    """
    p, y = _pair(preds, labels)
    (pa, ya), (pb, yb) = _binary_views(p, y)
    acc_a = float(np.mean(pa == ya))
    acc_b = float(np.mean(pb == yb)) if yb.size else float("nan")
    return acc_a, acc_b


def _weighted_f1(pred: np.ndarray, true: np.ndarray) -> tuple[float, float]:
    """Support-weighted two-class F1 and positive-class F1."""
    scores, weights = [], []
    for cls in (False, True):
        tp = np.sum((pred == cls) & (true == cls))
        fp = np.sum((pred == cls) & (true != cls))
        fn = np.sum((pred != cls) & (true == cls))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
        weights.append(np.sum(true == cls))
    weighted = float(np.dot(scores, weights) / np.sum(weights))
    return weighted, float(scores[1])


def f1_scores(preds, labels) -> tuple[float, float]:
    """Weighted F1 under the same two conventions as :func:`acc2_dual`."""
    p, y = _pair(preds, labels)
    (pa, ya), (pb, yb) = _binary_views(p, y)
    f1_a = _weighted_f1(pa, ya)[0]
    f1_b = _weighted_f1(pb, yb)[0] if yb.size else float("nan")
    return f1_a, f1_b


def positive_f1_scores(preds, labels) -> tuple[float, float]:
    p, y = _pair(preds, labels)
    (pa, ya), (pb, yb) = _binary_views(p, y)
    return _weighted_f1(pa, ya)[1], (_weighted_f1(pb, yb)[1] if yb.size else float("nan"))


def mae(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(np.abs(p - y)))


def pearson_corr(preds, labels) -> float:
    """Sample Pearson r; 0.0 when either side has zero variance (see :func:`corr_is_degenerate`)."""
    p, y = _pair(preds, labels)
    if corr_is_degenerate(p, y):
        return 0.0
    pc, yc = p - p.mean(), y - y.mean()
    # rescale so the dot products cannot underflow for tiny spreads
    pc /= np.abs(pc).max()
    yc /= np.abs(yc).max()
    r = float(np.dot(pc, yc) / np.sqrt(np.dot(pc, pc) * np.dot(yc, yc)))
    return min(1.0, max(-1.0, r))


def corr_is_degenerate(preds, labels) -> bool:
    p, y = _pair(preds, labels)
    return bool(np.all(p == p[0]) or np.all(y == y[0]))


REPORT_KEYS = (
    "acc2_nonneg", "acc2_posneg", "acc3", "acc5", "acc7",
    "f1_nonneg", "f1_posneg", "f1_pos_nonneg", "f1_pos_posneg",
    "mae", "corr", "corr_degenerate", "posneg_degenerate", "n", "bucket_counts",
)


@dataclass
class MetricsReport:
    acc2_nonneg: float
    acc2_posneg: float | None
    acc3: float | None
    acc5: float | None
    acc7: float | None
    f1_nonneg: float
    f1_posneg: float | None
    f1_pos_nonneg: float
    f1_pos_posneg: float | None
    mae: float
    corr: float
    corr_degenerate: bool
    posneg_degenerate: bool
    n: int
    bucket_counts: dict[str, dict[str, list[int]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def compute_report(preds, labels, buckets: str | Mapping[str, BucketSpec] = "mosi") -> MetricsReport:
    p, y = _pair(preds, labels)
    specs = PROFILES[buckets] if isinstance(buckets, str) else dict(buckets)
    unknown = set(specs) - {"acc3", "acc5", "acc7"}
    if unknown:
        raise ValueError(f"unsupported bucket metrics {sorted(unknown)}")
    acc_a, acc_b = acc2_dual(p, y)
    f1_a, f1_b = f1_scores(p, y)
    pos_a, pos_b = positive_f1_scores(p, y)
    degenerate_b = bool(np.all(y == 0))
    accs = {k: bucket_accuracy(p, y, spec) for k, spec in specs.items()}
    return MetricsReport(
        acc2_nonneg=acc_a,
        acc2_posneg=None if degenerate_b else acc_b,
        acc3=accs.get("acc3"),
        acc5=accs.get("acc5"),
        acc7=accs.get("acc7"),
        f1_nonneg=f1_a,
        f1_posneg=None if degenerate_b else f1_b,
        f1_pos_nonneg=pos_a,
        f1_pos_posneg=None if degenerate_b else pos_b,
        mae=mae(p, y),
        corr=pearson_corr(p, y),
        corr_degenerate=corr_is_degenerate(p, y),
        posneg_degenerate=degenerate_b,
        n=int(p.size),
        bucket_counts={k: bucket_counts(p, y, spec) for k, spec in sorted(specs.items())},
    )


def write_pairs_csv(preds: Sequence[float], labels: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pred", "label"])
        for p, y in zip(preds, labels):
            writer.writerow([repr(float(p)), repr(float(y))])
