"""Independent reference implementations used to check the library."""

import math
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction


def bucket_brute(value, lo, hi, cuts=None, tie="upper"):
    """Class index by explicit enumeration, no numpy."""
    x = min(max(float(value), lo), hi)
    if cuts is None:
        # Decimal ROUND_HALF_UP rounds ties away from zero
        k = int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))
        base = int(Decimal(repr(float(lo))).quantize(Decimal(1), rounding=ROUND_HALF_UP))
        return k - base
    idx = 0
    for c in cuts:
        if x > c or (x == c and tie == "upper"):
            idx += 1
    return idx


def bucket_counts_brute(preds, labels, n_buckets, **spec):
    support = [0] * n_buckets
    correct = [0] * n_buckets
    for p, y in zip(preds, labels):
        by = bucket_brute(y, **spec)
        support[by] += 1
        if bucket_brute(p, **spec) == by:
            correct[by] += 1
    return {"support": support, "correct": correct}


def pearson_exact(xs, ys):
    """Pearson r with exact rational sums; only the final square root is inexact."""
    xs = [Fraction(x) for x in xs]
    ys = [Fraction(y) for y in ys]
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    if sxx == 0 or syy == 0:
        return 0.0
    return float(sxy) / math.sqrt(float(sxx) * float(syy))


def weighted_f1_brute(pred_pos, true_pos):
    """Support-weighted two-class F1 from an explicit confusion matrix."""
    pairs = list(zip(pred_pos, true_pos))
    total = 0.0
    for cls in (False, True):
        tp = sum(1 for p, t in pairs if p == cls and t == cls)
        fp = sum(1 for p, t in pairs if p == cls and t != cls)
        fn = sum(1 for p, t in pairs if p != cls and t == cls)
        support = sum(1 for _, t in pairs if t == cls)
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        total += f1 * support
    return total / len(pairs)


def lr_closed_form(step, base, warmup, total, floor):
    if step < warmup:
        return base * (step + 1) / warmup
    return floor + (base - floor) * (1 + math.cos(math.pi * (step - warmup) / (total - warmup))) / 2
