"""Independent reference implementations shared by unit and acceptance tests."""

import math

import numpy as np


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def scalar_f(x, beta):
    """Second implementation of the generator's mean function, one row at a time."""
    b = [1.0 + v for v in beta]
    clip_term = b[1] * x[1] / (1.0 + b[2] * x[2] ** 2)
    clip_term = max(-5.0, min(5.0, clip_term))
    return (
        0.1 * math.exp(-b[0] * x[0] ** 2)
        + clip_term
        + math.sin(b[3] * x[3])
        + b[4] * x[4]
        + b[5] * x[5] / (1.0 + math.exp(-b[6] * x[6]))
        + math.atan(b[7] * x[7])
        + b[8] * math.cos(x[8])
        + b[9] * math.log(1.0 + x[9] ** 2)
    )


def loop_level_sums(values, codes, q):
    """Row-by-row accumulation into per-level sums and counts."""
    sums = [np.zeros(values.shape[1]) for _ in range(q)]
    counts = [0] * q
    for row, j in zip(values, codes):
        sums[j] = sums[j] + row
        counts[j] += 1
    return sums, counts


def loop_level_means(values, codes, q):
    sums, counts = loop_level_sums(values, codes, q)
    return np.array([s / c if c else s for s, c in zip(sums, counts)]), np.array(counts)
