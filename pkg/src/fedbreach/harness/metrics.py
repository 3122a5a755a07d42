"""Reconstruction scores. Every function takes ``(recovered, truth)`` token arrays of shape (N, S)."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from ..solvers import linear_sum_assignment

BLEU_EPS = 1e-9
BLEU_ORDER = 4


def _pair(recovered, truth):
    rec = np.atleast_2d(np.asarray(recovered))
    tru = np.atleast_2d(np.asarray(truth))
    if rec.shape != tru.shape:
        raise ValueError(f"shape mismatch: recovered {rec.shape} vs truth {tru.shape}")
    if rec.size == 0:
        raise ValueError("empty input")
    return rec, tru


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def resort_order(recovered, truth) -> np.ndarray:
    """``order[j]`` is the recovered sequence matched to truth sequence ``j``.

    Maximizes the summed per-pair positional accuracy; LCS length breaks ties.
    """
    rec, tru = _pair(recovered, truth)
    N, S = rec.shape
    if N == 1:
        return np.zeros(1, dtype=np.int64)
    hits = (rec[:, None, :] == tru[None, :, :]).mean(-1)
    lcs = np.array([[lcs_length(r, t) for t in tru] for r in rec]) / S
    asg = linear_sum_assignment(hits + 1e-3 / (S + 1) * lcs, maximize=True)
    order = np.empty(N, dtype=np.int64)
    order[asg.cols] = asg.rows
    return order


def resort(recovered, truth) -> np.ndarray:
    """Recovered sequences reordered toward the truth order."""
    rec, tru = _pair(recovered, truth)
    return rec[resort_order(rec, tru)]


def total_accuracy(recovered, truth) -> tuple[float, np.ndarray]:
    """Fraction of positions with the right token after resorting; also returns the resorted batch."""
    rec, tru = _pair(recovered, truth)
    sorted_rec = resort(rec, tru)
    return float((sorted_rec == tru).mean()), sorted_rec


def per_sequence_accuracy(recovered, truth) -> np.ndarray:
    rec, tru = _pair(recovered, truth)
    return (resort(rec, tru) == tru).mean(-1)


def token_accuracy(recovered, truth) -> float:
    rec, tru = _pair(recovered, truth)
    inter = Counter(rec.ravel().tolist()) & Counter(tru.ravel().tolist())
    return sum(inter.values()) / tru.size


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(recovered, truth, max_order: int = BLEU_ORDER) -> float:
    """Corpus BLEU with every truth sequence serving as a reference for every candidate."""
    rec, tru = _pair(recovered, truth)
    refs = [list(t) for t in tru]
    matches = [0] * max_order
    possible = [0] * max_order
    cand_len = ref_len = 0
    ref_grams = []
    for n in range(1, max_order + 1):
        best = Counter()
        for r in refs:
            best |= _ngrams(r, n)
        ref_grams.append(best)
    for cand in rec:
        cand = list(cand)
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_order + 1):
            grams = _ngrams(cand, n)
            matches[n - 1] += sum(min(c, ref_grams[n - 1][g]) for g, c in grams.items())
            possible[n - 1] += max(len(cand) - n + 1, 0)
    logs = []
    for m, p in zip(matches, possible):
        if p == 0:
            continue
        logs.append(math.log((m if m > 0 else BLEU_EPS) / p))
    if not logs:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return float(bp * math.exp(sum(logs) / len(logs)))


def rouge_l(recovered, truth) -> float:
    """Mean LCS F-measure over the resorted sequence pairs."""
    rec, tru = _pair(recovered, truth)
    rec = resort(rec, tru)
    scores = []
    for r, t in zip(rec, tru):
        l = lcs_length(r, t)
        if l == 0:
            scores.append(0.0)
            continue
        p, q = l / len(r), l / len(t)
        scores.append(2 * p * q / (p + q))
    return float(np.mean(scores))
