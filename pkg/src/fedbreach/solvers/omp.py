"""Orthogonal matching pursuit over a dictionary of step functions.

A cumulative-bin signal ``g`` of length ``n`` is modelled as a sum of atoms
``H_i[j] = 1 if j <= i`` (a jump between rows ``i`` and ``i+1``). Several
channels may be stacked as columns; they then share one support.
"""

from __future__ import annotations

import numpy as np


def step_dictionary(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n))).T


def omp_support(signal, max_sparsity: int):
    """Greedy support and least-squares coefficients, ``coef`` shaped ``(K, channels)``."""
    g = np.asarray(signal, dtype=np.float64)
    squeeze = g.ndim == 1
    if squeeze:
        g = g[:, None]
    n = g.shape[0]
    if max_sparsity > n:
        raise ValueError(f"max_sparsity={max_sparsity} exceeds signal length {n}")
    norms = np.sqrt(np.arange(1, n + 1, dtype=np.float64))
    support: list[int] = []
    coef = np.zeros((0, g.shape[1]))
    residual = g.copy()
    scale = np.abs(g).max()
    if scale == 0:
        return np.zeros(0, dtype=np.intp), coef
    for _ in range(max_sparsity):
        # <H_i, r> = sum_{j<=i} r_j
        corr = np.cumsum(residual, axis=0)
        score = np.sqrt((corr ** 2).sum(1)) / norms
        score[support] = -1.0
        best = int(np.argmax(score))
        if score[best] <= 1e-13 * scale:
            break
        support.append(best)
        atoms = (np.arange(n)[:, None] <= np.asarray(support)[None, :]).astype(np.float64)
        coef, *_ = np.linalg.lstsq(atoms, g, rcond=None)
        residual = g - atoms @ coef
    order = np.argsort(support)
    return np.asarray(support, dtype=np.intp)[order], coef[order]


def omp_denoise(signal, max_sparsity: int) -> np.ndarray:
    """Best ``max_sparsity``-jump step reconstruction of ``signal`` (greedy, LS-refit)."""
    g = np.asarray(signal, dtype=np.float64)
    support, coef = omp_support(g, max_sparsity)
    n = g.shape[0]
    atoms = (np.arange(n)[:, None] <= support[None, :]).astype(np.float64)
    out = atoms @ coef if len(support) else np.zeros((n, 1 if g.ndim == 1 else g.shape[1]))
    return out[:, 0] if g.ndim == 1 else out
