"""Rectangular linear sum assignment.

The compiled kernel is used when it was built; set ``FEDBREACH_PURE_PYTHON=1``
to force the numpy fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _lsa_py

if os.environ.get("FEDBREACH_PURE_PYTHON", "") not in ("", "0"):
    _kernel = _lsa_py.solve
    BACKEND = "python"
else:
    try:
        from ._lsa import solve as _kernel
        BACKEND = "cython"
    except ImportError:
        _kernel = _lsa_py.solve
        BACKEND = "python"

KERNELS = {"python": _lsa_py.solve}
try:
    from ._lsa import solve as _compiled
    KERNELS["cython"] = _compiled
except ImportError:
    pass


@dataclass
class Assignment:
    """Matched ``rows[i] -> cols[i]`` pairs, sorted by row.

    ``row_potential``/``col_potential`` are the dual variables of the
    minimisation; their sum equals ``total_cost`` at optimum.
    """

    rows: np.ndarray
    cols: np.ndarray
    total_cost: float
    row_potential: np.ndarray
    col_potential: np.ndarray

    def as_dict(self) -> dict:
        return {int(r): int(c) for r, c in zip(self.rows, self.cols)}


def linear_sum_assignment(cost, maximize: bool = False, backend: str | None = None) -> Assignment:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {c.shape}")
    nr, nc = c.shape
    if nr < 1 or nc < 1:
        raise ValueError(f"cost matrix must be non-empty, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    kernel = _kernel if backend is None else KERNELS[backend]
    work = -c if maximize else c
    transposed = nr > nc
    if transposed:
        work = work.T
    col4row, u, v = kernel(np.ascontiguousarray(work))
    if transposed:
        rows = np.asarray(col4row)
        cols = np.arange(len(col4row))
        order = np.argsort(rows)
        rows, cols = rows[order], cols[order]
        u, v = v, u
    else:
        rows = np.arange(len(col4row))
        cols = np.asarray(col4row)
    total = float(c[rows, cols].sum())
    if maximize:
        u, v = -u, -v
    return Assignment(rows.astype(np.intp), cols.astype(np.intp), total, np.asarray(u), np.asarray(v))
