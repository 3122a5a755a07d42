"""Dense float64 helpers, seeded RNG and the normal quantile function."""

from __future__ import annotations

import math

import numpy as np

# Acklam's rational approximation coefficients
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


class Rng:
    """Seeded random stream. Same seed, same draws, on every platform numpy supports."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size)

    def laplace(self, scale: float, size=None):
        return self._gen.laplace(0.0, scale, size)

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def spawn(self, key: int) -> "Rng":
        """Child stream keyed on ``key``; independent of how much the parent was consumed."""
        return Rng(_mix_seed(self.seed, key))


def _mix_seed(seed: int, key: int) -> int:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, key & 0xFFFFFFFFFFFFFFFF])
    return int(ss.generate_state(2, dtype=np.uint64)[0])


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def gemm(a, b, transpose_a: bool = False, transpose_b: bool = False) -> np.ndarray:
    """Dense product ``op(a) @ op(b)`` in float64 with shape checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if transpose_a:
        a = a.T
    if transpose_b:
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def inverse_normal_cdf(p: float) -> float:
    """Standard normal quantile.

    Acklam's rational approximation (relative error ~1e-9) followed by one
    Newton step on the erfc-based CDF, which brings the error down to a few ulps
    away from the extreme tails.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in the open interval (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    x = _acklam(p)
    # refine in the upper half through symmetry so the CDF residual keeps precision
    if p > 0.5:
        return -_newton(1.0 - p, -x)
    return _newton(p, x)


def _newton(p: float, x: float) -> float:
    dens = normal_pdf(x)
    if dens == 0.0:
        return x
    return x - (normal_cdf(x) - p) / dens


def gaussian_vector(rng: Rng, dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError(f"dimension must be >= 1, got {dim}")
    return rng.normal(size=dim)
