import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from fedbreach.numkernel import Rng, gaussian_vector, gemm, inverse_normal_cdf, normal_cdf

from helpers import bisect_quantile, naive_matmul, phi_series


class TestGemm:
    def test_identity(self):
        a = np.arange(9.0).reshape(3, 3) - 4
        np.testing.assert_array_equal(gemm(np.eye(3), a), a)

    def test_hand_arithmetic(self):
        np.testing.assert_array_equal(gemm([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(gemm(a, b), naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_transpose_flags(self):
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(gemm(a, b, transpose_a=True, transpose_b=True), naive_matmul(a.T, b.T),
                                   atol=1e-12, rtol=0)

    def test_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            gemm(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_vectors(self):
        with pytest.raises(ValueError):
            gemm(np.ones(3), np.ones((3, 1)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
    def test_associative(self, seed, m, n, p, q):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(m, n)), rng.normal(size=(n, p)), rng.normal(size=(p, q))
        left = gemm(gemm(a, b), c)
        right = gemm(a, gemm(b, c))
        scale = np.linalg.norm(np.abs(a) @ np.abs(b) @ np.abs(c))
        assert np.linalg.norm(left - right) <= 1e-9 * scale


class TestInverseNormalCdf:
    def test_median(self):
        assert inverse_normal_cdf(0.5) == 0.0

    def test_one_sigma_against_series_bisection(self):
        x = inverse_normal_cdf(0.8413447461)
        assert abs(x - bisect_quantile(0.8413447461)) <= 1e-6
        assert abs(x - 1.0) <= 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        for p in rng.uniform(1e-6, 1 - 1e-6, size=20):
            assert inverse_normal_cdf(p) == pytest.approx(-inverse_normal_cdf(1 - p), abs=1e-12)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
    def test_rejects_outside_open_interval(self, p):
        with pytest.raises(ValueError):
            inverse_normal_cdf(p)

    def test_cdf_residual_central(self):
        # independent erf series oracle where it is accurate
        for p in np.linspace(0.001, 0.999, 199):
            assert abs(phi_series(inverse_normal_cdf(p)) - p) <= 1e-9

    def test_cdf_residual_tails(self):
        ps = np.concatenate([np.logspace(-12, -3, 40), 1 - np.logspace(-12, -3, 40)])
        for p in ps:
            assert abs(ndtr(inverse_normal_cdf(p)) - p) <= 1e-9

    def test_strictly_increasing_on_grid(self):
        grid = np.linspace(0, 1, 1002)[1:-1]
        xs = np.array([inverse_normal_cdf(p) for p in grid])
        assert np.all(np.diff(xs) > 0)

    @given(st.floats(1e-10, 1 - 1e-10))
    def test_round_trip_property(self, p):
        assert abs(normal_cdf(inverse_normal_cdf(p)) - p) <= 1e-9


class TestGaussianVector:
    def test_deterministic(self):
        np.testing.assert_array_equal(gaussian_vector(Rng(0), 4), gaussian_vector(Rng(0), 4))

    def test_law_of_large_numbers(self):
        v = gaussian_vector(Rng(0), 100_000)
        assert abs(v.mean()) < 0.02
        assert abs(v.std() - 1) < 0.02

    def test_dim_one(self):
        v = gaussian_vector(Rng(5), 1)
        assert v.shape == (1,) and math.isfinite(v[0])

    def test_dim_zero_rejected(self):
        with pytest.raises(ValueError):
            gaussian_vector(Rng(0), 0)


class TestRng:
    @given(st.integers(0, 2**63 - 1), st.integers(0, 2**63 - 1))
    def test_distinct_seeds_give_distinct_streams(self, s1, s2):
        if s1 == s2:
            return
        a, b = Rng(s1).uniform(size=16), Rng(s2).uniform(size=16)
        assert not np.array_equal(a, b)

    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(Rng(11).normal(size=16), Rng(11).normal(size=16))

    def test_spawn_ignores_parent_consumption(self):
        r1, r2 = Rng(4), Rng(4)
        r2.normal(size=100)
        np.testing.assert_array_equal(r1.spawn(3).uniform(size=8), r2.spawn(3).uniform(size=8))

    def test_spawn_keys_differ(self):
        r = Rng(4)
        assert not np.array_equal(r.spawn(1).uniform(size=8), r.spawn(2).uniform(size=8))
