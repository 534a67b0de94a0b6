import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from ruquant.errors import InputError
from ruquant.tensor import (Seed, apply_permutation, apply_permutation_transpose, as_seed,
                            check_matrix, check_permutation, column_sample, invert_permutation,
                            permutation_matrix, random_permutation, sample_uniform_vector)


class TestSeed:
    def test_same_seed_same_stream(self):
        a = Seed(5, 2).generator().random(8)
        b = Seed(5, 2).generator().random(8)
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        assert not np.array_equal(Seed(5, 2).generator().random(8), Seed(5, 3).generator().random(8))
        assert not np.array_equal(Seed(5).generator().random(8), Seed(6).generator().random(8))

    def test_derive_is_path_dependent(self):
        s = Seed(1)
        assert s.derive(1, 2) == s.derive(1, 2)
        assert s.derive(1, 2) != s.derive(2, 1)
        assert s.derive(1).derive(2) == s.derive(1, 2)

    @pytest.mark.parametrize("bad", [-1, 1 << 64, 1.5])
    def test_rejects_non_u64(self, bad):
        with pytest.raises(InputError):
            Seed(bad)

    def test_accepts_u64_extremes(self):
        Seed((1 << 64) - 1, (1 << 64) - 1).generator().random()

    def test_coercion(self):
        assert as_seed(3) == Seed(3)
        assert as_seed((3, 4)) == Seed(3, 4)
        assert as_seed(None) == Seed()


class TestUniformVector:
    def test_deterministic(self):
        assert np.array_equal(sample_uniform_vector(50, Seed(9)), sample_uniform_vector(50, Seed(9)))

    def test_single_entry_range(self):
        v = sample_uniform_vector(1, Seed(0))
        assert v.shape == (1,) and -1 <= v[0] < 1

    def test_mean_near_zero(self):
        for s in range(5):
            assert abs(sample_uniform_vector(10_000, Seed(s)).mean()) <= 0.05

    def test_chi_square_uniformity(self):
        v = sample_uniform_vector(100_000, Seed(4))
        assert v.min() >= -1 and v.max() < 1
        counts, _ = np.histogram(v, bins=20, range=(-1, 1))
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_empty_dimension(self):
        with pytest.raises(InputError, match="empty dimension"):
            sample_uniform_vector(0, Seed(0))


class TestPermutation:
    def test_trivial(self):
        assert random_permutation(1, Seed(3)).tolist() == [0]

    def test_inverse_restores_order(self):
        p = random_permutation(3, Seed(11))
        X = np.arange(6.0).reshape(3, 2)
        assert np.array_equal(apply_permutation_transpose(p, apply_permutation(p, X)), X)

    def test_uniform_over_all_24(self):
        n = 100_000
        counts = {}
        for s in range(n):
            key = tuple(random_permutation(4, Seed(s)))
            counts[key] = counts.get(key, 0) + 1
        assert set(counts) == set(itertools.permutations(range(4)))
        freqs = np.array(list(counts.values())) / n
        assert np.all(np.abs(freqs - 1 / 24) <= 0.005)

    def test_matrix_semantics(self):
        p = np.array([2, 0, 1])
        P = permutation_matrix(p)
        X = np.arange(9.0).reshape(3, 3)
        assert np.array_equal(P @ X, apply_permutation(p, X))
        assert np.array_equal(P.T @ P, np.eye(3))

    @given(st.integers(1, 40), st.integers(0, 2**32))
    def test_bijection_and_exact_inverse(self, d, seed):
        p = check_permutation(random_permutation(d, Seed(seed)))
        assert sorted(p.tolist()) == list(range(d))
        X = np.random.default_rng(seed).standard_normal((d, 3))
        assert np.array_equal(apply_permutation(invert_permutation(p), apply_permutation(p, X)), X)

    @pytest.mark.parametrize("bad", [[0, 0], [1, 2], [], [0.0, 1.0]])
    def test_rejects_non_bijection(self, bad):
        with pytest.raises(InputError):
            check_permutation(np.array(bad))

    def test_empty_dimension(self):
        with pytest.raises(InputError, match="empty dimension"):
            random_permutation(0, Seed(0))


class TestColumnSample:
    def test_single_column(self):
        X = np.array([[1.0], [2.0]])
        assert np.array_equal(column_sample(X, Seed(7)), [1.0, 2.0])

    def test_membership(self):
        I3 = np.eye(3)
        for s in range(10):
            x = column_sample(I3, Seed(s))
            assert any(np.array_equal(x, e) for e in I3.T)

    def test_deterministic_and_a_copy(self):
        X = np.random.default_rng(0).standard_normal((4, 9))
        a = column_sample(X, Seed(2))
        assert np.array_equal(a, column_sample(X, Seed(2)))
        a[:] = 0
        assert np.any(X != 0)

    def test_covers_columns(self):
        X = np.arange(5.0)[None, :]
        seen = {column_sample(X, Seed(s))[0] for s in range(200)}
        assert seen == set(range(5))

    def test_empty_sample(self):
        with pytest.raises(InputError, match="empty sample"):
            column_sample(np.zeros((3, 0)), Seed(0))


def test_check_matrix_rejects_nan_and_rank():
    with pytest.raises(InputError):
        check_matrix([[np.nan]])
    with pytest.raises(InputError):
        check_matrix([1.0, 2.0])
