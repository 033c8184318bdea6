import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paritycot.numerics import (RngStream, causal_mask, derive_seed, load_matrix_csv, masked_softmax_columns,
                                matmul, rng_stream, save_matrix_csv, shannon_entropy)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_matmul_identity_and_small_case():
    M = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(matmul(np.eye(3), M), M)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), np.array([[2.0], [4.0]]))


def test_matmul_matches_triple_loop_bitwise():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_softmax_zero_scores_is_uniform_prefix():
    P = masked_softmax_columns(np.zeros((3, 3)))
    expected = np.array([[1, 1 / 2, 1 / 3], [0, 1 / 2, 1 / 3], [0, 0, 1 / 3]])
    assert np.allclose(P, expected, atol=1e-15, rtol=0)


def test_softmax_first_column_is_one_hot():
    P = masked_softmax_columns(np.random.default_rng(1).normal(size=(5, 5)) * 10)
    assert P[0, 0] == 1.0 and np.all(P[1:, 0] == 0)


def test_softmax_two_entry_column():
    S = np.zeros((2, 2))
    S[0, 1], S[1, 1] = 10.0, 0.0
    P = masked_softmax_columns(S)
    assert P[0, 1] == pytest.approx(math.exp(10) / (math.exp(10) + 1), rel=1e-14)
    assert P[1, 1] == pytest.approx(1 / (math.exp(10) + 1), rel=1e-12)


def test_softmax_ignores_masked_infinities():
    S = np.zeros((3, 3))
    S[2, 0] = np.inf  # below the causal boundary; must not matter
    S[1, 0] = -np.inf
    P = masked_softmax_columns(S)
    assert np.array_equal(P[:, 0], [1.0, 0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_softmax_properties(T, seed, shift):
    S = np.random.default_rng(seed).normal(scale=5.0, size=(T, T))
    P = masked_softmax_columns(S)
    assert np.all(P >= 0)
    assert np.all(P[~causal_mask(T)] == 0)
    assert np.allclose(P.sum(axis=0), 1.0, atol=1e-12)
    col = seed % T
    S2 = S.copy()
    S2[:, col] += shift
    assert np.allclose(masked_softmax_columns(S2), P, atol=1e-12)


def test_softmax_stack_matches_single():
    S = np.random.default_rng(2).normal(size=(4, 6, 6))
    stacked = masked_softmax_columns(S)
    for b in range(4):
        assert np.array_equal(stacked[b], masked_softmax_columns(S[b]))


def test_entropy_examples():
    assert shannon_entropy([1, 0, 0]) == 0.0
    assert shannon_entropy(np.full(7, 1 / 7)) == pytest.approx(math.log(7), abs=1e-14)
    assert shannon_entropy([0.5, 0.5, 0]) == pytest.approx(math.log(2), abs=1e-15)


def test_entropy_rejects_bad_vectors():
    with pytest.raises(ValueError):
        shannon_entropy([0.7, 0.7])
    with pytest.raises(ValueError):
        shannon_entropy([1.5, -0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=12).filter(lambda v: sum(v) > 1e-6))
def test_entropy_bounds(values):
    p = np.array(values) / sum(values)
    p = p / p.sum()
    h = shannon_entropy(p)
    assert -1e-12 <= h <= math.log(len(p)) + 1e-12


def test_rng_reproducible_and_streams_differ():
    a, b = rng_stream(5, 1), rng_stream(5, 1)
    assert np.array_equal(a.bits(1000), b.bits(1000))
    assert not np.array_equal(rng_stream(5, 1).bits(1000), rng_stream(5, 2).bits(1000))


def test_rng_monte_carlo_moments():
    rng = RngStream(11)
    eps = 0.3
    assert abs(rng.rademacher(eps, 10**5).mean()) < 0.02 * eps
    assert abs(rng.bits(10**5).mean() - 0.5) < 0.01
    draws = rng.rademacher(eps, 100)
    assert set(np.unique(draws)) <= {-eps, eps}


def test_rng_index_and_choice_ranges():
    rng = RngStream(3)
    idx = rng.index(7, size=1000)
    assert idx.min() >= 0 and idx.max() < 7
    c = rng.choice(10, 10)
    assert sorted(c.tolist()) == list(range(10))


def test_derive_seed_stable():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)


def test_matrix_csv_round_trip(tmp_path):
    M = np.random.default_rng(4).normal(size=(5, 3)) * 1e-7
    M[0, 0] = 1 / 3
    path = tmp_path / "m.csv"
    save_matrix_csv(M, path)
    assert np.array_equal(load_matrix_csv(path), M)
    assert len(path.read_text().splitlines()) == 5
