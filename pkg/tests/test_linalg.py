import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvpack.errors import DataError, ParameterError, ShapeError
from kvpack.linalg import (
    explained_variance_curve,
    explained_variance_ratio,
    gram_singular_values,
    rank_for_variance,
    tail_energy,
    truncated_svd,
)

from conftest import weighted_outer_products


def test_rank_one_input_is_exact():
    rng = np.random.default_rng(1)
    m = np.outer(rng.standard_normal(20), rng.standard_normal(13))
    f = truncated_svd(m, 1)
    assert np.linalg.norm(f.reconstruct() - m) < 1e-10


def test_identity_full_rank():
    f = truncated_svd(np.eye(3), 3)
    np.testing.assert_allclose(f.reconstruct(), np.eye(3), atol=1e-12)


def test_error_matches_gram_oracle():
    rng = np.random.default_rng(64)
    m = rng.standard_normal((64, 48))
    f = truncated_svd(m, 16, method="exact")
    sigma = gram_singular_values(m)
    expected = np.sqrt(np.sum(sigma[16:] ** 2))
    assert abs(np.linalg.norm(f.reconstruct() - m) - expected) < 1e-8


def test_factor_shapes_and_orthonormal_right():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((30, 20))
    f = truncated_svd(m, 7)
    assert f.left.shape == (30, 7) and f.right.shape == (7, 20) and f.rank == 7
    np.testing.assert_allclose(f.right @ f.right.T, np.eye(7), atol=1e-6)
    # Singular values live in the left factor.
    np.testing.assert_allclose(
        np.linalg.norm(f.left, axis=0), np.linalg.svd(m, compute_uv=False)[:7], rtol=1e-10
    )


@pytest.mark.parametrize("rank", [0, 21, -1])
def test_rank_out_of_range(rank):
    with pytest.raises(ParameterError):
        truncated_svd(np.ones((30, 20)), rank)


def test_non_finite_and_bad_shape():
    m = np.ones((4, 4))
    m[1, 2] = np.nan
    with pytest.raises(DataError):
        truncated_svd(m, 2)
    with pytest.raises(ShapeError):
        truncated_svd(np.ones(5), 1)


def test_unknown_method():
    with pytest.raises(ParameterError):
        truncated_svd(np.eye(4), 2, method="lanczos")


def test_zero_matrix():
    f = truncated_svd(np.zeros((6, 5)), 3)
    assert not np.any(f.left)
    assert np.array_equal(f.reconstruct(), np.zeros((6, 5)))
    assert explained_variance_ratio(np.zeros((6, 5)), 0) == 1.0
    assert explained_variance_ratio(np.zeros((6, 5)), 2) == 1.0


@pytest.mark.parametrize("dtype", [np.float16, np.float32, np.float64])
def test_dtype_preserved(dtype):
    m = np.random.default_rng(3).standard_normal((10, 8)).astype(dtype)
    for method in ("exact", "randomized"):
        f = truncated_svd(m, 4, method=method)
        assert f.left.dtype == dtype and f.right.dtype == dtype


def test_float32_tolerance():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((64, 48))
    f = truncated_svd(m.astype(np.float32), 16)
    expected = tail_energy(gram_singular_values(m), 16)
    assert abs(np.linalg.norm(f.reconstruct().astype(np.float64) - m) - expected) < 1e-4 * np.linalg.norm(m)


def test_randomized_is_deterministic():
    m = np.random.default_rng(5).standard_normal((50, 40))
    a = truncated_svd(m, 5, method="randomized", seed=11)
    b = truncated_svd(m, 5, method="randomized", seed=11)
    assert np.array_equal(a.left, b.left) and np.array_equal(a.right, b.right)


def test_randomized_exact_on_low_rank():
    rng = np.random.default_rng(6)
    m = rng.standard_normal((80, 6)) @ rng.standard_normal((6, 60))
    f = truncated_svd(m, 6, method="randomized", seed=0)
    assert np.linalg.norm(f.reconstruct() - m) < 1e-9 * np.linalg.norm(m)


def test_explained_variance_examples():
    assert explained_variance_ratio(np.eye(4), 2) == pytest.approx(0.5, abs=1e-15)
    m = np.random.default_rng(7).standard_normal((9, 5))
    assert explained_variance_ratio(m, 5) == pytest.approx(1.0, abs=1e-12)
    m = weighted_outer_products([8, 4, 2, 1])
    assert explained_variance_ratio(m, 2) == pytest.approx(80 / 85, abs=1e-12)
    with pytest.raises(ParameterError):
        explained_variance_ratio(np.eye(4), 5)


def test_rank_for_variance_examples():
    assert rank_for_variance(np.eye(4), 0.5, 4)[0] == 2
    rank_one = np.outer(np.arange(1.0, 6.0), np.arange(1.0, 4.0))
    assert rank_for_variance(rank_one, 0.99, 64)[0] == 1
    m = weighted_outer_products([8, 4, 2, 1])
    rank, ratio = rank_for_variance(m, 0.95, 64)
    assert rank == 3 and ratio == pytest.approx(84 / 85, abs=1e-12)


def test_rank_for_variance_clamps_and_reports_shortfall():
    m = weighted_outer_products([8, 4, 2, 1])
    rank, ratio = rank_for_variance(m, 0.95, 2)
    assert rank == 2 and ratio == pytest.approx(80 / 85, abs=1e-12) and ratio < 0.95


@pytest.mark.parametrize("target,max_rank", [(0.0, 4), (1.5, 4), (0.5, 0)])
def test_rank_for_variance_validation(target, max_rank):
    with pytest.raises(ParameterError):
        rank_for_variance(np.eye(4), target, max_rank)


shapes = st.tuples(st.integers(1, 40), st.integers(1, 40))


@given(shape=shapes, seed=st.integers(0, 2**32 - 1), data=st.data())
def test_eckart_young(shape, seed, data):
    rank = data.draw(st.integers(1, min(shape)))
    m = np.random.default_rng(seed).standard_normal(shape) * data.draw(st.sampled_from([1e-3, 1.0, 1e3]))
    f = truncated_svd(m, rank)
    expected = tail_energy(gram_singular_values(m), rank)
    assert abs(np.linalg.norm(f.reconstruct() - m) - expected) <= 1e-8 * max(1.0, np.linalg.norm(m))


@given(shape=shapes, seed=st.integers(0, 2**32 - 1))
def test_explained_variance_monotone(shape, seed):
    m = np.random.default_rng(seed).standard_normal(shape)
    ratios = [explained_variance_ratio(m, r) for r in range(min(shape) + 1)]
    assert all(a <= b for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(explained_variance_curve(m), ratios[1:], atol=1e-15)


def test_randomized_within_factor_of_exact_on_decaying_spectrum():
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        n = 60
        sigma = 0.9 ** np.arange(n)
        u, v = np.linalg.qr(rng.standard_normal((80, n)))[0], np.linalg.qr(rng.standard_normal((70, n)))[0]
        m = (u * sigma) @ v[:, :n].T
        for rank in (5, 10, 20):
            exact = np.linalg.norm(truncated_svd(m, rank).reconstruct() - m)
            rand = np.linalg.norm(truncated_svd(m, rank, "randomized", seed=trial).reconstruct() - m)
            assert rand <= 1.5 * exact


@given(seed=st.integers(0, 1000))
def test_svd_deterministic(seed):
    m = np.random.default_rng(seed).standard_normal((12, 9))
    for method in ("exact", "randomized"):
        a = truncated_svd(m, 4, method, seed=seed)
        b = truncated_svd(m, 4, method, seed=seed)
        assert a.left.tobytes() == b.left.tobytes() and a.right.tobytes() == b.right.tobytes()
