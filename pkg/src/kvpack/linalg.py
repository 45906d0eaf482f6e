"""Dense low-rank primitives: truncated SVD, explained variance and oracles.

Matrices are plain 2-D numpy arrays. Factorizations are returned as a
:class:`FactorPair` whose left factor carries the singular values, so that
keeping the first ``r`` columns of ``left`` and the first ``r`` rows of
``right`` is itself the optimal rank-``r`` approximation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from kvpack.errors import DataError, ParameterError, ShapeError

SVDMethod = Literal["exact", "randomized"]

OVERSAMPLES = 8
POWER_ITERATIONS = 2


@dataclass
class FactorPair:
    """A rank-R factorization ``m ~= left @ right``.

    Attributes:
        left: ``(T, R)`` array, columns pre-scaled by the singular values.
        right: ``(R, N)`` array with orthonormal rows.
    """

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        if self.left.ndim != 2 or self.right.ndim != 2:
            raise ShapeError("factors must be 2-D")
        if self.left.shape[1] != self.right.shape[0]:
            raise ShapeError(
                f"inner dimensions differ: {self.left.shape} @ {self.right.shape}"
            )

    @property
    def rank(self) -> int:
        return self.right.shape[0]

    @property
    def rows(self) -> int:
        return self.left.shape[0]

    @property
    def cols(self) -> int:
        return self.right.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.left.dtype

    def scalar_count(self) -> int:
        return self.left.size + self.right.size

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        """Multiply the factors back together, optionally using only a prefix."""
        r = self.rank if rank is None else rank
        return self.left[:, :r] @ self.right[:r]

    def truncate(self, rank: int) -> "FactorPair":
        if not 1 <= rank <= self.rank:
            raise ParameterError(f"cannot truncate rank {self.rank} to {rank}")
        return FactorPair(self.left[:, :rank].copy(), self.right[:rank].copy())

    def take_rows(self, rows) -> "FactorPair":
        """Keep only the given rows of ``left``; ``right`` is shared."""
        return FactorPair(self.left[rows], self.right)

    def astype(self, dtype) -> "FactorPair":
        return FactorPair(self.left.astype(dtype), self.right.astype(dtype))


def check_matrix(m, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.issubdtype(m.dtype, np.floating):
        m = m.astype(np.float64)
    if not np.all(np.isfinite(m)):
        raise DataError(f"{name} contains non-finite values")
    return m


def _compute_dtype(dtype: np.dtype) -> np.dtype:
    # LAPACK has no half-precision routines.
    return np.dtype(np.float32) if dtype == np.float16 else dtype


def make_rng(seed: int, *salt: int) -> np.random.Generator:
    """Counter-based Philox generator, reproducible from ``seed`` and optional salt keys."""
    key = np.random.SeedSequence((seed,) + salt) if salt else seed
    return np.random.Generator(np.random.Philox(key))


def _randomized_range(a: np.ndarray, size: int, seed: int) -> np.ndarray:
    rng = make_rng(seed)
    omega = rng.standard_normal((a.shape[1], size)).astype(a.dtype, copy=False)
    q, _ = np.linalg.qr(a @ omega)
    for _ in range(POWER_ITERATIONS):
        z, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ z)
    return q


def truncated_svd(
    m,
    rank: int,
    method: SVDMethod = "exact",
    seed: int = 0,
) -> FactorPair:
    """Best (or near-best) rank-``rank`` factorization of ``m``.

    ``method="exact"`` truncates a full LAPACK SVD and attains the
    Eckart-Young optimum. ``method="randomized"`` projects onto a Gaussian
    sketch with 8 oversamples and 2 power iterations; it is deterministic for
    a fixed ``seed``.

    The factors have the dtype of ``m`` (half precision is computed in single
    precision and rounded back).
    """
    m = check_matrix(m)
    rows, cols = m.shape
    if not 1 <= rank <= min(rows, cols):
        raise ParameterError(f"rank {rank} outside [1, {min(rows, cols)}]")
    out_dtype = m.dtype
    if not np.any(m):
        return FactorPair(
            np.zeros((rows, rank), dtype=out_dtype), np.eye(rank, cols, dtype=out_dtype)
        )
    a = m.astype(_compute_dtype(out_dtype), copy=False)

    if method == "exact":
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    elif method == "randomized":
        size = min(rank + OVERSAMPLES, rows, cols)
        q = _randomized_range(a, size, seed)
        ub, s, vt = np.linalg.svd(q.T @ a, full_matrices=False)
        u = q @ ub
    else:
        raise ParameterError(f"unknown SVD method {method!r}")

    left = u[:, :rank] * s[:rank]
    right = vt[:rank]
    return FactorPair(left.astype(out_dtype), right.astype(out_dtype))


def singular_values(m) -> np.ndarray:
    m = check_matrix(m)
    return np.linalg.svd(m.astype(_compute_dtype(m.dtype)), compute_uv=False)


def gram_singular_values(m) -> np.ndarray:
    """Singular values from an eigendecomposition of the Gram matrix.

    Independent of the LAPACK SVD path; used as a test oracle. Computed in
    float64, sorted descending, with tiny negative eigenvalues clipped to 0.
    """
    m = check_matrix(m).astype(np.float64)
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    eig = np.linalg.eigvalsh(gram)[::-1]
    return np.sqrt(np.clip(eig, 0.0, None))


def tail_energy(sigma: np.ndarray, rank: int) -> float:
    """Frobenius norm of the optimal rank-``rank`` residual."""
    return float(np.sqrt(np.sum(np.asarray(sigma[rank:], dtype=np.float64) ** 2)))


def explained_variance_ratio(m, rank: int) -> float:
    """Share of squared singular-value mass in the top ``rank`` directions.

    A zero matrix is fully explained at any rank and returns 1.0.
    """
    m = check_matrix(m)
    if not 0 <= rank <= min(m.shape):
        raise ParameterError(f"rank {rank} outside [0, {min(m.shape)}]")
    energy = singular_values(m).astype(np.float64) ** 2
    total = energy.sum()
    if total == 0.0:
        return 1.0
    return float(min(energy[:rank].sum() / total, 1.0))


def explained_variance_curve(m, max_rank: int | None = None) -> np.ndarray:
    """``explained_variance_ratio`` for ranks ``1..max_rank`` in one SVD."""
    m = check_matrix(m)
    energy = singular_values(m).astype(np.float64) ** 2
    max_rank = len(energy) if max_rank is None else min(max_rank, len(energy))
    total = energy.sum()
    if total == 0.0:
        return np.ones(max_rank)
    return np.minimum(np.cumsum(energy)[:max_rank] / total, 1.0)


def rank_for_variance(m, target: float, max_rank: int) -> tuple[int, float]:
    """Smallest rank whose explained variance reaches ``target``.

    The result is clamped to ``max_rank`` (and to the matrix size), so the
    returned ratio can fall short of the target.

    Returns:
        ``(rank, achieved_ratio)``
    """
    if not 0.0 < target <= 1.0:
        raise ParameterError(f"target must be in (0, 1], got {target}")
    if max_rank < 1:
        raise ParameterError(f"max_rank must be >= 1, got {max_rank}")
    curve = explained_variance_curve(m)
    # Guard against the last cumulative value landing a few ulp below 1.
    reached = np.nonzero(curve >= target - 1e-12)[0]
    rank = int(reached[0]) + 1 if len(reached) else len(curve)
    rank = min(rank, max_rank, len(curve))
    return rank, float(curve[rank - 1])
