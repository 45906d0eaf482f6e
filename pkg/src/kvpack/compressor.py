"""Head-combined compression of cache segments and per-layer rank selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from kvpack.cache import Block, ModalitySegment
from kvpack.errors import ParameterError
from kvpack.linalg import (
    FactorPair,
    SVDMethod,
    check_matrix,
    explained_variance_curve,
    rank_for_variance,
    truncated_svd,
)

log = logging.getLogger(__name__)


def clamp_rank(rank: int, shape: tuple[int, int]) -> tuple[int, str | None]:
    """Limit ``rank`` to what a matrix of ``shape`` can hold.

    Returns the usable rank and a human-readable note when clamping occurred.
    """
    limit = min(shape)
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    if rank > limit:
        return limit, f"rank {rank} clamped to {limit} for a {shape[0]}x{shape[1]} matrix"
    return rank, None


def compress_segment(
    m, rank: int, method: SVDMethod = "exact", seed: int = 0
) -> FactorPair:
    """Factorize a head-combined ``(T, H_kv*D)`` matrix at ``rank``.

    Ranks above ``min(T, H_kv*D)`` are clamped with a logged warning.
    """
    m = check_matrix(m)
    rank, note = clamp_rank(rank, m.shape)
    if note:
        log.warning(note)
    return truncated_svd(m, rank, method=method, seed=seed)


def compress_rows(
    segment: ModalitySegment,
    k_rows: np.ndarray,
    v_rows: np.ndarray,
    positions: np.ndarray,
    rank_k: int | None,
    rank_v: int | None,
    method: SVDMethod = "exact",
    seed: int = 0,
) -> list[str]:
    """Replace a segment's block with a factorization of the given rows.

    The rows become the new compressed block and the tail is cleared. A
    ``None`` rank keeps that matrix kind dense.

    Returns:
        Notes about clamped ranks, for step reports.
    """
    notes = []

    def factor(rows: np.ndarray, rank: int | None, salt: int) -> Block:
        rows = rows.astype(segment.dtype, copy=False)
        if rank is None or len(rows) == 0:
            return rows.copy()
        r, note = clamp_rank(rank, rows.shape)
        if note:
            notes.append(f"{segment.modality.name.lower()}: {note}")
        return truncated_svd(rows, r, method=method, seed=seed + salt)

    block_k = factor(k_rows, rank_k, 0)
    block_v = factor(v_rows, rank_v, 1)
    segment.set_block(block_k, block_v, positions)
    segment.clear_tail()
    return notes


def compress_whole_segment(
    segment: ModalitySegment,
    rank_k: int | None,
    rank_v: int | None,
    method: SVDMethod = "exact",
    seed: int = 0,
) -> list[str]:
    """Recompress every token of a segment (block at full stored rank plus tail)."""
    if len(segment) == 0:
        return []
    k, v = segment.dense()
    return compress_rows(segment, k, v, segment.positions, rank_k, rank_v, method, seed)


def split_heads(m: np.ndarray, num_heads: int) -> list[np.ndarray]:
    if m.shape[1] % num_heads:
        raise ParameterError(f"width {m.shape[1]} not divisible by {num_heads} heads")
    return np.split(m, num_heads, axis=1)


def compress_per_head(
    m, num_heads: int, rank: int, method: SVDMethod = "exact", seed: int = 0
) -> list[FactorPair]:
    """Factorize each head's ``(T, D)`` slice independently."""
    m = check_matrix(m)
    return [
        compress_segment(h, rank, method, seed + i)
        for i, h in enumerate(split_heads(m, num_heads))
    ]


def per_head_error(m, factors: list[FactorPair]) -> float:
    """Frobenius error of the per-head reconstruction of the whole matrix."""
    approx = np.concatenate([f.reconstruct() for f in factors], axis=1)
    return float(np.linalg.norm(approx - m))


def combined_scalars(num_tokens: int, width: int, rank: int) -> int:
    return rank * (num_tokens + width)


def per_head_scalars(num_tokens: int, num_heads: int, head_dim: int, rank: int) -> int:
    return num_heads * rank * (num_tokens + head_dim)


def equal_budget_ranks(
    num_tokens: int, num_heads: int, head_dim: int, budget: int
) -> tuple[int, int]:
    """Largest combined and per-head ranks whose storage fits ``budget`` scalars."""
    combined = budget // (num_tokens + num_heads * head_dim)
    per_head = budget // (num_heads * (num_tokens + head_dim))
    return combined, per_head


def variance_by_head(m, num_heads: int, max_rank: int) -> dict[str, np.ndarray]:
    """Rank-vs-explained-variance curves with and without combining heads.

    ``per_head`` is the mean of the individual head curves. Both curves are
    padded with 1.0 beyond the matrix's full rank.
    """
    m = check_matrix(m)

    def padded(curve):
        out = np.ones(max_rank)
        out[: len(curve)] = curve[:max_rank]
        return out

    combined = padded(explained_variance_curve(m, max_rank))
    heads = [padded(explained_variance_curve(h, max_rank)) for h in split_heads(m, num_heads)]
    return {"combined": combined, "per_head": np.mean(heads, axis=0)}


@dataclass(frozen=True)
class RankScheme:
    """How a layer's compression rank is chosen.

    ``fixed`` uses ``rank``; ``linear`` interpolates from ``first`` (layer 0)
    to ``last`` (layer ``num_layers - 1``); ``variance`` picks the smallest
    rank reaching ``target`` explained variance, capped at ``max_rank``.
    """

    kind: Literal["fixed", "linear", "variance"] = "fixed"
    rank: int = 64
    first: int = 16
    last: int = 128
    num_layers: int = 32
    target: float = 0.9
    max_rank: int = 64

    def __post_init__(self):
        if self.kind not in ("fixed", "linear", "variance"):
            raise ParameterError(f"unknown rank scheme {self.kind!r}")
        if min(self.rank, self.first, self.last, self.max_rank, self.num_layers) < 1:
            raise ParameterError("ranks and layer counts must be >= 1")
        if not 0.0 < self.target <= 1.0:
            raise ParameterError(f"variance target must be in (0, 1], got {self.target}")

    @classmethod
    def fixed(cls, rank: int) -> "RankScheme":
        return cls(kind="fixed", rank=rank)

    @classmethod
    def linear(cls, first: int, last: int, num_layers: int) -> "RankScheme":
        return cls(kind="linear", first=first, last=last, num_layers=num_layers)

    @classmethod
    def variance(cls, target: float, max_rank: int) -> "RankScheme":
        return cls(kind="variance", target=target, max_rank=max_rank)


def layer_rank(scheme: RankScheme | int, layer_index: int, matrix=None) -> int:
    if isinstance(scheme, (int, np.integer)):
        return int(scheme)
    if scheme.kind == "fixed":
        return scheme.rank
    if scheme.kind == "linear":
        if not 0 <= layer_index < scheme.num_layers:
            raise ParameterError(
                f"layer {layer_index} outside a {scheme.num_layers}-layer schedule"
            )
        if scheme.num_layers == 1:
            return scheme.first
        step = (scheme.last - scheme.first) * layer_index / (scheme.num_layers - 1)
        return int(np.floor(scheme.first + step + 0.5))
    if matrix is None:
        raise ParameterError("the variance scheme needs the matrix being compressed")
    return rank_for_variance(matrix, scheme.target, scheme.max_rank)[0]
