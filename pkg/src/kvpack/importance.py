"""Per-token attention importance and tier assignment.

Importance is an exponential moving average of head-averaged attention
weights. Every cached token carries one score, keyed by its sequence
position. Compressed tokens are ranked by score and split into groups; the
highest-scoring group is decompressed at the full stored rank and the others
at progressively smaller ranks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from kvpack.errors import DataError, ParameterError, ShapeError

ROW_SUM_TOLERANCE = 1e-4
RATIO_SUM_TOLERANCE = 1e-9


@dataclass
class ImportanceTable:
    """Scores for every cached token, sorted by sequence position."""

    alpha: float = 0.25
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float64))

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ParameterError(f"alpha must be in [0, 1), got {self.alpha}")
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.positions.shape != self.scores.shape:
            raise ShapeError("positions and scores differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    def copy(self) -> "ImportanceTable":
        return ImportanceTable(self.alpha, self.positions.copy(), self.scores.copy())

    def add(self, positions) -> None:
        """Register new tokens with score 0. Positions must exceed all existing ones."""
        positions = np.asarray(positions, dtype=np.int64)
        if len(positions) == 0:
            return
        if len(self.positions) and positions.min() <= self.positions[-1]:
            raise ParameterError("new positions must follow every tracked position")
        if np.any(np.diff(positions) <= 0):
            raise ParameterError("new positions must be strictly increasing")
        self.positions = np.concatenate([self.positions, positions])
        self.scores = np.concatenate([self.scores, np.zeros(len(positions))])

    def index_of(self, positions) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.int64)
        idx = np.searchsorted(self.positions, positions)
        if np.any(idx >= len(self.positions)) or np.any(self.positions[idx] != positions):
            raise ShapeError("some positions are not tracked by the importance table")
        return idx

    def lookup(self, positions) -> np.ndarray:
        return self.scores[self.index_of(positions)]

    def remove(self, positions) -> None:
        keep = np.ones(len(self.positions), dtype=bool)
        keep[self.index_of(positions)] = False
        self.positions = self.positions[keep]
        self.scores = self.scores[keep]

    def reset(self) -> None:
        self.scores = np.zeros_like(self.scores)


def update(table: ImportanceTable, attn, t_q: int | None = None, positions=None) -> None:
    """Fold one forward call's attention into the table, in place.

    ``attn`` is ``(T_q, T)``: row ``i`` holds the head-averaged attention of
    new query ``i`` over every cached token. The update is applied once per
    call::

        score <- alpha**T_q * score + (1 - alpha**T_q) * mean_i attn[i]

    Args:
        table: the table to update.
        attn: head-averaged attention weights; each row must sum to 1.
        t_q: number of new queries, defaults to ``attn.shape[0]``.
        positions: sequence position of each column of ``attn``. Defaults to
            the table's own order.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 2:
        raise ShapeError(f"attention must be 2-D, got {attn.shape}")
    t_q = attn.shape[0] if t_q is None else t_q
    if t_q != attn.shape[0] or t_q < 1:
        raise ShapeError(f"T_q={t_q} does not match {attn.shape[0]} attention rows")
    tracked = len(table) if positions is None else len(positions)
    if attn.shape[1] != tracked:
        raise ShapeError(f"attention covers {attn.shape[1]} tokens, expected {tracked}")
    if not np.all(np.isfinite(attn)):
        raise DataError("attention weights contain non-finite values")
    if np.any(np.abs(attn.sum(axis=1) - 1.0) > ROW_SUM_TOLERANCE):
        raise DataError("attention rows must each sum to 1")

    window = attn.mean(axis=0)
    idx = slice(None) if positions is None else table.index_of(positions)
    decay = table.alpha**t_q
    new = decay * table.scores[idx] + (1.0 - decay) * window
    # Attention weights can overshoot [0, 1] by rounding only.
    table.scores[idx] = np.clip(new, 0.0, 1.0)


@dataclass
class GroupAssignment:
    """Partition of the compressed tokens into decompression tiers.

    ``masks[f]`` holds row indices (into the compressed block, ascending) of
    the tokens in tier ``f``; tier 0 holds the highest-importance tokens.
    """

    masks: list[np.ndarray]
    ratios: tuple[float, ...]
    ranks: tuple[int, ...]

    @property
    def num_groups(self) -> int:
        return len(self.masks)

    @property
    def sizes(self) -> list[int]:
        return [len(m) for m in self.masks]

    def rank_per_row(self, num_rows: int) -> np.ndarray:
        out = np.zeros(num_rows, dtype=np.int64)
        for mask, rank in zip(self.masks, self.ranks):
            out[mask] = rank
        return out


def check_groups(ratios: Sequence[float], ranks: Sequence[int]) -> None:
    if len(ratios) == 0 or len(ratios) != len(ranks):
        raise ParameterError("need one rank per group ratio")
    if any(r < 0 for r in ratios):
        raise ParameterError("group ratios must be non-negative")
    if abs(sum(ratios) - 1.0) > RATIO_SUM_TOLERANCE:
        raise ParameterError(f"group ratios sum to {sum(ratios)}, not 1")
    if any(r < 1 for r in ranks):
        raise ParameterError("group ranks must be >= 1")
    if any(a < b for a, b in zip(ranks, ranks[1:])):
        raise ParameterError(f"group ranks must be non-increasing, got {tuple(ranks)}")


def group_sizes(total: int, ratios: Sequence[float]) -> list[int]:
    """Round each group to the nearest token (halves up); the last group takes the rest."""
    sizes = []
    remaining = total
    for r in ratios[:-1]:
        n = min(int(np.floor(r * total + 0.5)), remaining)
        sizes.append(n)
        remaining -= n
    sizes.append(remaining)
    return sizes


def assign_groups(
    scores,
    ratios: Sequence[float],
    ranks: Sequence[int],
    positions=None,
) -> GroupAssignment:
    """Split compressed tokens into tiers by descending importance.

    Args:
        scores: importance of each compressed row, in row order.
        ratios: fraction of tokens per group, summing to 1.
        ranks: decompression rank per group, non-increasing.
        positions: sequence position per row, used to break ties (earlier
            wins). Defaults to row order.
    """
    check_groups(ratios, ranks)
    scores = np.asarray(scores, dtype=np.float64)
    positions = np.arange(len(scores)) if positions is None else np.asarray(positions)
    if positions.shape != scores.shape:
        raise ShapeError("scores and positions differ in length")
    order = np.lexsort((positions, -scores))
    masks = []
    start = 0
    for n in group_sizes(len(scores), ratios):
        masks.append(np.sort(order[start : start + n]))
        start += n
    return GroupAssignment(masks, tuple(ratios), tuple(int(r) for r in ranks))


def _exact(x) -> Fraction:
    # Decimal reading of floats, so 0.1 means 1/10.
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


@dataclass(frozen=True)
class FlopsEstimate:
    flops: Fraction
    reduction: Fraction

    @property
    def flops_int(self) -> int:
        if self.flops.denominator != 1:
            raise ValueError(f"{self.flops} is not an integer flop count")
        return int(self.flops)


def flops_partial_decompress(
    num_tokens: int, width: int, ratios: Sequence[float], ranks: Sequence[int]
) -> FlopsEstimate:
    """Closed-form decompression cost of a tiered block, in exact arithmetic.

    ``flops = 2 * T * width * sum_f r_f * R_f`` and the reduction relative to
    decompressing every token at ``R_1`` is ``1 - sum_f r_f R_f / R_1``.
    """
    check_groups(ratios, ranks)
    weighted = sum(_exact(r) * _exact(k) for r, k in zip(ratios, ranks))
    flops = 2 * num_tokens * width * weighted
    return FlopsEstimate(flops, 1 - weighted / _exact(ranks[0]))


def decompression_flops(sizes: Sequence[int], width: int, ranks: Sequence[int]) -> int:
    """Actual multiply-add count for decompressing groups of the given sizes."""
    return 2 * width * sum(int(n) * int(r) for n, r in zip(sizes, ranks))
