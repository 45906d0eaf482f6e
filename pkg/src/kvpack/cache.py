"""Per-layer KV store with modality segments and exact byte accounting.

Rows are stored head-combined: one row per token, ``num_kv_heads * head_dim``
wide. Each modality keeps its own segment so visual and textual tokens are
never factorized together. Within a segment the compressed block always
precedes the uncompressed tail in sequence order.

A compressed block stores, per matrix kind, either a :class:`FactorPair` or a
plain dense array. The dense form is used when that kind is configured not to
be compressed (for example key-only compression), so K and V blocks always
cover the same tokens.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from kvpack.errors import DataError, ParameterError, ShapeError
from kvpack.importance import ImportanceTable
from kvpack.linalg import FactorPair

Block = Union[FactorPair, np.ndarray]

SCALAR_DTYPES = {2: np.float16, 4: np.float32, 8: np.float64}


class Modality(enum.IntEnum):
    VISUAL = 0
    TEXTUAL = 1

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ParameterError(f"unknown modality {value!r}") from None
        return cls(value)


@dataclass(frozen=True)
class HeadGeometry:
    num_query_heads: int
    num_kv_heads: int
    head_dim: int

    def __post_init__(self):
        if min(self.num_query_heads, self.num_kv_heads, self.head_dim) < 1:
            raise ParameterError("head counts and head_dim must be positive")
        if self.num_query_heads % self.num_kv_heads:
            raise ParameterError(
                f"{self.num_kv_heads} KV heads do not divide {self.num_query_heads} query heads"
            )

    @property
    def kv_width(self) -> int:
        return self.num_kv_heads * self.head_dim

    @property
    def model_width(self) -> int:
        return self.num_query_heads * self.head_dim

    @property
    def group_size(self) -> int:
        """Query heads sharing each KV head."""
        return self.num_query_heads // self.num_kv_heads


def block_rows(block: Block | None) -> int:
    if block is None:
        return 0
    return block.rows if isinstance(block, FactorPair) else block.shape[0]


def block_rank(block: Block | None) -> int:
    """Stored rank of a factored block, 0 for dense or missing blocks."""
    return block.rank if isinstance(block, FactorPair) else 0


def block_scalars(block: Block | None) -> int:
    if block is None:
        return 0
    return block.scalar_count() if isinstance(block, FactorPair) else block.size


def decompress_rows(block: Block, rows, rank: int | None = None) -> np.ndarray:
    """Rebuild the given rows of a block, using the first ``rank`` factors."""
    if isinstance(block, FactorPair):
        r = block.rank if rank is None else min(rank, block.rank)
        return block.left[rows, :r] @ block.right[:r]
    return block[rows]


@dataclass
class ModalitySegment:
    """Tokens of one modality: a compressed block followed by a dense tail."""

    modality: Modality
    width: int
    dtype: np.dtype = np.dtype(np.float32)
    tail_k: np.ndarray = None
    tail_v: np.ndarray = None
    tail_positions: np.ndarray = None
    block_k: Block | None = None
    block_v: Block | None = None
    block_positions: np.ndarray = None

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype)
        empty = np.zeros((0, self.width), dtype=self.dtype)
        if self.tail_k is None:
            self.tail_k = empty.copy()
        if self.tail_v is None:
            self.tail_v = empty.copy()
        if self.tail_positions is None:
            self.tail_positions = np.zeros(0, dtype=np.int64)
        if self.block_positions is None:
            self.block_positions = np.zeros(0, dtype=np.int64)

    @property
    def num_uncompressed(self) -> int:
        return self.tail_k.shape[0]

    @property
    def num_compressed(self) -> int:
        return len(self.block_positions)

    def __len__(self) -> int:
        return self.num_compressed + self.num_uncompressed

    @property
    def positions(self) -> np.ndarray:
        return np.concatenate([self.block_positions, self.tail_positions])

    @property
    def rank_k(self) -> int:
        return block_rank(self.block_k)

    @property
    def rank_v(self) -> int:
        return block_rank(self.block_v)

    def scalar_count(self) -> int:
        return (
            self.tail_k.size
            + self.tail_v.size
            + block_scalars(self.block_k)
            + block_scalars(self.block_v)
        )

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Full-rank reconstruction of all rows, block first."""
        ks, vs = [], []
        if self.num_compressed:
            rows = np.arange(self.num_compressed)
            ks.append(decompress_rows(self.block_k, rows))
            vs.append(decompress_rows(self.block_v, rows))
        ks.append(self.tail_k)
        vs.append(self.tail_v)
        return np.concatenate(ks).astype(self.dtype), np.concatenate(vs).astype(self.dtype)

    def set_block(self, block_k: Block, block_v: Block, positions) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        if not block_rows(block_k) == block_rows(block_v) == len(positions):
            raise ShapeError("key block, value block and positions differ in length")
        for b in (block_k, block_v):
            cols = b.cols if isinstance(b, FactorPair) else b.shape[1]
            if cols != self.width:
                raise ShapeError(f"block width {cols} != segment width {self.width}")
        if len(positions) == 0:
            block_k = block_v = None
        self.block_k, self.block_v, self.block_positions = block_k, block_v, positions

    def clear_tail(self) -> None:
        self.tail_k = np.zeros((0, self.width), dtype=self.dtype)
        self.tail_v = np.zeros((0, self.width), dtype=self.dtype)
        self.tail_positions = np.zeros(0, dtype=np.int64)


@dataclass
class MemoryReport:
    """Byte counts for one cache. ``total`` excludes the importance table."""

    segments: dict[Modality, int]
    importance: int
    bytes_per_scalar: int

    @property
    def total(self) -> int:
        return sum(self.segments.values())


@dataclass
class LayerCache:
    """KV cache of one attention layer for one batch instance."""

    geometry: HeadGeometry
    dtype: np.dtype = np.dtype(np.float32)
    alpha: float = 0.25
    layer_index: int = 0
    segments: dict[Modality, ModalitySegment] = field(default_factory=dict)
    importance: ImportanceTable = None
    next_position: int = 0

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype)
        if self.dtype.itemsize not in SCALAR_DTYPES:
            raise ParameterError(f"unsupported cache dtype {self.dtype}")
        if self.importance is None:
            self.importance = ImportanceTable(alpha=self.alpha)

    @property
    def width(self) -> int:
        return self.geometry.kv_width

    def segment(self, modality) -> ModalitySegment:
        modality = Modality.parse(modality)
        if modality not in self.segments:
            self.segments[modality] = ModalitySegment(modality, self.width, self.dtype)
            self.segments = dict(sorted(self.segments.items()))
        return self.segments[modality]

    def ordered_segments(self) -> list[ModalitySegment]:
        return [self.segments[m] for m in sorted(self.segments)]

    def __len__(self) -> int:
        return sum(len(s) for s in self.segments.values())

    @property
    def num_compressed(self) -> int:
        return sum(s.num_compressed for s in self.segments.values())

    @property
    def num_uncompressed(self) -> int:
        return sum(s.num_uncompressed for s in self.segments.values())

    def positions(self) -> np.ndarray:
        """Sequence positions in storage order (segment by segment)."""
        parts = [s.positions for s in self.ordered_segments()]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def append(self, modality, k_new, v_new) -> np.ndarray:
        """Add tokens to the uncompressed tail of a segment.

        New tokens enter the importance table with score 0.

        Returns:
            The sequence positions assigned to the new tokens.
        """
        k_new = np.atleast_2d(np.asarray(k_new))
        v_new = np.atleast_2d(np.asarray(v_new))
        if k_new.shape != v_new.shape or k_new.shape[1] != self.width:
            raise ShapeError(
                f"expected (T, {self.width}) keys and values, got {k_new.shape} and {v_new.shape}"
            )
        if not (np.all(np.isfinite(k_new)) and np.all(np.isfinite(v_new))):
            raise DataError("appended keys or values contain non-finite entries")
        seg = self.segment(modality)
        n = k_new.shape[0]
        positions = np.arange(self.next_position, self.next_position + n, dtype=np.int64)
        seg.tail_k = np.concatenate([seg.tail_k, k_new.astype(self.dtype)])
        seg.tail_v = np.concatenate([seg.tail_v, v_new.astype(self.dtype)])
        seg.tail_positions = np.concatenate([seg.tail_positions, positions])
        self.importance.add(positions)
        self.next_position += n
        return positions

    def memory_bytes(self, bytes_per_scalar: int | None = None) -> MemoryReport:
        """Bytes held per segment, counting stored scalars only.

        ``bytes_per_scalar`` defaults to the cache dtype's width. The
        importance table (one scalar per token) is reported separately.
        """
        b = self.dtype.itemsize if bytes_per_scalar is None else bytes_per_scalar
        per_segment = {m: s.scalar_count() * b for m, s in self.segments.items()}
        return MemoryReport(per_segment, len(self.importance) * b, b)

    def dense_bytes(self, bytes_per_scalar: int | None = None) -> int:
        """Bytes an uncompressed cache holding the same tokens would need."""
        b = self.dtype.itemsize if bytes_per_scalar is None else bytes_per_scalar
        return 2 * len(self) * self.width * b

    def copy(self) -> "LayerCache":
        return copy.deepcopy(self)


def compression_ratio(num_tokens: int, width: int, rank: int) -> float:
    """Dense size over factored size, ``T*HD / (T*R + R*HD)``."""
    if rank < 1:
        raise ParameterError(f"rank must be >= 1, got {rank}")
    return num_tokens * width / (num_tokens * rank + rank * width)
