"""Eviction of low-importance tokens and 4-bit storage of cache scalars.

The quantizer is a plain asymmetric uniform scheme: each run of
``group_size`` consecutive scalars down a column gets its own minimum
(zero-point) and step ``(max - min) / 15``, and values are rounded to the
nearest of the 16 levels. Codes are packed two per byte, low nibble first,
in column-major order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kvpack.cache import Block, LayerCache, Modality, ModalitySegment, block_rows
from kvpack.errors import ParameterError, ShapeError
from kvpack.importance import GroupAssignment
from kvpack.linalg import FactorPair

LEVELS = 15
DEFAULT_GROUP_SIZE = 64


def _param_dtype(dtype) -> np.dtype:
    return np.dtype(np.float64) if np.dtype(dtype) == np.float64 else np.dtype(np.float32)


@dataclass
class QuantBlock:
    """A 2-D array stored as packed 4-bit codes with per-group affine parameters."""

    codes: np.ndarray  # uint8, ceil(n / 2)
    scales: np.ndarray  # (cols, groups_per_col)
    zeros: np.ndarray  # (cols, groups_per_col)
    shape: tuple[int, int]
    group_size: int
    dtype: np.dtype

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def nbytes(self) -> int:
        return self.codes.nbytes + self.scales.nbytes + self.zeros.nbytes

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantBlock):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.group_size == other.group_size
            and np.dtype(self.dtype) == np.dtype(other.dtype)
            and np.array_equal(self.codes, other.codes)
            and self.scales.tobytes() == other.scales.tobytes()
            and self.zeros.tobytes() == other.zeros.tobytes()
        )


def packed_length(n: int) -> int:
    return (n + 1) // 2


def num_groups(shape: tuple[int, int], group_size: int) -> int:
    rows, cols = shape
    return cols * -(-rows // group_size)


def quantized_nbytes(shape: tuple[int, int], group_size: int, dtype) -> int:
    """Bytes of a :class:`QuantBlock` for an array of ``shape``, from the layout alone."""
    n = shape[0] * shape[1]
    return packed_length(n) + 2 * num_groups(shape, group_size) * _param_dtype(dtype).itemsize


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    if len(codes) % 2:
        codes = np.append(codes, np.uint8(0))
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, n: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(2 * len(packed), dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


def _grouped(x: np.ndarray, group_size: int) -> np.ndarray:
    """``(cols, groups, group_size)`` view of ``x.T`` padded with NaN."""
    rows, cols = x.shape
    per_col = -(-rows // group_size)
    padded = np.full((cols, per_col * group_size), np.nan)
    padded[:, :rows] = x.T
    return padded.reshape(cols, per_col, group_size)


def quantize(x, group_size: int = DEFAULT_GROUP_SIZE) -> QuantBlock:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"can only quantize 2-D arrays, got {x.shape}")
    if group_size < 1:
        raise ParameterError(f"group size must be >= 1, got {group_size}")
    pdtype = _param_dtype(x.dtype)
    rows, cols = x.shape
    if x.size == 0:
        empty = np.zeros((cols, 0), dtype=pdtype)
        return QuantBlock(np.zeros(0, np.uint8), empty, empty.copy(), x.shape, group_size, x.dtype)

    g = _grouped(x.astype(np.float64), group_size)
    lo = np.nanmin(g, axis=2)
    hi = np.nanmax(g, axis=2)
    scales = ((hi - lo) / LEVELS).astype(pdtype)
    zeros = lo.astype(pdtype)
    s = scales.astype(np.float64)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(s > 0, np.rint((g - zeros.astype(np.float64)[..., None]) / s), 0.0)
    q = np.clip(np.nan_to_num(q), 0, LEVELS).astype(np.uint8)
    codes = q.reshape(cols, -1)[:, :rows]
    return QuantBlock(pack_nibbles(codes), scales, zeros, x.shape, group_size, x.dtype)


def dequantize(block: QuantBlock) -> np.ndarray:
    rows, cols = block.shape
    if block.size == 0:
        return np.zeros(block.shape, dtype=block.dtype)
    per_col = block.scales.shape[1]
    codes = np.zeros((cols, per_col * block.group_size))
    codes[:, :rows] = unpack_nibbles(block.codes, block.size).reshape(cols, rows)
    codes = codes.reshape(cols, per_col, block.group_size)
    pdtype = block.scales.dtype
    values = block.zeros[..., None] + codes.astype(pdtype) * block.scales[..., None]
    return values.reshape(cols, -1)[:, :rows].T.astype(block.dtype)


@dataclass
class QuantizedFactor:
    """A factor pair whose per-token left factor is 4-bit; ``right`` stays dense."""

    left: QuantBlock
    right: np.ndarray

    @property
    def nbytes(self) -> int:
        return self.left.nbytes + self.right.nbytes


QuantizedBlock = QuantizedFactor | QuantBlock


def _block_nbytes(block) -> int:
    return 0 if block is None else block.nbytes


@dataclass
class QuantizedSegment:
    modality: Modality
    width: int
    dtype: np.dtype
    tail_k: QuantBlock
    tail_v: QuantBlock
    tail_positions: np.ndarray
    block_k: QuantizedBlock | None
    block_v: QuantizedBlock | None
    block_positions: np.ndarray

    @property
    def nbytes(self) -> int:
        return (
            self.tail_k.nbytes
            + self.tail_v.nbytes
            + _block_nbytes(self.block_k)
            + _block_nbytes(self.block_v)
        )


@dataclass
class QuantizedCache:
    """4-bit view of a :class:`LayerCache`.

    Left factors, dense blocks and tails are quantized; decompression
    matrices are kept at full precision.
    """

    cache: LayerCache  # geometry, importance and positions; payloads are ignored
    segments: dict[Modality, QuantizedSegment]
    group_size: int

    def memory_bytes(self) -> int:
        return sum(s.nbytes for s in self.segments.values())

    def dequantize(self) -> LayerCache:
        out = self.cache.copy()
        for modality, qs in self.segments.items():
            seg = out.segment(modality)
            seg.tail_k = dequantize(qs.tail_k)
            seg.tail_v = dequantize(qs.tail_v)
            seg.tail_positions = qs.tail_positions.copy()
            seg.block_k = _restore(qs.block_k)
            seg.block_v = _restore(qs.block_v)
            seg.block_positions = qs.block_positions.copy()
        return out


def _quantize_block(block: Block | None, group_size: int) -> QuantizedBlock | None:
    if block is None:
        return None
    if isinstance(block, FactorPair):
        return QuantizedFactor(quantize(block.left, group_size), block.right.copy())
    return quantize(block, group_size)


def _restore(block: QuantizedBlock | None) -> Block | None:
    if block is None:
        return None
    if isinstance(block, QuantizedFactor):
        return FactorPair(dequantize(block.left), block.right.copy())
    return dequantize(block)


def quantize_cache(cache: LayerCache, group_size: int = DEFAULT_GROUP_SIZE) -> QuantizedCache:
    segments = {}
    for modality, seg in cache.segments.items():
        segments[modality] = QuantizedSegment(
            modality=modality,
            width=seg.width,
            dtype=seg.dtype,
            tail_k=quantize(seg.tail_k, group_size),
            tail_v=quantize(seg.tail_v, group_size),
            tail_positions=seg.tail_positions.copy(),
            block_k=_quantize_block(seg.block_k, group_size),
            block_v=_quantize_block(seg.block_v, group_size),
            block_positions=seg.block_positions.copy(),
        )
    return QuantizedCache(cache.copy(), segments, group_size)


def fake_quantize_block(block: Block | None, group_size: int = DEFAULT_GROUP_SIZE) -> Block | None:
    """Round-trip a block's per-token scalars through 4-bit storage."""
    return _restore(_quantize_block(block, group_size))


def evict_low_groups(
    cache: LayerCache, modality, assignment: GroupAssignment
) -> np.ndarray:
    """Drop every compressed token outside the top group, in place.

    Rows leave both the key and value blocks and the importance table;
    decompression matrices are untouched.

    Returns:
        Sequence positions of the evicted tokens.
    """
    seg: ModalitySegment = cache.segment(modality)
    if assignment.num_groups <= 1 or seg.num_compressed == 0:
        return np.zeros(0, dtype=np.int64)
    total = sum(assignment.sizes)
    if total != seg.num_compressed:
        raise ShapeError(
            f"assignment covers {total} tokens, block holds {seg.num_compressed}"
        )
    keep = assignment.masks[0]
    dropped = np.setdiff1d(np.arange(seg.num_compressed), keep)
    evicted = seg.block_positions[dropped]

    def take(block: Block) -> Block:
        return block.take_rows(keep) if isinstance(block, FactorPair) else block[keep]

    if len(keep):
        seg.set_block(take(seg.block_k), take(seg.block_v), seg.block_positions[keep])
    else:
        seg.block_k = seg.block_v = None
        seg.block_positions = np.zeros(0, dtype=np.int64)
    cache.importance.remove(evicted)
    assert block_rows(seg.block_k) == seg.num_compressed
    return evicted
