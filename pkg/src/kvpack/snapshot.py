"""KVPK binary snapshots of a single layer cache.

All integers and floats are little-endian. Layout::

    magic         4 bytes  b"KVPK"
    version       u32      1
    H, H_kv, D    u32 x 3
    scalar width  u8       2, 4 or 8 (bytes per stored cache scalar)
    layer index   u32
    next position u64
    alpha         f64
    segments      u32      count, then one record per segment:
        modality  u8       0 visual, 1 textual
        payload   u8       0 dense, 1 block-quantized 4-bit
        T_uc      u32
        T_cc      u32
        R_k       u32      0 when the key block is stored dense
        R_v       u32      0 when the value block is stored dense
        group     u32      quantization group size (0 for dense payloads)
    per segment, in record order:
        block positions  i64[T_cc]
        tail positions   i64[T_uc]
        key block, value block, key tail, value tail
    importance:
        n u64, positions i64[n], scores f64[n]

A factored block is its left factor (T_cc x R) followed by its right factor
(R x H_kv*D); a dense block is T_cc x H_kv*D. Matrices are row-major at the
declared scalar width. In quantized payloads every left factor, dense block
and tail is written as packed codes (ceil(n/2) bytes), then scales and
zero-points (float64 for 8-byte caches, float32 otherwise) of shape
(cols, groups per column); right factors stay dense.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from kvpack.cache import (
    SCALAR_DTYPES,
    Block,
    HeadGeometry,
    LayerCache,
    Modality,
    ModalitySegment,
    block_rank,
)
from kvpack.errors import ParameterError, ShapeError, SnapshotError
from kvpack.hybrid import (
    QuantBlock,
    QuantizedCache,
    QuantizedFactor,
    QuantizedSegment,
    _param_dtype,
    num_groups,
    packed_length,
)
from kvpack.importance import ImportanceTable
from kvpack.linalg import FactorPair

MAGIC = b"KVPK"
VERSION = 1
DENSE, QUANT4 = 0, 1

_HEADER = struct.Struct("<4sIIIIBIQdI")
_SEGMENT = struct.Struct("<BBIIIII")


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


class _Reader:
    def __init__(self, data: bytes):
        self.buf = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise SnapshotError("snapshot is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))

    def array(self, dtype, shape) -> np.ndarray:
        dtype = _le(dtype)
        count = int(np.prod(shape))
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def _write_array(out: io.BytesIO, a: np.ndarray, dtype) -> None:
    out.write(np.ascontiguousarray(a, dtype=_le(dtype)).tobytes())


def _write_block(out, block: Block | None, dtype) -> None:
    if block is None:
        return
    if isinstance(block, FactorPair):
        _write_array(out, block.left, dtype)
        _write_array(out, block.right, dtype)
    else:
        _write_array(out, block, dtype)


def _read_block(r: _Reader, rows: int, rank: int, width: int, dtype) -> Block | None:
    if rows == 0:
        return None
    if rank:
        left = r.array(dtype, (rows, rank))
        return FactorPair(left, r.array(dtype, (rank, width)))
    return r.array(dtype, (rows, width))


def _write_qblock(out, q: QuantBlock) -> None:
    out.write(q.codes.tobytes())
    _write_array(out, q.scales, q.scales.dtype)
    _write_array(out, q.zeros, q.zeros.dtype)


def _read_qblock(r: _Reader, shape, group_size: int, dtype) -> QuantBlock:
    n = shape[0] * shape[1]
    pdtype = _param_dtype(dtype)
    per_col = -(-shape[0] // group_size) if n else 0
    codes = r.array(np.uint8, (packed_length(n),))
    scales = r.array(pdtype, (shape[1], per_col))
    zeros = r.array(pdtype, (shape[1], per_col))
    assert scales.size == (num_groups(shape, group_size) if n else 0)
    return QuantBlock(codes, scales, zeros, tuple(shape), group_size, np.dtype(dtype))


def _write_qpayload(out, block, dtype) -> None:
    if block is None:
        return
    if isinstance(block, QuantizedFactor):
        _write_qblock(out, block.left)
        _write_array(out, block.right, dtype)
    else:
        _write_qblock(out, block)


def _read_qpayload(r, rows, rank, width, group_size, dtype):
    if rows == 0:
        return None
    if rank:
        left = _read_qblock(r, (rows, rank), group_size, dtype)
        return QuantizedFactor(left, r.array(dtype, (rank, width)))
    return _read_qblock(r, (rows, width), group_size, dtype)


def _qrank(block) -> int:
    return block.right.shape[0] if isinstance(block, QuantizedFactor) else 0


def dumps(cache: LayerCache | QuantizedCache) -> bytes:
    """Serialize a layer cache, or its quantized view, to KVPK bytes."""
    quantized = isinstance(cache, QuantizedCache)
    base = cache.cache if quantized else cache
    geo = base.geometry
    dtype = base.dtype
    out = io.BytesIO()
    out.write(
        _HEADER.pack(
            MAGIC,
            VERSION,
            geo.num_query_heads,
            geo.num_kv_heads,
            geo.head_dim,
            dtype.itemsize,
            base.layer_index,
            base.next_position,
            base.importance.alpha,
            len(base.segments),
        )
    )
    segments = [cache.segments[m] for m in sorted(cache.segments)]
    for seg in segments:
        if quantized:
            ranks = (_qrank(seg.block_k), _qrank(seg.block_v))
            t_uc = seg.tail_k.shape[0]
        else:
            ranks = (block_rank(seg.block_k), block_rank(seg.block_v))
            t_uc = seg.num_uncompressed
        out.write(
            _SEGMENT.pack(
                int(seg.modality),
                QUANT4 if quantized else DENSE,
                t_uc,
                len(seg.block_positions),
                *ranks,
                cache.group_size if quantized else 0,
            )
        )
    for seg in segments:
        _write_array(out, seg.block_positions, np.int64)
        _write_array(out, seg.tail_positions, np.int64)
        if quantized:
            for block in (seg.block_k, seg.block_v):
                _write_qpayload(out, block, dtype)
            _write_qblock(out, seg.tail_k)
            _write_qblock(out, seg.tail_v)
        else:
            _write_block(out, seg.block_k, dtype)
            _write_block(out, seg.block_v, dtype)
            _write_array(out, seg.tail_k, dtype)
            _write_array(out, seg.tail_v, dtype)
    table = base.importance
    out.write(struct.pack("<Q", len(table)))
    _write_array(out, table.positions, np.int64)
    _write_array(out, table.scores, np.float64)
    return out.getvalue()


def loads(data: bytes) -> LayerCache | QuantizedCache:
    """Parse KVPK bytes. Any malformed content raises :class:`SnapshotError`."""
    try:
        return _loads(data)
    except (ParameterError, ShapeError, ValueError) as exc:
        raise SnapshotError(f"inconsistent snapshot: {exc}") from exc


def _loads(data: bytes) -> LayerCache | QuantizedCache:
    r = _Reader(data)
    magic, version, h, h_kv, d, width_tag, layer, next_pos, alpha, n_seg = r.unpack(_HEADER)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    if width_tag not in SCALAR_DTYPES:
        raise SnapshotError(f"bad scalar width tag {width_tag}")
    dtype = np.dtype(SCALAR_DTYPES[width_tag])
    geo = HeadGeometry(h, h_kv, d)
    width = geo.kv_width
    records = [r.unpack(_SEGMENT) for _ in range(n_seg)]
    kinds = {rec[1] for rec in records}
    if len(kinds) > 1 or not kinds <= {DENSE, QUANT4}:
        raise SnapshotError(f"bad payload tags {sorted(kinds)}")
    quantized = kinds == {QUANT4}

    cache = LayerCache(geo, dtype=dtype, layer_index=layer, next_position=next_pos)
    qsegments = {}
    group_size = 0
    for modality, _, t_uc, t_cc, r_k, r_v, group in records:
        modality = Modality(modality)
        block_pos = r.array(np.int64, (t_cc,))
        tail_pos = r.array(np.int64, (t_uc,))
        if quantized:
            group_size = group
            bk = _read_qpayload(r, t_cc, r_k, width, group, dtype)
            bv = _read_qpayload(r, t_cc, r_v, width, group, dtype)
            tk = _read_qblock(r, (t_uc, width), group, dtype)
            tv = _read_qblock(r, (t_uc, width), group, dtype)
            qsegments[modality] = QuantizedSegment(
                modality, width, dtype, tk, tv, tail_pos, bk, bv, block_pos
            )
            cache.segments[modality] = ModalitySegment(
                modality, width, dtype, tail_positions=tail_pos, block_positions=block_pos
            )
        else:
            bk = _read_block(r, t_cc, r_k, width, dtype)
            bv = _read_block(r, t_cc, r_v, width, dtype)
            tk = r.array(dtype, (t_uc, width))
            tv = r.array(dtype, (t_uc, width))
            cache.segments[modality] = ModalitySegment(
                modality, width, dtype, tk, tv, tail_pos, bk, bv, block_pos
            )
    (n,) = r.unpack(struct.Struct("<Q"))
    cache.importance = ImportanceTable(
        alpha, r.array(np.int64, (n,)), r.array(np.float64, (n,))
    )
    if r.pos != len(r.buf):
        raise SnapshotError(f"{len(r.buf) - r.pos} trailing bytes after snapshot")
    if quantized:
        return QuantizedCache(cache, qsegments, group_size)
    return cache


def save_snapshot(path, cache: LayerCache | QuantizedCache) -> None:
    Path(path).write_bytes(dumps(cache))


def load_snapshot(path) -> LayerCache | QuantizedCache:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc
    return loads(data)
