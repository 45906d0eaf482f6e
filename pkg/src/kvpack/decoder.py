"""Decode-step state machine over a compressed :class:`LayerCache`.

One call to :func:`decode_step` runs a single attention block for ``T_q`` new
tokens:

1. project the inputs to queries, keys and values;
2. append the new keys and values to a segment's uncompressed tail;
3. rebuild every cached key and value, decompressing each compressed token
   at the rank of its importance tier;
4. run causal softmax attention (always accumulated in float64) and the
   output projection;
5. fold the head-averaged attention into the importance table;
6. recompress any segment whose tail has reached the compression period.

Step 3-4 exist in two forms that give the same answer: a materialized path
that builds the full key/value matrices, and a fused path that walks the
cache in tiles with an online softmax and never holds more than one tile.
:func:`reference_attention` is a plain dense implementation used as the
exactness oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from kvpack import importance as imp
from kvpack.cache import (
    HeadGeometry,
    LayerCache,
    Modality,
    ModalitySegment,
    decompress_rows,
)
from kvpack.compressor import RankScheme, compress_rows, layer_rank
from kvpack.errors import DataError, ParameterError, ShapeError
from kvpack.hybrid import DEFAULT_GROUP_SIZE, evict_low_groups, fake_quantize_block
from kvpack.linalg import FactorPair, SVDMethod, make_rng

DEFAULT_TILE_SIZE = 64

RankSetting = int | RankScheme | None


@dataclass
class AttentionWeights:
    """Projection matrices of one attention block.

    ``w_k`` and ``w_v`` map the model width onto the KV width, which is
    smaller than the model width under grouped-query attention.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def check(self, geometry: HeadGeometry) -> None:
        hd, kv = geometry.model_width, geometry.kv_width
        expected = {"w_q": (hd, hd), "w_k": (hd, kv), "w_v": (hd, kv), "w_o": (hd, hd)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{name} contains non-finite values")

    @classmethod
    def random(cls, geometry: HeadGeometry, seed: int = 0, scale: float = 1.0) -> "AttentionWeights":
        rng = make_rng(seed)
        hd, kv = geometry.model_width, geometry.kv_width
        std = scale / math.sqrt(hd)
        return cls(
            rng.standard_normal((hd, hd)) * std,
            rng.standard_normal((hd, kv)) * std,
            rng.standard_normal((hd, kv)) * std,
            rng.standard_normal((hd, hd)) * std,
        )


@dataclass
class GroupSpec:
    """Tier layout for attention-aware decompression of one matrix kind.

    ``ranks[0]`` is nominal: the top tier always uses the rank the block was
    stored at, and lower tiers are capped by it.
    """

    ratios: tuple[float, ...] = (0.25, 0.75)
    ranks: tuple[int, ...] = (64, 16)

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.ranks = tuple(int(r) for r in self.ranks)
        imp.check_groups(self.ratios, self.ranks)

    @classmethod
    def quarter(cls, rank: int, top_ratio: float = 0.25) -> "GroupSpec":
        """Two tiers: ``top_ratio`` of tokens at ``rank``, the rest at ``rank // 4``."""
        return cls((top_ratio, 1.0 - top_ratio), (rank, max(1, rank // 4)))

    def effective_ranks(self, stored_rank: int) -> tuple[int, ...]:
        return (stored_rank,) + tuple(min(r, stored_rank) for r in self.ranks[1:])


@dataclass
class DecodeConfig:
    """Every tunable of the decode loop.

    Ranks are per (modality, matrix): ``rank_kv`` is visual keys, ``rank_vt``
    textual values and so on. Each may be a fixed rank, a :class:`RankScheme`
    or ``None`` to leave that matrix uncompressed.
    """

    period: int | None = None
    rank_kv: RankSetting = 64
    rank_vv: RankSetting = 64
    rank_kt: RankSetting = None
    rank_vt: RankSetting = None
    key_groups: GroupSpec | None = None
    value_groups: GroupSpec | None = None
    alpha: float = 0.25
    svd_method: SVDMethod = "exact"
    seed: int = 0
    tiering: bool = True
    eviction: bool = False
    quantization: bool = False
    quant_group_size: int = DEFAULT_GROUP_SIZE
    fused: bool = False
    tile_size: int = DEFAULT_TILE_SIZE
    recompress_source: Literal["full", "tiered"] = "full"
    generated_modality: str = "textual"
    dtype: str = "float32"

    def __post_init__(self):
        if self.period is not None and self.period < 1:
            raise ParameterError(f"compression period must be >= 1, got {self.period}")
        if self.tile_size < 1:
            raise ParameterError(f"tile size must be >= 1, got {self.tile_size}")
        if self.recompress_source not in ("full", "tiered"):
            raise ParameterError(f"unknown recompress source {self.recompress_source!r}")
        if self.svd_method not in ("exact", "randomized"):
            raise ParameterError(f"unknown SVD method {self.svd_method!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ParameterError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.eviction and self.value_groups is None and self.key_groups is None:
            raise ParameterError("eviction needs group ratios (value_groups or key_groups)")
        Modality.parse(self.generated_modality)
        np.dtype(self.dtype)
        for kind, groups in (("k", self.key_groups), ("v", self.value_groups)):
            if groups is None:
                continue
            for modality in ("v", "t"):
                rank = getattr(self, f"rank_{kind}{modality}")
                if isinstance(rank, int) and max(groups.ranks[1:], default=0) > rank:
                    raise ParameterError(
                        f"group ranks {groups.ranks} exceed rank_{kind}{modality}={rank}"
                    )

    @classmethod
    def standard(cls, rank: int = 64, **overrides) -> "DecodeConfig":
        """Visual keys and values at ``rank``, value tiering 25% full / 75% at rank/4."""
        kwargs = dict(
            rank_kv=rank,
            rank_vv=rank,
            value_groups=GroupSpec.quarter(rank),
            alpha=0.25,
            svd_method="randomized",
            tiering=True,
        )
        kwargs.update(overrides)
        return cls(**kwargs)

    def rank_for(self, modality: Modality, kind: str) -> RankSetting:
        return getattr(self, f"rank_{kind}{'v' if modality == Modality.VISUAL else 't'}")

    def groups_for(self, kind: str) -> GroupSpec | None:
        return self.key_groups if kind == "k" else self.value_groups


@dataclass
class StepReport:
    """What one decode step did to one layer's cache."""

    step: int
    layer: int
    num_queries: int
    bytes_before: int
    bytes_after: int
    decompression_flops: int
    full_decompression_flops: int
    compressed: bool
    evicted: int
    num_compressed: int
    num_uncompressed: int
    group_positions: dict[str, list[np.ndarray]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)


@dataclass
class BlockPlan:
    """How to rebuild one matrix kind of one segment's compressed block."""

    assignment: imp.GroupAssignment | None  # None for dense blocks

    def row_groups(self, num_rows: int):
        """Yield ``(rows, rank)``; rank ``None`` means copy dense rows."""
        if self.assignment is None:
            yield np.arange(num_rows), None
            return
        for mask, rank in zip(self.assignment.masks, self.assignment.ranks):
            yield mask, rank


@dataclass
class RetrievalPlan:
    """Per-segment decompression plans, in storage order."""

    segments: list[ModalitySegment]
    plans: list[dict[str, BlockPlan]]
    flops: int
    full_flops: int
    group_positions: dict[str, list[np.ndarray]]

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for s in self.segments)


def plan_retrieval(cache: LayerCache, cfg: DecodeConfig, tiered: bool = True) -> RetrievalPlan:
    """Assign compressed tokens to tiers and count decompression work."""
    width = cache.width
    segments = cache.ordered_segments()
    plans, flops, full_flops, groups = [], 0, 0, {}
    for seg in segments:
        seg_plan = {}
        n = seg.num_compressed
        for kind, block in (("k", seg.block_k), ("v", seg.block_v)):
            if n == 0 or not isinstance(block, FactorPair):
                seg_plan[kind] = BlockPlan(None)
                continue
            spec = cfg.groups_for(kind) if (tiered and cfg.tiering) else None
            if spec is None:
                ratios, ranks = (1.0,), (block.rank,)
            else:
                ratios, ranks = spec.ratios, spec.effective_ranks(block.rank)
            scores = cache.importance.lookup(seg.block_positions)
            assignment = imp.assign_groups(scores, ratios, ranks, seg.block_positions)
            seg_plan[kind] = BlockPlan(assignment)
            flops += imp.decompression_flops(assignment.sizes, width, assignment.ranks)
            full_flops += 2 * n * width * block.rank
            key = f"{seg.modality.name.lower()}.{'key' if kind == 'k' else 'value'}"
            groups[key] = [seg.block_positions[m] for m in assignment.masks]
        plans.append(seg_plan)
    return RetrievalPlan(segments, plans, flops, full_flops, groups)


def _segment_rows(seg: ModalitySegment, plan: dict[str, BlockPlan], kind: str, lo: int, hi: int):
    """Rebuild local rows ``[lo, hi)`` of one segment in its stored dtype."""
    out = np.empty((hi - lo, seg.width), dtype=seg.dtype)
    n_cc = seg.num_compressed
    block = seg.block_k if kind == "k" else seg.block_v
    if lo < n_cc:
        for rows, rank in plan[kind].row_groups(n_cc):
            sel = rows[(rows >= lo) & (rows < hi)]
            if len(sel):
                out[sel - lo] = decompress_rows(block, sel, rank)
    if hi > n_cc:
        tail = seg.tail_k if kind == "k" else seg.tail_v
        start = max(lo, n_cc)
        out[start - lo :] = tail[start - n_cc : hi - n_cc]
    return out


def _gather(plan: RetrievalPlan, kind: str, lo: int, hi: int) -> np.ndarray:
    """Rows ``[lo, hi)`` of the storage-order key or value matrix."""
    parts, offset = [], 0
    for seg, seg_plan in zip(plan.segments, plan.plans):
        n = len(seg)
        a, b = max(lo, offset), min(hi, offset + n)
        if a < b:
            parts.append(_segment_rows(seg, seg_plan, kind, a - offset, b - offset))
        offset += n
    return np.concatenate(parts) if len(parts) > 1 else parts[0]


def materialize(plan: RetrievalPlan) -> tuple[np.ndarray, np.ndarray]:
    """Full rebuilt key and value matrices in storage order."""
    n = plan.num_tokens
    return _gather(plan, "k", 0, n), _gather(plan, "v", 0, n)


def _split_queries(q: np.ndarray, geometry: HeadGeometry) -> np.ndarray:
    """``(T_q, H*D)`` -> ``(H_kv, g*T_q, D)`` with rows ordered (group member, query)."""
    t_q = q.shape[0]
    g, d = geometry.group_size, geometry.head_dim
    q = q.reshape(t_q, geometry.num_kv_heads, g, d).transpose(1, 2, 0, 3)
    return q.reshape(geometry.num_kv_heads, g * t_q, d)


def _merge_heads(x: np.ndarray, geometry: HeadGeometry, t_q: int) -> np.ndarray:
    g, d = geometry.group_size, geometry.head_dim
    x = x.reshape(geometry.num_kv_heads, g, t_q, d).transpose(2, 0, 1, 3)
    return x.reshape(t_q, geometry.model_width)


def _kv_heads(rows: np.ndarray, geometry: HeadGeometry) -> np.ndarray:
    """``(T, H_kv*D)`` -> ``(H_kv, T, D)`` in float64."""
    t = rows.shape[0]
    return rows.astype(np.float64).reshape(t, geometry.num_kv_heads, geometry.head_dim).transpose(1, 0, 2)


def _tile_logits(qh, k_rows, tile_positions, query_positions, geometry):
    logits = qh @ _kv_heads(k_rows, geometry).transpose(0, 2, 1) / math.sqrt(geometry.head_dim)
    future = tile_positions[None, :] > query_positions[:, None]  # (T_q, tile)
    if future.any():
        mask = np.tile(future, (geometry.group_size, 1))  # rows ordered (member, query)
        logits = np.where(mask[None], -np.inf, logits)
    return logits


def _head_average(weights: np.ndarray, geometry: HeadGeometry, t_q: int) -> np.ndarray:
    t = weights.shape[-1]
    return weights.reshape(geometry.num_query_heads, t_q, t).mean(axis=0)


def materialized_attention(
    q: np.ndarray,
    k_rows: np.ndarray,
    v_rows: np.ndarray,
    positions: np.ndarray,
    query_positions: np.ndarray,
    geometry: HeadGeometry,
) -> tuple[np.ndarray, np.ndarray]:
    """Causal multi-head attention over fully rebuilt keys and values.

    Returns:
        ``(heads_out, attn)``: the concatenated head outputs ``(T_q, H*D)``
        before the output projection, and head-averaged weights ``(T_q, T)``.
    """
    t_q = q.shape[0]
    qh = _split_queries(q.astype(np.float64), geometry)
    logits = _tile_logits(qh, k_rows, positions, query_positions, geometry)
    m = logits.max(axis=-1, keepdims=True)
    p = np.exp(logits - m)
    total = p.sum(axis=-1, keepdims=True)
    out = (p @ _kv_heads(v_rows, geometry)) / total
    return _merge_heads(out, geometry, t_q), _head_average(p / total, geometry, t_q)


def fused_decode_attention(
    q: np.ndarray,
    plan: RetrievalPlan,
    query_positions: np.ndarray,
    geometry: HeadGeometry,
    tile_size: int = DEFAULT_TILE_SIZE,
) -> tuple[np.ndarray, np.ndarray]:
    """Tiled attention that decompresses each tile on the fly.

    Keys and values are rebuilt ``tile_size`` tokens at a time, each at its
    tier's rank, and folded into a running max / normaliser / accumulator.
    Per-tile logits are kept so the head-averaged attention row can still be
    produced for the importance update. Tiles are reduced in order, so the
    result is deterministic.
    """
    if tile_size < 1:
        raise ParameterError(f"tile size must be >= 1, got {tile_size}")
    t_q = q.shape[0]
    qh = _split_queries(q.astype(np.float64), geometry)
    positions = np.concatenate([s.positions for s in plan.segments])
    n = len(positions)
    rows_per_kv = qh.shape[1]
    running_max = np.full((geometry.num_kv_heads, rows_per_kv, 1), -np.inf)
    running_sum = np.zeros((geometry.num_kv_heads, rows_per_kv, 1))
    acc = np.zeros((geometry.num_kv_heads, rows_per_kv, geometry.head_dim))
    tile_logits = []
    for lo in range(0, n, tile_size):
        hi = min(lo + tile_size, n)
        k_tile = _gather(plan, "k", lo, hi)
        v_tile = _gather(plan, "v", lo, hi)
        logits = _tile_logits(qh, k_tile, positions[lo:hi], query_positions, geometry)
        tile_logits.append(logits)
        new_max = np.maximum(running_max, logits.max(axis=-1, keepdims=True))
        safe_max = np.where(np.isfinite(new_max), new_max, 0.0)
        correction = np.exp(running_max - safe_max)
        p = np.exp(logits - safe_max)
        running_sum = running_sum * correction + p.sum(axis=-1, keepdims=True)
        acc = acc * correction + p @ _kv_heads(v_tile, geometry)
        running_max = new_max
    out = acc / running_sum
    logits = np.concatenate(tile_logits, axis=-1)
    weights = np.exp(logits - running_max) / running_sum
    return _merge_heads(out, geometry, t_q), _head_average(weights, geometry, t_q)


def reference_attention(
    h,
    past_k,
    past_v,
    weights: AttentionWeights,
    geometry: HeadGeometry,
    keep=None,
) -> np.ndarray:
    """Dense causal multi-head attention, computed head by head in float64.

    ``past_k``/``past_v`` hold every earlier token uncompressed; the new
    tokens' keys and values are projected from ``h`` and appended, and new
    token ``i`` attends to all past tokens and new tokens ``0..i``. Each KV
    head serves ``H / H_kv`` consecutive query heads. ``keep`` optionally
    masks out past tokens (False = excluded).
    """
    h = np.asarray(h, dtype=np.float64)
    weights.check(geometry)
    past_k = np.asarray(past_k, dtype=np.float64).reshape(-1, geometry.kv_width)
    past_v = np.asarray(past_v, dtype=np.float64).reshape(-1, geometry.kv_width)
    if past_k.shape != past_v.shape:
        raise ShapeError("past keys and values differ in shape")
    t_q, t_past = h.shape[0], past_k.shape[0]
    d = geometry.head_dim
    q = h @ weights.w_q
    k = np.concatenate([past_k, h @ weights.w_k])
    v = np.concatenate([past_v, h @ weights.w_v])
    allowed = np.ones((t_q, t_past + t_q), dtype=bool)
    allowed[:, t_past:] = np.tril(np.ones((t_q, t_q), dtype=bool))
    if keep is not None:
        allowed[:, :t_past] &= np.asarray(keep, dtype=bool)[None, :]
    out = np.empty((t_q, geometry.model_width))
    for head in range(geometry.num_query_heads):
        kv = head // geometry.group_size
        qs = q[:, head * d : (head + 1) * d]
        ks = k[:, kv * d : (kv + 1) * d]
        vs = v[:, kv * d : (kv + 1) * d]
        logits = np.where(allowed, qs @ ks.T / math.sqrt(d), -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        a = np.exp(logits)
        a /= a.sum(axis=1, keepdims=True)
        out[:, head * d : (head + 1) * d] = a @ vs
    return out @ weights.w_o


def _resolve_rank(setting: RankSetting, cache: LayerCache, rows: np.ndarray) -> int | None:
    if setting is None:
        return None
    return layer_rank(setting, cache.layer_index, rows)


def compress_segment_now(
    cache: LayerCache,
    seg: ModalitySegment,
    cfg: DecodeConfig,
    k_rows: np.ndarray | None = None,
    v_rows: np.ndarray | None = None,
) -> list[str]:
    """Refactorize a whole segment (block plus tail) at the configured ranks.

    Without explicit rows, the block is rebuilt at its full stored rank.
    """
    if k_rows is None:
        k_rows, v_rows = seg.dense()
    positions = seg.positions
    rank_k = _resolve_rank(cfg.rank_for(seg.modality, "k"), cache, k_rows)
    rank_v = _resolve_rank(cfg.rank_for(seg.modality, "v"), cache, v_rows)
    seed = cfg.seed + 1000 * cache.layer_index + 10 * int(seg.modality)
    notes = compress_rows(seg, k_rows, v_rows, positions, rank_k, rank_v, cfg.svd_method, seed)
    if cfg.quantization:
        seg.block_k = fake_quantize_block(seg.block_k, cfg.quant_group_size)
        seg.block_v = fake_quantize_block(seg.block_v, cfg.quant_group_size)
    return notes


def is_compressible(seg: ModalitySegment, cfg: DecodeConfig) -> bool:
    return (
        cfg.rank_for(seg.modality, "k") is not None
        or cfg.rank_for(seg.modality, "v") is not None
    )


def prefill_compress(cache: LayerCache, cfg: DecodeConfig) -> list[str]:
    """Compress every configured segment once, as done right after prefill."""
    notes = []
    for seg in cache.ordered_segments():
        if len(seg) and is_compressible(seg, cfg):
            notes += compress_segment_now(cache, seg, cfg)
    return notes


def _evict(cache: LayerCache, seg: ModalitySegment, cfg: DecodeConfig) -> int:
    spec = cfg.value_groups or cfg.key_groups
    if seg.num_compressed == 0 or len(spec.ratios) <= 1:
        return 0
    scores = cache.importance.lookup(seg.block_positions)
    ranks = (1,) * len(spec.ratios)
    assignment = imp.assign_groups(scores, spec.ratios, ranks, seg.block_positions)
    return len(evict_low_groups(cache, seg.modality, assignment))


def decode_step(
    h,
    cache: LayerCache,
    weights: AttentionWeights,
    cfg: DecodeConfig,
    step: int = 0,
    modality=None,
) -> tuple[np.ndarray, StepReport]:
    """Run one attention block for ``T_q`` new tokens, updating ``cache`` in place.

    Args:
        h: ``(T_q, H*D)`` input activations.
        cache: the layer's cache; new tokens join ``modality`` (default
            ``cfg.generated_modality``).
        weights: projections for this layer.
        cfg: decode configuration.
        step: step index, used in error messages and the report.

    Returns:
        ``(output, report)`` where output is ``(T_q, H*D)`` in the cache dtype.
    """
    geometry = cache.geometry
    weights.check(geometry)
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape[1] != geometry.model_width:
        raise ShapeError(f"step {step}: input width {h.shape[1]} != {geometry.model_width}")
    if not np.all(np.isfinite(h)):
        raise DataError(f"step {step}: input activations contain non-finite values")
    modality = Modality.parse(modality if modality is not None else cfg.generated_modality)
    t_q = h.shape[0]
    bytes_before = cache.memory_bytes().total

    q = h @ weights.w_q
    query_positions = cache.append(modality, h @ weights.w_k, h @ weights.w_v)

    plan = plan_retrieval(cache, cfg)
    positions = cache.positions()
    if cfg.fused:
        heads, attn = fused_decode_attention(q, plan, query_positions, geometry, cfg.tile_size)
    else:
        k_rows, v_rows = materialize(plan)
        heads, attn = materialized_attention(q, k_rows, v_rows, positions, query_positions, geometry)
    output = heads @ weights.w_o
    if not np.all(np.isfinite(output)):
        raise DataError(f"step {step}: attention output contains non-finite values")
    imp.update(cache.importance, attn, t_q, positions)

    compressed, evicted, notes = False, 0, []
    period = cfg.period
    for seg in cache.ordered_segments():
        if period is None or seg.num_uncompressed < period or not is_compressible(seg, cfg):
            continue
        compressed = True
        if cfg.eviction:
            evicted += _evict(cache, seg, cfg)
        if cfg.recompress_source == "tiered" and not cfg.eviction:
            seg_plan = next(p for s, p in zip(plan.segments, plan.plans) if s is seg)
            n = len(seg)
            k_src = _segment_rows(seg, seg_plan, "k", 0, n)
            v_src = _segment_rows(seg, seg_plan, "v", 0, n)
            notes += compress_segment_now(cache, seg, cfg, k_src, v_src)
        else:
            notes += compress_segment_now(cache, seg, cfg)

    report = StepReport(
        step=step,
        layer=cache.layer_index,
        num_queries=t_q,
        bytes_before=bytes_before,
        bytes_after=cache.memory_bytes().total,
        decompression_flops=plan.flops,
        full_decompression_flops=plan.full_flops,
        compressed=compressed,
        evicted=evicted,
        num_compressed=cache.num_compressed,
        num_uncompressed=cache.num_uncompressed,
        group_positions=plan.group_positions,
        notes=notes,
    )
    return output.astype(cache.dtype), report
