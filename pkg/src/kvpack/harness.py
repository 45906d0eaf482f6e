"""Synthetic workloads and multi-step decode experiments.

Visual keys and values come from a latent factor model, so their intrinsic
rank is known exactly. Every decode step of an experiment is checked against
a dense float64 reference that sees the full uncompressed history.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from kvpack.cache import HeadGeometry, LayerCache, Modality, compression_ratio
from kvpack.decoder import (
    AttentionWeights,
    DecodeConfig,
    decode_step,
    prefill_compress,
    reference_attention,
)
from kvpack.errors import KVPackError, ParameterError
from kvpack.linalg import FactorPair, make_rng

log = logging.getLogger(__name__)

THREADS_ENV = "KVPACK_THREADS"

STEP_FIELDS = (
    "instance",
    "turn",
    "step",
    "num_tokens",
    "num_compressed",
    "num_uncompressed",
    "bytes_before",
    "bytes_after",
    "decompression_flops",
    "full_decompression_flops",
    "compressed_layers",
    "evicted",
    "output_error",
)


@dataclass
class RankProfile:
    """Latent structure of one modality's keys and values.

    ``rank`` latent directions with scales ``decay**i``; the first
    ``shared_dim`` of them load on every KV head, the rest on one head each.
    ``noise`` is the std of i.i.d. Gaussian noise added on top.
    """

    rank: int = 8
    decay: float = 1.0
    shared_dim: int | None = None
    noise: float = 0.0
    scale: float = 1.0

    def check(self, width: int) -> None:
        if not 1 <= self.rank <= width:
            raise ParameterError(f"true rank {self.rank} outside [1, {width}]")
        if not 0.0 < self.decay <= 1.0:
            raise ParameterError(f"decay must be in (0, 1], got {self.decay}")
        if self.shared_dim is not None and not 0 <= self.shared_dim <= self.rank:
            raise ParameterError("shared_dim must lie in [0, rank]")
        if self.noise < 0:
            raise ParameterError("noise must be non-negative")


@dataclass
class WorkloadSpec:
    num_heads: int = 4
    num_kv_heads: int = 4
    head_dim: int = 16
    num_layers: int = 1
    visual_tokens: int = 256
    text_tokens: int = 16
    visual: RankProfile = field(default_factory=lambda: RankProfile(rank=8))
    text: RankProfile = field(default_factory=lambda: RankProfile(rank=32, noise=0.05))
    decode_steps: int = 10
    batch: int = 1
    turns: int = 1
    carry_importance: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.num_layers, self.batch, self.turns) < 1:
            raise ParameterError("layers, batch and turns must be >= 1")
        if min(self.visual_tokens, self.text_tokens, self.decode_steps) < 0:
            raise ParameterError("token and step counts must be >= 0")
        width = self.geometry.kv_width
        self.visual.check(width)
        self.text.check(width)

    @property
    def geometry(self) -> HeadGeometry:
        return HeadGeometry(self.num_heads, self.num_kv_heads, self.head_dim)


def factor_model(
    rng: np.random.Generator, num_tokens: int, geometry: HeadGeometry, profile: RankProfile
) -> np.ndarray:
    """``(num_tokens, H_kv*D)`` rows of intrinsic rank ``profile.rank`` plus noise."""
    h_kv, d = geometry.num_kv_heads, geometry.head_dim
    r = profile.rank
    shared = r if profile.shared_dim is None else profile.shared_dim
    latent = rng.standard_normal((num_tokens, r)) * profile.decay ** np.arange(r)
    loading = np.zeros((r, h_kv * d))
    loading[:shared] = rng.standard_normal((shared, h_kv * d))
    for j in range(shared, r):
        head = (j - shared) % h_kv
        loading[j, head * d : (head + 1) * d] = rng.standard_normal(d)
    rows = latent @ loading * (profile.scale / np.sqrt(r))
    if profile.noise:
        rows += profile.noise * rng.standard_normal(rows.shape)
    return rows


@dataclass
class Workload:
    spec: WorkloadSpec
    weights: list[AttentionWeights]
    # prefill[instance][layer][modality] = (keys, values)
    prefill: list[list[dict[Modality, tuple[np.ndarray, np.ndarray]]]]
    # queries[instance] has shape (turns, decode_steps, H*D)
    queries: list[np.ndarray]


def generate_workload(spec: WorkloadSpec) -> Workload:
    """Draw prefill caches, per-layer weights and the decode query stream."""
    geo = spec.geometry
    weights = [AttentionWeights.random(geo, seed=spec.seed * 7919 + l) for l in range(spec.num_layers)]
    prefill, queries = [], []
    for i in range(spec.batch):
        layers = []
        for l in range(spec.num_layers):
            rng = make_rng(spec.seed, i, l)
            segs = {}
            if spec.visual_tokens:
                segs[Modality.VISUAL] = (
                    factor_model(rng, spec.visual_tokens, geo, spec.visual),
                    factor_model(rng, spec.visual_tokens, geo, spec.visual),
                )
            if spec.text_tokens:
                segs[Modality.TEXTUAL] = (
                    factor_model(rng, spec.text_tokens, geo, spec.text),
                    factor_model(rng, spec.text_tokens, geo, spec.text),
                )
            layers.append(segs)
        prefill.append(layers)
        rng = make_rng(spec.seed, i, 1_000_003)
        queries.append(rng.standard_normal((spec.turns, spec.decode_steps, geo.model_width)))
    return Workload(spec, weights, prefill, queries)


@dataclass
class RunReport:
    """Step records (one per instance and decode step) plus run aggregates."""

    steps: list[dict[str, Any]]
    aggregate: dict[str, Any]
    config: dict[str, Any] = field(default_factory=dict)


def segment_ratios(cache: LayerCache) -> list[dict[str, Any]]:
    """Closed-form compression ratio of every factored block in a cache."""
    out = []
    for seg in cache.ordered_segments():
        for kind, block in (("key", seg.block_k), ("value", seg.block_v)):
            if not isinstance(block, FactorPair):
                continue
            t, w, r = block.rows, block.cols, block.rank
            out.append(
                {
                    "layer": cache.layer_index,
                    "modality": seg.modality.name.lower(),
                    "kind": kind,
                    "tokens": t,
                    "width": w,
                    "rank": r,
                    "ratio": compression_ratio(t, w, r),
                }
            )
    return out


def _build_caches(workload: Workload, instance: int, cfg: DecodeConfig) -> list[LayerCache]:
    caches = []
    for l, segs in enumerate(workload.prefill[instance]):
        cache = LayerCache(workload.spec.geometry, dtype=cfg.dtype, alpha=cfg.alpha, layer_index=l)
        for modality in sorted(segs):
            cache.append(modality, *segs[modality])
        caches.append(cache)
    return caches


def _with_context(exc: KVPackError, context: str) -> KVPackError:
    new = type(exc)(f"{context}: {exc}")
    new.__cause__ = exc
    return new


@dataclass
class _InstanceResult:
    steps: list[dict[str, Any]]
    caches: list[LayerCache]
    prefill_ratios: list[dict[str, Any]]
    scores: list[tuple]


def _run_instance(
    workload: Workload, instance: int, cfg: DecodeConfig, dump_scores: bool
) -> _InstanceResult:
    spec = workload.spec
    geo = spec.geometry
    caches = _build_caches(workload, instance, cfg)
    for cache in caches:
        try:
            prefill_compress(cache, cfg)
        except KVPackError as exc:
            raise _with_context(exc, f"instance {instance}, layer {cache.layer_index}, prefill") from exc
    prefill_ratios = [r for c in caches for r in segment_ratios(c)]

    history = []
    for segs in workload.prefill[instance]:
        ks = [segs[m][0] for m in sorted(segs)]
        vs = [segs[m][1] for m in sorted(segs)]
        empty = np.zeros((0, geo.kv_width))
        history.append([np.concatenate(ks) if ks else empty, np.concatenate(vs) if vs else empty])

    steps, scores = [], []
    for turn in range(spec.turns):
        if turn and not spec.carry_importance:
            for cache in caches:
                cache.importance.reset()
        for step in range(spec.decode_steps):
            h = workload.queries[instance][turn, step][None, :]
            h_ref = h
            record = dict.fromkeys(STEP_FIELDS, 0)
            record.update(instance=instance, turn=turn, step=step, output_error=0.0)
            for l, cache in enumerate(caches):
                w = workload.weights[l]
                try:
                    out, rep = decode_step(h, cache, w, cfg, step=step)
                    ref = reference_attention(h_ref, history[l][0], history[l][1], w, geo)
                except KVPackError as exc:
                    raise _with_context(exc, f"instance {instance}, layer {l}, step {step}") from exc
                history[l][0] = np.concatenate([history[l][0], h_ref @ w.w_k])
                history[l][1] = np.concatenate([history[l][1], h_ref @ w.w_v])
                err = float(np.max(np.abs(out.astype(np.float64) - ref)))
                record["output_error"] = max(record["output_error"], err)
                record["bytes_before"] += rep.bytes_before
                record["bytes_after"] += rep.bytes_after
                record["decompression_flops"] += rep.decompression_flops
                record["full_decompression_flops"] += rep.full_decompression_flops
                record["compressed_layers"] += int(rep.compressed)
                record["evicted"] += rep.evicted
                record["num_compressed"] += rep.num_compressed
                record["num_uncompressed"] += rep.num_uncompressed
                record["num_tokens"] += len(cache)
                if dump_scores:
                    t = cache.importance
                    scores += [
                        (instance, turn, step, l, int(p), float(s))
                        for p, s in zip(t.positions, t.scores)
                    ]
                h, h_ref = out, ref
            steps.append(record)
    return _InstanceResult(steps, caches, prefill_ratios, scores)


def worker_count(jobs: int) -> int:
    limit = os.environ.get(THREADS_ENV)
    cap = int(limit) if limit else (os.cpu_count() or 1)
    return max(1, min(jobs, cap))


def run_experiment(
    spec: WorkloadSpec,
    cfg: DecodeConfig,
    workload: Workload | None = None,
    score_path=None,
    config_echo: dict | None = None,
) -> RunReport:
    """Prefill, compress and decode every batch instance, checking each step.

    Instances run on a thread pool capped by ``KVPACK_THREADS``; results are
    merged in instance order, so reports are identical for any worker count.

    Args:
        spec: workload shape.
        cfg: decode configuration; ``cfg.dtype`` sets the cache precision.
        workload: pre-generated workload, generated from ``spec`` if omitted.
        score_path: if given, importance scores after every step and layer
            are written there as CSV
            (``instance,turn,step,layer,position,score``).
        config_echo: mapping stored verbatim in the report.
    """
    workload = workload or generate_workload(spec)
    with ThreadPoolExecutor(max_workers=worker_count(spec.batch)) as pool:
        futures = [
            pool.submit(_run_instance, workload, i, cfg, score_path is not None)
            for i in range(spec.batch)
        ]
        results = [f.result() for f in futures]

    steps = [s for r in results for s in r.steps]
    if score_path is not None:
        with open(score_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance", "turn", "step", "layer", "position", "score"])
            for r in results:
                for inst, turn, step, layer, pos, score in r.scores:
                    writer.writerow([inst, turn, step, layer, pos, format(score, ".17g")])
    return RunReport(steps, aggregate(steps, results), config_echo or {})


def aggregate(steps: list[dict], results: list[_InstanceResult]) -> dict[str, Any]:
    errors = [s["output_error"] for s in steps]
    flops = sum(s["decompression_flops"] for s in steps)
    full = sum(s["full_decompression_flops"] for s in steps)
    caches = [c for r in results for c in r.caches]
    total_bytes = sum(c.memory_bytes().total for c in caches)
    dense_bytes = sum(c.dense_bytes() for c in caches)
    return {
        "num_steps": len(steps),
        "num_instances": len(results),
        "mean_output_error": float(np.mean(errors)) if errors else 0.0,
        "max_output_error": float(np.max(errors)) if errors else 0.0,
        "total_bytes": total_bytes,
        "dense_bytes": dense_bytes,
        "effective_ratio": dense_bytes / total_bytes if total_bytes else 1.0,
        "total_decompression_flops": flops,
        "full_decompression_flops": full,
        "flops_reduction": 1.0 - flops / full if full else 0.0,
        "prefill_ratios": results[0].prefill_ratios if results else [],
        "final_ratios": [r for c in results[0].caches for r in segment_ratios(c)] if results else [],
    }


def run_sweep(
    spec: WorkloadSpec, cfg: DecodeConfig, param: str, values, config_echo=None
) -> list[tuple[Any, RunReport]]:
    """Run one experiment per value of a :class:`DecodeConfig` field.

    ``param="rank"`` sets the visual key and value ranks together and scales
    any tier ranks by the same factor.
    """
    workload = generate_workload(spec)
    out = []
    for value in values:
        if param == "rank":
            changes = {"rank_kv": value, "rank_vv": value}
            for name in ("key_groups", "value_groups"):
                groups = getattr(cfg, name)
                if groups is not None:
                    top = groups.ranks[0]
                    ranks = tuple(max(1, int(np.floor(r * value / top + 0.5))) for r in groups.ranks)
                    changes[name] = replace(groups, ranks=ranks)
        else:
            if param not in DecodeConfig.__dataclass_fields__:
                raise ParameterError(f"unknown sweep parameter {param!r}")
            changes = {param: value}
        run_cfg = replace(cfg, **changes)
        echo = dict(config_echo or {}, sweep={"param": param, "value": value})
        out.append((value, run_experiment(spec, run_cfg, workload, config_echo=echo)))
    return out
