"""Command-line entry point: ``kvpack <command> ...``.

Exit status is 0 on success, 2 for configuration or argument errors and 3
for data errors (bad snapshots, non-finite values, shape mismatches).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from kvpack.cache import LayerCache, Modality
from kvpack.compressor import compress_whole_segment, variance_by_head
from kvpack.config import config_to_dict, load_config
from kvpack.errors import ConfigError, KVPackError, ParameterError
from kvpack.harness import run_experiment, run_sweep, segment_ratios
from kvpack.hybrid import QuantizedCache
from kvpack.report import emit_report, format_float
from kvpack.snapshot import load_snapshot, save_snapshot

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

RANK_KEYS = {"kv": ("visual", "k"), "vv": ("visual", "v"), "kt": ("textual", "k"), "vt": ("textual", "v")}


def _dense_cache(path) -> LayerCache:
    cache = load_snapshot(path)
    return cache.dequantize() if isinstance(cache, QuantizedCache) else cache


def cmd_simulate(args) -> int:
    spec, cfg = load_config(args.config)
    echo = config_to_dict(spec, cfg)
    report = run_experiment(spec, cfg, score_path=args.scores, config_echo=echo)
    emit_report(report, args.out, args.format)
    agg = report.aggregate
    print(
        f"{agg['num_steps']} steps, mean error {agg['mean_output_error']:.3e}, "
        f"effective ratio {agg['effective_ratio']:.3f}, "
        f"FLOPs reduction {100 * agg['flops_reduction']:.2f}%"
    )
    if args.save_snapshots:
        from kvpack.decoder import prefill_compress
        from kvpack.harness import _build_caches, generate_workload

        out_dir = Path(args.save_snapshots)
        out_dir.mkdir(parents=True, exist_ok=True)
        for cache in _build_caches(generate_workload(spec), 0, cfg):
            prefill_compress(cache, cfg)
            save_snapshot(out_dir / f"layer{cache.layer_index:03d}.kvpk", cache)
    return EXIT_OK


def cmd_analyze_variance(args) -> int:
    cache = _dense_cache(args.snapshot)
    heads = cache.geometry.num_kv_heads
    writer = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    writer.writerow(["modality", "matrix", "rank", "combined", "per_head"])
    for seg in cache.ordered_segments():
        if len(seg) == 0:
            continue
        k, v = seg.dense()
        for name, m in (("key", k), ("value", v)):
            curves = variance_by_head(m.astype(np.float64), heads, args.max_rank)
            for r in range(args.max_rank):
                writer.writerow(
                    [
                        seg.modality.name.lower(),
                        name,
                        r + 1,
                        format(curves["combined"][r], ".6f"),
                        format(curves["per_head"][r], ".6f"),
                    ]
                )
    return EXIT_OK


def parse_ranks(text: str) -> dict[tuple[str, str], int | None]:
    """``"kv=64,vv=32,kt=none"`` -> ``{("visual", "k"): 64, ...}``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = part.partition("=")
        if not sep or key not in RANK_KEYS:
            raise ParameterError(f"bad rank entry {part!r}; use kv/vv/kt/vt=<rank|none>")
        if value.lower() in ("none", "dense", "0"):
            out[RANK_KEYS[key]] = None
        else:
            try:
                out[RANK_KEYS[key]] = int(value)
            except ValueError:
                raise ParameterError(f"bad rank value in {part!r}") from None
    return out


def cmd_compress(args) -> int:
    cache = _dense_cache(args.snapshot)
    ranks = parse_ranks(args.ranks)
    for seg in cache.ordered_segments():
        name = seg.modality.name.lower()
        if (name, "k") not in ranks and (name, "v") not in ranks:
            continue
        for note in compress_whole_segment(
            seg, ranks.get((name, "k")), ranks.get((name, "v")), args.method, args.seed
        ):
            logging.warning(note)
    save_snapshot(args.out, cache)
    return EXIT_OK


def cmd_inspect(args) -> int:
    raw = load_snapshot(args.snapshot)
    quantized = isinstance(raw, QuantizedCache)
    cache = raw.dequantize() if quantized else raw
    geo = cache.geometry
    mem = cache.memory_bytes()
    print(f"geometry: H={geo.num_query_heads} H_kv={geo.num_kv_heads} D={geo.head_dim}")
    print(f"dtype: {cache.dtype}  layer: {cache.layer_index}  tokens: {len(cache)}")
    print(f"payload: {'4-bit quantized' if quantized else 'dense'}")
    for seg in cache.ordered_segments():
        print(
            f"  {seg.modality.name.lower():8s} T_cc={seg.num_compressed} T_uc={seg.num_uncompressed} "
            f"R_k={seg.rank_k} R_v={seg.rank_v} bytes={mem.segments[seg.modality]}"
        )
    for r in segment_ratios(cache):
        print(f"  ratio {r['modality']}.{r['kind']}: {r['ratio']:.4f}")
    total = raw.memory_bytes() if quantized else mem.total
    print(f"total bytes: {total} (dense equivalent {cache.dense_bytes()})")
    print(f"importance table: {len(cache.importance)} entries, alpha={cache.importance.alpha}")
    return EXIT_OK


def parse_param(text: str) -> tuple[str, list]:
    name, sep, values = text.partition("=")
    if not sep or not values:
        raise ConfigError(f"--param must look like name=v1,v2,..., got {text!r}")
    return name.strip(), [yaml.safe_load(v) for v in values.split(",")]


def cmd_sweep(args) -> int:
    spec, cfg = load_config(args.config)
    param, values = parse_param(args.param)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        results = run_sweep(spec, cfg, param, values, config_to_dict(spec, cfg))
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc
    suffix = "jsonl" if args.format == "json-lines" else "csv"
    rows = []
    for value, report in results:
        emit_report(report, out_dir / f"{param}={value}.{suffix}", args.format)
        agg = report.aggregate
        rows.append(
            [
                value,
                format_float(agg["mean_output_error"]),
                format_float(agg["max_output_error"]),
                agg["total_bytes"],
                format_float(agg["effective_ratio"]),
                format_float(agg["flops_reduction"]),
            ]
        )
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [param, "mean_output_error", "max_output_error", "total_bytes", "effective_ratio", "flops_reduction"]
        )
        writer.writerows(rows)
    for row in rows:
        print("\t".join(str(c) for c in row))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvpack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a synthetic decode experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["json-lines", "csv"], default="json-lines")
    p.add_argument("--scores", help="write per-step importance scores to this CSV")
    p.add_argument("--save-snapshots", metavar="DIR", help="write prefill-compressed caches of instance 0")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze-variance", help="explained variance, combined vs per-head")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--max-rank", type=int, required=True)
    p.set_defaults(func=cmd_analyze_variance)

    p = sub.add_parser("compress", help="recompress a snapshot at new ranks")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--ranks", required=True, help="e.g. kv=64,vv=64,kt=none")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["exact", "randomized"], default="exact")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("inspect", help="summarize a snapshot")
    p.add_argument("--snapshot", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep", help="run one experiment per parameter value")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, help="e.g. rank=8,16,32,64")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["json-lines", "csv"], default="json-lines")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"kvpack: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KVPackError as exc:
        print(f"kvpack: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
