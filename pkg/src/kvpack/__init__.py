"""Low-rank compressed key-value cache with attention-aware tiered decompression."""

from kvpack.cache import HeadGeometry, LayerCache, Modality, compression_ratio
from kvpack.compressor import RankScheme, compress_segment, layer_rank
from kvpack.decoder import (
    AttentionWeights,
    DecodeConfig,
    GroupSpec,
    StepReport,
    decode_step,
    fused_decode_attention,
    reference_attention,
)
from kvpack.errors import (
    ConfigError,
    DataError,
    KVPackError,
    ParameterError,
    ShapeError,
    SnapshotError,
)
from kvpack.harness import RankProfile, RunReport, WorkloadSpec, generate_workload, run_experiment
from kvpack.hybrid import dequantize, evict_low_groups, quantize, quantize_cache
from kvpack.importance import ImportanceTable, assign_groups, flops_partial_decompress, update
from kvpack.linalg import FactorPair, explained_variance_ratio, rank_for_variance, truncated_svd
from kvpack.report import emit_report, read_report
from kvpack.snapshot import load_snapshot, save_snapshot

__version__ = "0.1.0"

__all__ = [
    "AttentionWeights",
    "ConfigError",
    "DataError",
    "DecodeConfig",
    "FactorPair",
    "GroupSpec",
    "HeadGeometry",
    "ImportanceTable",
    "KVPackError",
    "LayerCache",
    "Modality",
    "ParameterError",
    "RankProfile",
    "RankScheme",
    "RunReport",
    "ShapeError",
    "SnapshotError",
    "StepReport",
    "WorkloadSpec",
    "assign_groups",
    "compress_segment",
    "compression_ratio",
    "decode_step",
    "dequantize",
    "emit_report",
    "evict_low_groups",
    "explained_variance_ratio",
    "flops_partial_decompress",
    "fused_decode_attention",
    "generate_workload",
    "layer_rank",
    "load_snapshot",
    "quantize",
    "quantize_cache",
    "rank_for_variance",
    "read_report",
    "reference_attention",
    "run_experiment",
    "save_snapshot",
    "truncated_svd",
    "update",
]
