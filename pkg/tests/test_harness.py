import csv

import numpy as np
import pytest

from kvpack.cache import Modality, compression_ratio
from kvpack.compressor import compress_per_head, compress_segment, per_head_error
from kvpack.decoder import AttentionWeights, DecodeConfig, GroupSpec
from kvpack.errors import DataError, ParameterError
from kvpack.harness import (
    RankProfile,
    WorkloadSpec,
    generate_workload,
    run_experiment,
    run_sweep,
    worker_count,
)
from kvpack.linalg import explained_variance_ratio
from kvpack.report import render

SMALL = dict(num_heads=4, num_kv_heads=4, head_dim=16, visual_tokens=128, text_tokens=8, decode_steps=5)


def test_noise_free_factor_model_has_exact_rank():
    spec = WorkloadSpec(visual=RankProfile(rank=8, noise=0.0), **SMALL)
    k, v = generate_workload(spec).prefill[0][0][Modality.VISUAL]
    assert abs(explained_variance_ratio(k, 8) - 1.0) < 1e-9
    assert explained_variance_ratio(k, 7) < 1.0 - 1e-6


def test_workload_deterministic():
    spec = WorkloadSpec(batch=2, num_layers=2, **SMALL)
    a, b = generate_workload(spec), generate_workload(spec)
    for ia, ib in zip(a.prefill, b.prefill):
        for la, lb in zip(ia, ib):
            for m in la:
                assert la[m][0].tobytes() == lb[m][0].tobytes()
                assert la[m][1].tobytes() == lb[m][1].tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.queries, b.queries))
    assert a.weights[1].w_q.tobytes() == b.weights[1].w_q.tobytes()
    other = generate_workload(WorkloadSpec(seed=1, batch=2, num_layers=2, **SMALL))
    assert other.prefill[0][0][Modality.VISUAL][0].tobytes() != a.prefill[0][0][Modality.VISUAL][0].tobytes()


def test_shared_subspace_combined_beats_per_head():
    spec = WorkloadSpec(visual=RankProfile(rank=8, shared_dim=8), **SMALL)
    k, _ = generate_workload(spec).prefill[0][0][Modality.VISUAL]
    combined = np.linalg.norm(compress_segment(k, 8).reconstruct() - k)
    per_head = sum(
        np.linalg.norm(f.reconstruct() - h)
        for f, h in zip(compress_per_head(k, 4, 2), np.split(k, 4, axis=1))
    )
    assert combined < per_head


def test_head_specific_directions_stay_in_one_head():
    spec = WorkloadSpec(visual=RankProfile(rank=4, shared_dim=0), **SMALL)
    k, _ = generate_workload(spec).prefill[0][0][Modality.VISUAL]
    for head in np.split(k, 4, axis=1):
        assert np.linalg.matrix_rank(head, tol=1e-9) == 1


def test_profile_validation():
    with pytest.raises(ParameterError):
        WorkloadSpec(visual=RankProfile(rank=100), **SMALL)
    with pytest.raises(ParameterError):
        WorkloadSpec(visual=RankProfile(decay=0.0), **SMALL)
    with pytest.raises(ParameterError):
        WorkloadSpec(batch=0)


def test_full_rank_run_is_exact():
    spec = WorkloadSpec(num_layers=2, batch=2, **SMALL)
    cfg = DecodeConfig(period=3, rank_kv=64, rank_vv=64, rank_kt=64, rank_vt=64, tiering=False, dtype="float64")
    report = run_experiment(spec, cfg)
    assert report.aggregate["max_output_error"] <= 1e-10
    assert len(report.steps) == 10
    for r in report.aggregate["prefill_ratios"] + report.aggregate["final_ratios"]:
        assert r["ratio"] == compression_ratio(r["tokens"], r["width"], r["rank"])


def test_sweep_flat_above_true_rank():
    spec = WorkloadSpec(visual=RankProfile(rank=8), text_tokens=0, **{k: v for k, v in SMALL.items() if k != "text_tokens"})
    cfg = DecodeConfig(tiering=False, dtype="float64")
    errors = {v: r.aggregate["mean_output_error"] for v, r in run_sweep(spec, cfg, "rank", [4, 8, 16, 32])}
    assert errors[8] < 1e-9 and errors[16] < 1e-9 and errors[32] < 1e-9
    assert errors[4] > 1e-3


def test_full_size_key_ratio():
    spec = WorkloadSpec(num_heads=40, num_kv_heads=40, head_dim=128, visual_tokens=1000,
                        text_tokens=0, decode_steps=1)
    cfg = DecodeConfig(rank_kv=64, rank_vv=64, svd_method="randomized", dtype="float32")
    report = run_experiment(spec, cfg)
    key = next(r for r in report.aggregate["prefill_ratios"] if r["kind"] == "key")
    assert (key["tokens"], key["width"], key["rank"]) == (1000, 5120, 64)
    assert round(key["ratio"], 2) == 13.07


def test_sweep_scales_group_ranks():
    spec = WorkloadSpec(**SMALL)
    cfg = DecodeConfig(value_groups=GroupSpec((0.25, 0.75), (64, 16)), period=2)
    reports = run_sweep(spec, cfg, "rank", [8])
    assert reports[0][1].config["sweep"] == {"param": "rank", "value": 8}
    with pytest.raises(ParameterError):
        run_sweep(spec, cfg, "colour", [1])


def test_errors_carry_context():
    spec = WorkloadSpec(**SMALL)
    workload = generate_workload(spec)
    workload.queries[0][0, 2, 5] = np.nan
    with pytest.raises(DataError, match="instance 0, layer 0, step 2"):
        run_experiment(spec, DecodeConfig(), workload)
    w = workload.weights[0]
    workload.weights[0] = AttentionWeights(w.w_q * np.inf, w.w_k, w.w_v, w.w_o)
    with pytest.raises(DataError, match="w_q"):
        run_experiment(spec, DecodeConfig(), workload)


def test_thread_count_does_not_change_report(monkeypatch):
    spec = WorkloadSpec(batch=3, **SMALL)
    cfg = DecodeConfig(period=2, rank_kv=8, rank_vv=8, value_groups=GroupSpec((0.25, 0.75), (8, 2)))
    monkeypatch.setenv("KVPACK_THREADS", "1")
    assert worker_count(3) == 1
    one = render(run_experiment(spec, cfg))
    monkeypatch.setenv("KVPACK_THREADS", "3")
    assert worker_count(3) == min(3, 3)
    many = render(run_experiment(spec, cfg))
    assert one == many


def test_turn_modes_differ():
    base = dict(SMALL, turns=2, decode_steps=3)
    cfg = DecodeConfig(period=2, rank_kv=8, rank_vv=8, value_groups=GroupSpec((0.25, 0.75), (8, 2)))
    carry = run_experiment(WorkloadSpec(carry_importance=True, **base), cfg)
    reset = run_experiment(WorkloadSpec(carry_importance=False, **base), cfg)
    assert [s["turn"] for s in carry.steps] == [0, 0, 0, 1, 1, 1]
    assert carry.steps[:3] == reset.steps[:3]
    assert carry.steps[3:] != reset.steps[3:]


def test_score_dump(tmp_path):
    spec = WorkloadSpec(**dict(SMALL, decode_steps=2))
    path = tmp_path / "scores.csv"
    run_experiment(spec, DecodeConfig(), score_path=path)
    rows = list(csv.DictReader(path.open()))
    assert set(rows[0]) == {"instance", "turn", "step", "layer", "position", "score"}
    # 136 prefill tokens + 1 new token after step 0, + 2 after step 1.
    assert len(rows) == 137 + 138
    assert all(0.0 <= float(r["score"]) <= 1.0 for r in rows)


def test_aggregates_recomputable():
    spec = WorkloadSpec(batch=2, **SMALL)
    report = run_experiment(spec, DecodeConfig.standard(8, period=2))
    agg = report.aggregate
    assert agg["num_steps"] == len(report.steps)
    assert agg["total_decompression_flops"] == sum(s["decompression_flops"] for s in report.steps)
    assert agg["max_output_error"] == max(s["output_error"] for s in report.steps)
    assert agg["flops_reduction"] == 1 - agg["total_decompression_flops"] / agg["full_decompression_flops"]
