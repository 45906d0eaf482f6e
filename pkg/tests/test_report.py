import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvpack.decoder import DecodeConfig
from kvpack.harness import STEP_FIELDS, RunReport, WorkloadSpec, run_experiment
from kvpack.report import ReportIOError, emit_report, format_float, parse, read_report, render

SPEC = WorkloadSpec(num_heads=2, num_kv_heads=2, head_dim=16, visual_tokens=32, text_tokens=4, decode_steps=10)


@pytest.fixture(scope="module")
def report():
    return run_experiment(SPEC, DecodeConfig.standard(8, period=3), config_echo={"note": "x"})


def test_json_lines_count(report):
    lines = render(report).splitlines()
    assert len(lines) == 11
    records = [json.loads(l)["record"] for l in lines]
    assert records == ["step"] * 10 + ["aggregate"]
    assert json.loads(lines[-1])["config"] == {"note": "x"}


def test_csv_layout(report):
    lines = render(report, "csv").splitlines()
    assert lines[0] == ",".join(STEP_FIELDS) and len(lines) == 11


def test_empty_run_csv_is_header_only():
    empty = run_experiment(WorkloadSpec(**{**SPEC.__dict__, "decode_steps": 0}), DecodeConfig())
    assert render(empty, "csv") == ",".join(STEP_FIELDS) + "\n"
    assert len(render(empty).splitlines()) == 1


@pytest.mark.parametrize("fmt", ["json-lines", "csv"])
def test_reemit_is_byte_identical(report, fmt, tmp_path):
    path = tmp_path / "r.out"
    emit_report(report, path, fmt)
    again = read_report(path, fmt)
    assert render(again, fmt) == path.read_text()
    assert again.steps == report.steps


def test_json_round_trip_keeps_aggregates(report):
    back = parse(render(report))
    assert back.aggregate == report.aggregate


def test_report_determinism():
    cfg = DecodeConfig.standard(8, period=3)
    assert render(run_experiment(SPEC, cfg)) == render(run_experiment(SPEC, cfg))


def test_io_errors_name_the_path(report, tmp_path):
    missing = tmp_path / "no" / "such" / "dir.jsonl"
    with pytest.raises(ReportIOError, match="dir.jsonl"):
        emit_report(report, missing)
    with pytest.raises(ReportIOError, match="dir.jsonl"):
        read_report(missing)


def test_unknown_format(report):
    with pytest.raises(ValueError):
        render(report, "xml")


def test_special_floats():
    assert format_float(float("nan")) == "NaN"
    assert format_float(float("inf")) == "Infinity"
    assert format_float(2.0) == "2.0"
    assert format_float(1e300) == "1.0000000000000001e+300"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_text_round_trips(x):
    assert float(format_float(x)) == x
    assert json.loads(format_float(x)) == x


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, min_value=0), max_size=5))
def test_step_round_trip_property(errors):
    steps = [dict(dict.fromkeys(STEP_FIELDS, 3), output_error=e) for e in errors]
    rep = RunReport(steps, {"mean": math.pi}, {})
    for fmt in ("json-lines", "csv"):
        text = render(rep, fmt)
        assert render(parse(text, fmt), fmt) == text
        assert [s["output_error"] for s in parse(text, fmt).steps] == errors
