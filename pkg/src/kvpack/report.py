"""Writing and reading run reports.

JSON-lines: one ``{"record": "step", ...}`` object per step, then a single
``{"record": "aggregate", ..., "config": {...}}`` line. CSV: a header row of
``STEP_FIELDS`` and one row per step (aggregates are JSON-lines only).

Floats are written with 17 significant digits, so every recorded number
survives a parse and re-emitting a parsed report reproduces the file byte for
byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any, Literal

from kvpack.errors import KVPackError
from kvpack.harness import STEP_FIELDS, RunReport

ReportFormat = Literal["json-lines", "csv"]

_FLOAT_FIELDS = {"output_error"}


class ReportIOError(KVPackError, OSError):
    """A report could not be written or read."""


def format_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    text = format(x, ".17g")
    # Keep floats recognisable as floats after a JSON parse.
    if all(c not in text for c in ".eE") and "n" not in text:
        text += ".0"
    return text


def to_json(value: Any) -> str:
    """Compact deterministic JSON with fixed-precision floats."""
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, int):
        return str(int(value))
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        items = ", ".join(f"{json.dumps(str(k))}: {to_json(v)}" for k, v in value.items())
        return "{" + items + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(to_json(v) for v in value) + "]"
    if hasattr(value, "item"):  # numpy scalar
        return to_json(value.item())
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _coerce_step(raw: dict[str, Any]) -> dict[str, Any]:
    return {
        k: float(raw[k]) if k in _FLOAT_FIELDS else int(raw[k]) for k in STEP_FIELDS
    }


def render(report: RunReport, fmt: ReportFormat = "json-lines") -> str:
    if fmt == "json-lines":
        lines = [to_json({"record": "step", **s}) for s in report.steps]
        agg = {"record": "aggregate", **report.aggregate, "config": report.config}
        lines.append(to_json(agg))
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(STEP_FIELDS)
        for s in report.steps:
            writer.writerow(
                format_float(s[k]) if k in _FLOAT_FIELDS else int(s[k]) for k in STEP_FIELDS
            )
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def parse(text: str, fmt: ReportFormat = "json-lines") -> RunReport:
    if fmt == "json-lines":
        steps, aggregate, config = [], {}, {}
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("record")
            if kind == "step":
                steps.append(_coerce_step(obj))
            elif kind == "aggregate":
                config = obj.pop("config", {})
                aggregate = obj
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        return RunReport(steps, aggregate, config)
    if fmt == "csv":
        rows = list(csv.DictReader(io.StringIO(text)))
        return RunReport([_coerce_step(r) for r in rows], {}, {})
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report: RunReport, path, fmt: ReportFormat = "json-lines") -> None:
    try:
        Path(path).write_text(render(report, fmt))
    except OSError as exc:
        raise ReportIOError(f"cannot write report to {path}: {exc}") from exc


def read_report(path, fmt: ReportFormat = "json-lines") -> RunReport:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ReportIOError(f"cannot read report {path}: {exc}") from exc
    return parse(text, fmt)
