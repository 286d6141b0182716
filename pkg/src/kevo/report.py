"""Per-generation report files: CSV summary and line-delimited JSON records."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

from .fileio import atomic_write
from .evolve import GenerationLog, primary_metric


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report_columns(logs: Sequence[GenerationLog]) -> list[str]:
    layers = list(logs[0].hypothesis_stats)
    return (["generation", "dense_metric", "slim_metric", "sparsity"]
            + [f"mean_abs_fit_{l}" for l in layers] + [f"mean_abs_reset_{l}" for l in layers]
            + ["s_h2d", "c_h2d"])


def render_csv(logs: Sequence[GenerationLog]) -> str:
    if not logs:
        raise ValueError("no generation logs to report")
    cols = report_columns(logs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    layers = list(logs[0].hypothesis_stats)
    for entry in logs:
        row = [str(entry.generation), _fmt(primary_metric(entry.dense_metric)),
               _fmt(primary_metric(entry.slim_metric)), _fmt(entry.sparsity)]
        row += [_fmt(entry.hypothesis_stats[l][0]) for l in layers]
        row += [_fmt(entry.hypothesis_stats[l][1]) for l in layers]
        row += [_fmt(entry.s_h2d), _fmt(entry.c_h2d)]
        w.writerow(row)
    return buf.getvalue()


def render_jsonl(logs: Sequence[GenerationLog]) -> str:
    if not logs:
        raise ValueError("no generation logs to report")
    return "".join(json.dumps(entry.to_dict(), sort_keys=True) + "\n" for entry in logs)


def emit_report(logs: Sequence[GenerationLog], path, fmt: str = "csv") -> Path:
    text = render_csv(logs) if fmt == "csv" else render_jsonl(logs)
    atomic_write(path, text.encode())
    return Path(path)


def read_csv_report(path) -> list[dict[str, float | None]]:
    """Parse a CSV report back; empty cells become ``None``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (None if v == "" else (int(v) if k == "generation" else float(v))) for k, v in r.items()}
            for r in rows]


def read_jsonl_report(path) -> list[GenerationLog]:
    return [GenerationLog.from_dict(json.loads(line)) for line in Path(path).read_text().splitlines() if line]
