"""Plain-text file formats: result CSVs and feature tables.

All files are UTF-8 with LF line endings.  Floats are written with
``repr``, the shortest string that parses back to the identical double, so
write -> read -> write is byte-stable.  Booleans are ``true``/``false``.
"""
from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

import numpy as np

from .errors import ParseError
from .harness import Aggregate, ResultRecord

RESULT_COLUMNS = (
    "family", "scrambled", "algorithm", "E", "seed", "metric",
    "value", "wall_time_s", "partial", "failed", "reason",
)
PLOT_COLUMNS = ("family", "scrambled", "algorithm", "metric", "E", "n", "n_failed", "mean", "ci_low", "ci_high")

_FEATURE_COL = re.compile(r"f(0|[1-9][0-9]*)")


def fmt_float(v: float) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def parse_bool(text: str, where: str = "") -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ParseError(f"{where}expected true/false, got {text!r}")


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_results(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in records:
            w.writerow([
                r.family, fmt_bool(r.scrambled), r.algorithm, r.E, r.seed, r.metric,
                fmt_float(r.value), fmt_float(r.wall_time_s), fmt_bool(r.partial),
                fmt_bool(r.failed), r.reason,
            ])


def _read_rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


def read_results(path) -> list[ResultRecord]:
    """Parse a results CSV; raises :class:`ParseError` naming the line on bad input."""
    rows = _read_rows(path)
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    missing = [c for c in RESULT_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"{path}: missing columns {missing}")
    idx = {c: header.index(c) for c in RESULT_COLUMNS}
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        where = f"{path}:{lineno}: "
        try:
            cell = {c: row[i] for c, i in idx.items()}
            out.append(ResultRecord(
                family=cell["family"],
                scrambled=parse_bool(cell["scrambled"], where),
                algorithm=cell["algorithm"],
                E=int(cell["E"]),
                seed=int(cell["seed"]),
                metric=cell["metric"],
                value=float(cell["value"]),
                wall_time_s=float(cell["wall_time_s"]),
                partial=parse_bool(cell["partial"], where),
                failed=parse_bool(cell["failed"], where),
                reason=cell["reason"],
            ))
        except ValueError as exc:
            raise ParseError(f"{where}{exc}") from None
    return out


def write_plotdata(path, aggregates) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(PLOT_COLUMNS)
        for a in aggregates:
            w.writerow([
                a.family, fmt_bool(a.scrambled), a.algorithm, a.metric, a.E, a.n, a.n_failed,
                fmt_float(a.mean), fmt_float(a.ci_low), fmt_float(a.ci_high),
            ])


def _json_value(v):
    if isinstance(v, (float, np.floating)):
        return None if not math.isfinite(float(v)) else float(v)
    if isinstance(v, np.ndarray):
        return [_json_value(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_json(path, obj) -> None:
    """Deterministic JSON: sorted keys, non-finite floats as ``null``, trailing newline."""
    text = json.dumps(_json_value(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def aggregates_json(aggs: list[Aggregate]) -> list[dict]:
    return [
        {
            "family": a.family, "scrambled": a.scrambled, "algorithm": a.algorithm, "E": a.E,
            "metric": a.metric, "n": a.n, "n_failed": a.n_failed,
            "mean": a.mean, "ci_low": a.ci_low, "ci_high": a.ci_high,
        }
        for a in aggs
    ]


# ------------------------------------------------------------ feature tables

def feature_header(d: int) -> list[str]:
    return ["y", "env"] + [f"f{i}" for i in range(d)]


def write_features(path, x, y, env, integer_labels: bool) -> None:
    x = np.asarray(x, dtype=float)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = _writer(fh)
        w.writerow(feature_header(x.shape[1]))
        for xi, yi, ei in zip(x, y, env):
            label = str(int(yi)) if integer_labels else fmt_float(yi)
            w.writerow([label, str(int(ei))] + [fmt_float(v) for v in xi])


def read_features(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Load a ``y,env,f0..f{d-1}`` table.

    Labels come back as ``int`` when every label is integral, otherwise as
    ``float``.  Raises :class:`ParseError` with the offending column or line.
    """
    rows = _read_rows(path)
    if not rows:
        raise ParseError(f"{path}: empty file (no header)")
    header = rows[0]
    if len(header) < 3:
        raise ParseError(f"{path}:1: header needs y, env and at least one feature column, got {header}")
    for i, (got, want) in enumerate(zip(header, feature_header(len(header) - 2))):
        if got != want:
            raise ParseError(f"{path}:1: column {i + 1} is {got!r}, expected {want!r}")
    d = len(header) - 2
    n = len(rows) - 1
    x = np.empty((n, d))
    y = np.empty(n)
    env = np.empty(n, dtype=int)
    for lineno, row in enumerate(rows[1:], start=2):
        i = lineno - 2
        if len(row) != d + 2:
            raise ParseError(f"{path}:{lineno}: expected {d + 2} cells, got {len(row)}")
        for col, cell in zip(header, row):
            if cell.strip() == "":
                raise ParseError(f"{path}:{lineno}: missing value in column {col!r}")
        try:
            y[i] = float(row[0])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: column 'y' is not a number: {row[0]!r}") from None
        try:
            env[i] = int(row[1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: column 'env' is not an integer: {row[1]!r}") from None
        if env[i] < -1:
            raise ParseError(f"{path}:{lineno}: env must be >= -1, got {env[i]}")
        for j, cell in enumerate(row[2:]):
            try:
                x[i, j] = float(cell)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: column 'f{j}' is not a number: {cell!r}") from None
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ParseError(f"{path}: non-finite values are not allowed")
    if n and np.all(y == np.round(y)):
        return x, y.astype(int), env
    return x, y, env
