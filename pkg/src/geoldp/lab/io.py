"""JSON result records and versioned plot-data CSV files."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

CSV_SCHEMA_VERSION = 1


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return _clean(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def inputs_hash(inputs) -> str:
    blob = json.dumps(_clean(inputs), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def value_record(inputs, value, tolerance=None, diagnostics=None) -> dict:
    """{inputs_hash, value, tolerance, diagnostics} for a single computed quantity."""
    return _clean({"inputs_hash": inputs_hash(inputs), "value": value, "tolerance": tolerance,
                   "diagnostics": diagnostics or {}})


def write_json(record, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(record), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(kind: str, columns, rows, path):
    """Rows as CSV under a '# geoldp-csv v<version> kind=<kind>' header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# geoldp-csv v{CSV_SCHEMA_VERSION} kind={kind}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def read_csv(path):
    """(header comment, columns, rows as dicts of strings)."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("# geoldp-csv v"):
            raise ValueError(f"{path} has no geoldp-csv header line")
        reader = csv.reader(fh)
        cols = next(reader)
        rows = [dict(zip(cols, r)) for r in reader]
    return header, cols, rows


def save_result(result, prefix):
    """Write ``prefix``.json and ``prefix``.csv for an experiment ResultRecord."""
    prefix = Path(prefix)
    j = write_json(result, prefix.with_suffix(".json"))
    c = write_csv(result.kind, result.columns, result.rows, prefix.with_suffix(".csv"))
    return j, c
