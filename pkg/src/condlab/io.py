"""CSV/JSON writers with byte-stable formatting.

Floats are written with ``repr`` (shortest round-trip form) so that equal
runs give identical files. Every CSV starts with a ``# seed=N`` comment line
when a seed is supplied.
"""

from __future__ import annotations

import csv
import hashlib
import io as _stdio
import json
import math
from pathlib import Path

import numpy as np

__all__ = [
    "format_value",
    "write_csv",
    "read_csv",
    "write_json",
    "sha256_file",
    "trajectory_rows",
    "TRAJECTORY_HEADER",
    "state_document",
    "cosine_rows",
    "COSINE_HEADER",
]

TRAJECTORY_HEADER = ("t", "E", "norm_a", "norm_b", "norm_c", "step")
COSINE_HEADER = ("row", "norm", "cos_v")


def format_value(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    if x is None:
        return ""
    if isinstance(x, (list, tuple, dict)):
        return json.dumps(x, separators=(",", ":"))
    return str(x)


def write_csv(path, header, rows, seed: int | None = None) -> Path:
    path = Path(path)
    buf = _stdio.StringIO()
    if seed is not None:
        buf.write(f"# seed={int(seed)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        writer.writerow([format_value(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def _parse(field: str):
    if field == "":
        return math.nan
    try:
        return float(field)
    except ValueError:
        return field


def read_csv(path):
    """Return ``(header, rows, seed)``; numeric fields become floats, others stay strings."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    seed = None
    if lines and lines[0].startswith("# seed="):
        seed = int(lines.pop(0).split("=", 1)[1])
    reader = csv.reader(lines)
    header = tuple(next(reader))
    rows = [tuple(_parse(v) for v in row) for row in reader if row]
    return header, rows, seed


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def trajectory_rows(traj) -> list:
    """Rows for :data:`TRAJECTORY_HEADER`; ``step`` is the accepted step that produced each snapshot (0 for the first)."""
    rows = []
    steps = list(traj.step_sizes)
    for k, s in enumerate(traj.snapshots):
        step = steps[k] if k < len(steps) else math.nan
        rows.append((s.t, traj.energies[k], np.linalg.norm(s.a), np.linalg.norm(s.b), np.linalg.norm(s.c), step))
    return rows


def state_document(traj, seed: int | None = None) -> dict:
    doc = {
        "m": traj.m,
        "snapshots": [{"t": s.t, "a": s.a, "b": s.b, "c": s.c} for s in traj.snapshots],
    }
    if seed is not None:
        doc["seed"] = seed
    return doc


def cosine_rows(cos_map: dict) -> list:
    return [(k, n, c) for k, (n, c) in enumerate(zip(cos_map["norms"], cos_map["row_v_cos"]))]
