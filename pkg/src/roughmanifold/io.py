"""Structured-text documents for rough paths and delimited trace files."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .errors import UsageError
from .tensor import Control, GridRoughPath

FORMAT = "roughmanifold.gridroughpath"
VERSION = 1


def control_from_descriptor(desc: dict | None, grid=None, values=None) -> Control | None:
    if desc is None:
        return None
    kind = desc.get("kind")
    if kind == "uniform":
        return Control.uniform(float(desc["kappa"]))
    if kind == "pvar":
        return Control.empirical(grid, values, float(desc["p"]))
    raise UsageError(f"unknown control descriptor {desc!r}")


def path_to_dict(X: GridRoughPath) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "p": X.p,
        "control": X.control.descriptor(),
        "grid": X.grid.tolist(),
        "values": X.values.tolist(),
        "step2": X.step2.tolist(),
    }


def path_from_dict(doc: dict) -> GridRoughPath:
    if doc.get("format") != FORMAT:
        raise UsageError(f"not a rough path document (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise UsageError(f"unsupported document version {doc.get('version')!r}")
    missing = {"grid", "values", "step2", "p"} - set(doc)
    if missing:
        raise UsageError(f"rough path document missing fields: {sorted(missing)}")
    grid = np.asarray(doc["grid"], dtype=float)
    values = np.asarray(doc["values"], dtype=float)
    if values.ndim != 2:
        raise UsageError("values must be a list of rows")
    N = values.shape[1]
    step2 = np.asarray(doc["step2"], dtype=float).reshape(grid.size - 1, N, N)
    control = control_from_descriptor(doc.get("control"), grid, values)
    return GridRoughPath(grid, values, step2, float(doc["p"]), control)


def dumps_path(X: GridRoughPath, extra: dict | None = None) -> str:
    doc = path_to_dict(X)
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads_path(text: str) -> GridRoughPath:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"rough path document is not valid JSON: line {exc.lineno}: {exc.msg}") from exc
    return path_from_dict(doc)


def save_path(X: GridRoughPath, path, extra: dict | None = None) -> None:
    Path(path).write_text(dumps_path(X, extra))


def load_path(path) -> GridRoughPath:
    return loads_path(Path(path).read_text())


def load_document(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def trace_to_csv(times, values) -> str:
    values = np.asarray(values, dtype=float)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"x{i + 1}" for i in range(values.shape[1])])
    for t, row in zip(times, values):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    return buf.getvalue()


def trace_from_csv(text: str):
    """Parse a ``t,x1,...,xN`` file.  Errors carry 1-based line numbers."""
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise UsageError("trace file is empty")
    header = [c.strip() for c in rows[0]]
    if len(header) < 2 or header[0] != "t" or header[1:] != [f"x{i + 1}" for i in range(len(header) - 1)]:
        raise UsageError(f"line 1: expected header t,x1,...,xN, got {','.join(header)}")
    times, vals = [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise UsageError(f"line {lineno}: expected {len(header)} fields, got {len(r)}")
        try:
            nums = [float(c) for c in r]
        except ValueError:
            raise UsageError(f"line {lineno}: non-numeric field") from None
        times.append(nums[0])
        vals.append(nums[1:])
    if len(times) < 2:
        raise UsageError("trace file needs at least two samples")
    t = np.asarray(times)
    if not np.all(np.diff(t) > 0):
        raise UsageError("trace times must be strictly increasing")
    return t, np.asarray(vals)


def write_table(path, header, rows) -> None:
    """Tidy comma-separated table (plot data)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
