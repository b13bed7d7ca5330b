"""File formats: field CSV / binary dumps, candidate CSV, tables and JSON reports."""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .problem import Grid

MAGIC = b"GOHFLD01"
_HEADER = struct.Struct("<8sII")


class FormatError(ValueError):
    pass


def write_field_csv(path, grid: Grid, field: np.ndarray) -> None:
    """One row per time node: t followed by the values at every x node."""
    field = np.asarray(field, float)
    if field.shape != (grid.nx + 2, grid.nt + 1):
        raise FormatError(f"field shape {field.shape} does not match the grid")
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t"] + [repr(float(x)) for x in grid.x_nodes])
        for k, t in enumerate(grid.t_nodes):
            out.writerow([repr(float(t))] + [repr(float(v)) for v in field[:, k]])


def read_field_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (x_nodes, t_nodes, field (nx+2, nt+1))."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise FormatError("field CSV must start with a 't' header")
    x = np.array([float(v) for v in rows[0][1:]])
    body = np.array([[float(v) for v in r] for r in rows[1:]])
    return x, body[:, 0], body[:, 1:].T.copy()


def write_field_binary(path, grid: Grid, field: np.ndarray) -> None:
    """16-byte header (magic, nx, nt; little endian) then rows of doubles, one per time node."""
    field = np.asarray(field, float)
    if field.shape != (grid.nx + 2, grid.nt + 1):
        raise FormatError(f"field shape {field.shape} does not match the grid")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, grid.nx, grid.nt))
        fh.write(np.ascontiguousarray(field.T, dtype="<f8").tobytes())


def read_field_binary(path) -> tuple[int, int, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated field dump")
    magic, nx, nt = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("bad magic in field dump")
    expected = (nx + 2) * (nt + 1) * 8
    if len(data) - _HEADER.size != expected:
        raise FormatError(f"field dump holds {len(data) - _HEADER.size} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(nt + 1, nx + 2)
    return nx, nt, arr.T.copy()


# ---------------------------------------------------------------- candidates


def write_candidate_csv(path, t: Sequence[float], u: np.ndarray, mu_dot: np.ndarray) -> None:
    """Columns t, u_1..u_m, mu_dot_1..mu_dot_q; a repeated t encodes a jump."""
    u = np.atleast_2d(np.asarray(u, float))
    mu_dot = np.asarray(mu_dot, float).reshape(-1, len(t))
    header = ["t"] + [f"u_{i + 1}" for i in range(u.shape[0])]
    header += [f"mu_dot_{j + 1}" for j in range(mu_dot.shape[0])]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for k, tk in enumerate(t):
            out.writerow([repr(float(tk))] + [repr(float(v)) for v in u[:, k]]
                         + [repr(float(v)) for v in mu_dot[:, k]])


def read_candidate_csv(path, grid: Grid, m: int, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Candidate control and multiplier density as cell values (m, nt), (q, nt).

    Samples are interpolated linearly at cell midpoints; at a repeated time the
    first row is the left limit and the second the right limit.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError("empty candidate file") from None
        rows = [r for r in reader if r]
    want_u = [f"u_{i + 1}" for i in range(m)]
    want_mu = [f"mu_dot_{j + 1}" for j in range(q)]
    missing = [c for c in ["t"] + want_u + want_mu if c not in header]
    if missing:
        raise FormatError(f"candidate CSV lacks columns {missing}")
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise FormatError(f"non-numeric entry in candidate CSV: {exc}") from exc
    if data.ndim != 2 or data.shape[0] < 2:
        raise FormatError("candidate CSV needs at least two rows")
    t = data[:, header.index("t")]
    if np.any(np.diff(t) < 0):
        raise FormatError("candidate times must be nondecreasing")
    if t[0] > grid.t_nodes[0] + 1e-12 or t[-1] < grid.t_nodes[-1] - 1e-12:
        raise FormatError("candidate does not cover the time horizon")
    if not np.all(np.isfinite(data)):
        raise FormatError("candidate CSV contains non-finite values")
    mids = grid.t_mid

    def cells(col):
        vals = data[:, header.index(col)]
        out = np.empty(mids.size)
        for k, s in enumerate(mids):
            hi = int(np.searchsorted(t, s, side="right"))
            lo = hi - 1
            if hi >= t.size:
                out[k] = vals[-1]
            elif lo < 0:
                out[k] = vals[0]
            else:
                span = t[hi] - t[lo]
                a = 0.0 if span <= 0 else (s - t[lo]) / span
                out[k] = (1 - a) * vals[lo] + a * vals[hi]
        return out

    u = np.array([cells(c) for c in want_u]).reshape(m, grid.nt)
    mu = np.array([cells(c) for c in want_mu]).reshape(q, grid.nt)
    return u, mu


# ---------------------------------------------------------------- tables / reports


def write_table_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(list(header))
        for r in rows:
            out.writerow([_cell(v) for v in r])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def report_text(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"


def write_report(path, report: dict) -> None:
    Path(path).write_text(report_text(report))
