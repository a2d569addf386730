"""File formats: dense CSV / coordinate matrices, trace CSVs, JSON reports."""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path

import numpy as np

from .core import DomainError, TransportPlan

BALANCE_COLUMNS = ("iter", "error", "objective", "newton_decrement", "wall_seconds")
TRANSPORT_COLUMNS = ("t", "gap", "relative_gap", "infeasibility", "nu_inf_norm", "support_size", "seconds")
REGISTER_COLUMNS = ("iter", "t", "error", "transport_seconds", "svd_seconds", "support_size")


class InputError(Exception):
    """Unreadable or malformed user input."""


def read_matrix(path):
    """Dense ``.csv`` or 1-based ``i j value`` ``.coo``.

    Returns ``(values, rows, cols, n)``; ``rows``/``cols`` are None for dense input.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    ext = path.suffix.lower()
    try:
        if ext == ".csv":
            A = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
            if A.shape[0] != A.shape[1]:
                raise InputError(f"{path}: matrix must be square, got {A.shape}")
            if not np.all(np.isfinite(A)):
                raise InputError(f"{path}: non-finite entry")
            return A, None, None, A.shape[0]
        if ext == ".coo":
            T = np.loadtxt(path, dtype=float, ndmin=2)
            if T.size == 0 or T.shape[1] != 3:
                raise InputError(f"{path}: expected 'i j value' triples")
            ij = T[:, :2]
            if np.any(ij != np.round(ij)) or np.any(ij < 1):
                raise InputError(f"{path}: indices must be positive integers")
            rows = ij[:, 0].astype(np.intp) - 1
            cols = ij[:, 1].astype(np.intp) - 1
            n = int(max(rows.max(), cols.max())) + 1
            if not np.all(np.isfinite(T[:, 2])):
                raise InputError(f"{path}: non-finite entry")
            return T[:, 2], rows, cols, n
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    raise InputError(f"{path}: unknown extension {ext!r} (use .csv or .coo)")


def read_points(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    try:
        P = np.loadtxt(path, dtype=float, ndmin=2)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if P.shape[1] not in (2, 3) or P.shape[0] < 1:
        raise InputError(f"{path}: expected one 2-d or 3-d point per line")
    if not np.all(np.isfinite(P)):
        raise InputError(f"{path}: non-finite coordinate")
    return P


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return repr(float(v))


class TraceWriter:
    """CSV trace, flushed after every row."""

    def __init__(self, path, columns, timing: bool = True):
        self.columns = tuple(columns)
        self.timing = timing
        self._fh = open(path, "w", newline="") if path else None
        if self._fh:
            self._w = csv.writer(self._fh, lineterminator="\n")
            self._w.writerow(self.columns)
            self._fh.flush()

    def write(self, row: dict) -> None:
        if not self._fh:
            return
        vals = []
        for c in self.columns:
            v = row.get(c)
            if not self.timing and c in ("wall_seconds", "seconds", "transport_seconds", "svd_seconds"):
                v = 0.0
            vals.append(_fmt(v))
        self._w.writerow(vals)
        self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def clean_json(obj):
    """Replace non-finite floats by None and numpy scalars by Python ones."""
    if isinstance(obj, dict):
        return {str(k): clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean_json(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(path, obj) -> None:
    text = json.dumps(clean_json(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path in (None, "-"):
        print(text, end="")
    else:
        with open(path, "w") as fh:
            fh.write(text)


def write_plan(path, plan: TransportPlan, threshold: float = 0.0) -> None:
    """1-based ``i j value`` lines for entries above ``threshold``."""
    if plan.is_dense:
        r, c = np.nonzero(plan.values > threshold)
        v = plan.values[r, c]
    else:
        keep = plan.values > threshold
        r, c, v = plan.rows[keep], plan.cols[keep], plan.values[keep]
    order = np.lexsort((c, r))
    with open(path, "w") as fh:
        for i, j, x in zip(r[order], c[order], v[order]):
            fh.write(f"{i + 1} {j + 1} {float(x)!r}\n")


def write_matrix_csv(path, A) -> None:
    A = np.asarray(A)
    if np.issubdtype(A.dtype, np.integer):
        fmt = "%d"
    else:
        fmt = "%.17g"
    if path in (None, "-"):
        import sys
        np.savetxt(sys.stdout, A, fmt=fmt, delimiter=",")
    else:
        np.savetxt(path, A, fmt=fmt, delimiter=",")


def thread_limit():
    """Context limiting BLAS threads to ``MBIPM_NUM_THREADS`` when set."""
    val = os.environ.get("MBIPM_NUM_THREADS")
    if not val:
        import contextlib
        return contextlib.nullcontext()
    try:
        k = int(val)
        if k < 1:
            raise ValueError
    except ValueError:
        raise DomainError("MBIPM_NUM_THREADS must be a positive integer") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=k)
