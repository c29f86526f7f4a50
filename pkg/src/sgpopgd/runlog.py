"""RunLog CSV + JSON sidecar serialisation (byte-stable for a given run)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .simulator import RunLog

REQUIRED = ["t", "y_hat", "y_ref", "y_star", "y_hat_star", "f_t", "f_t_star"]
SCALARS = ["y", "w_agg", "noise", "f_true_star", "e1_norm", "e2_norm", "e_norm", "sup_err"]
FLAGS = ["feedback", "oracle_converged"]
VECTORS = [("x", "x"), ("xhat_star", "xhat_star"), ("x_star", "x_star")]


def _fmt(v: float) -> str:
    return repr(float(v))


def columns(M: int) -> list[str]:
    cols = REQUIRED + SCALARS + FLAGS
    for prefix, _ in VECTORS:
        cols += [f"{prefix}_{m + 1}" for m in range(M)]
    return cols


def write_runlog(log: RunLog, out_dir: str | Path, stem: str = "runlog") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    json_path = out / f"{stem}.json"
    M = int(log.metadata.get("M", log.x.shape[1] if log.x.ndim == 2 else 0))
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns(M))
        for i in range(log.T):
            row = [str(int(log.t[i]))]
            row += [_fmt(getattr(log, c)[i]) for c in REQUIRED[1:] + SCALARS]
            row += [str(int(getattr(log, c)[i])) for c in FLAGS]
            for _, attr in VECTORS:
                row += [_fmt(v) for v in getattr(log, attr)[i]]
            w.writerow(row)
    meta = dict(log.metadata)
    meta["columns"] = columns(M)
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def sidecar_path(csv_path: str | Path) -> Path:
    return Path(csv_path).with_suffix(".json")


def read_runlog(csv_path: str | Path) -> RunLog:
    """Load a RunLog written by :func:`write_runlog`.

    Raises :class:`SchemaError` naming the first missing column.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise SchemaError(f"run log not found: {csv_path}")
    meta_path = sidecar_path(csv_path)
    if not meta_path.is_file():
        raise SchemaError(f"metadata sidecar not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{meta_path}: {exc}") from None
    M = int(meta.get("M", 0))
    with csv_path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{csv_path}: empty file, no header") from None
        rows = list(reader)
    expected = columns(M)
    for col in expected:
        if col not in header:
            raise SchemaError(f"{csv_path}: missing column {col!r}")
    idx = {c: header.index(c) for c in expected}
    T = len(rows)
    try:
        data = np.array([[float(r[idx[c]]) for c in expected] for r in rows]).reshape(T, len(expected))
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"{csv_path}: malformed row: {exc}") from None
    col = {c: data[:, j] for j, c in enumerate(expected)}

    def vec(prefix):
        return np.stack([col[f"{prefix}_{m + 1}"] for m in range(M)], axis=1) if M else np.zeros((T, 0))

    return RunLog(
        t=col["t"].astype(np.int64),
        x=vec("x"), x_star=vec("x_star"), xhat_star=vec("xhat_star"),
        feedback=col["feedback"].astype(bool), oracle_converged=col["oracle_converged"].astype(bool),
        v=None, s=None, metadata=meta,
        **{c: col[c] for c in REQUIRED[1:] + SCALARS},
    )
