"""Dataset containers and the CSV formats used on disk.

Regression data: header ``y,x1,...,xp``.
Survival data: header ``time,status,x1,...,xp``.
Floats are written with 17 significant digits so files round-trip exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FLOAT_FMT = "{:.17g}"


class DataFormatError(ValueError):
    """Malformed input file; ``lineno`` is 1-based and counts the header."""

    def __init__(self, msg, lineno=None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {msg}" if lineno is not None else msg)


def fmt(v) -> str:
    return FLOAT_FMT.format(float(v))


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SurvivalDataset:
    """Survival data sorted by time; the risk set of unit ``i`` is ``{i, ..., N-1}``.

    Build through :meth:`from_unsorted` unless the arrays are already ordered.
    Ties keep their input order (stable sort) and get no special treatment.
    """

    X: np.ndarray
    time: np.ndarray
    status: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        t = np.asarray(self.time, dtype=float).reshape(-1)
        d = np.asarray(self.status, dtype=float).reshape(-1)
        if not (X.shape[0] == t.shape[0] == d.shape[0]):
            raise ValueError("X, time and status must have the same length")
        if np.any(np.diff(t) < 0):
            raise ValueError("survival times must be sorted ascending")
        if not np.all((d == 0) | (d == 1)):
            raise ValueError("status must be 0 or 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "status", d)

    @classmethod
    def from_unsorted(cls, X, time, status):
        order = np.argsort(np.asarray(time, dtype=float), kind="stable")
        return cls(np.asarray(X, dtype=float)[order], np.asarray(time, dtype=float)[order],
                   np.asarray(status, dtype=float)[order])

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def _read_rows(path, lead):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file", 1) from None
        header = [h.strip() for h in header]
        if header[: len(lead)] != lead or len(header) <= len(lead):
            raise DataFormatError(f"expected header {','.join(lead)},x1,...", 1)
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DataFormatError(f"expected {width} fields, got {len(row)}", lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DataFormatError(f"non-numeric field in {row!r}", lineno) from None
            if not all(np.isfinite(vals)):
                raise DataFormatError("non-finite value", lineno)
            rows.append(vals)
    if not rows:
        raise DataFormatError("no data rows", 2)
    return np.array(rows, dtype=float)


def read_dataset_csv(path) -> Dataset:
    a = _read_rows(path, ["y"])
    return Dataset(a[:, 1:], a[:, 0])


def read_survival_csv(path) -> SurvivalDataset:
    a = _read_rows(path, ["time", "status"])
    bad = np.flatnonzero((a[:, 1] != 0) & (a[:, 1] != 1))
    if bad.size:
        raise DataFormatError("status must be 0 or 1", int(bad[0]) + 2)
    return SurvivalDataset.from_unsorted(a[:, 2:], a[:, 0], a[:, 1])


def _write(path, header, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in zip(*columns):
        w.writerow([fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def write_dataset_csv(path, data: Dataset):
    cols = [data.y] + [data.X[:, j] for j in range(data.p)]
    _write(path, ["y"] + [f"x{j + 1}" for j in range(data.p)], cols)


def write_survival_csv(path, data: SurvivalDataset):
    cols = [data.time, data.status] + [data.X[:, j] for j in range(data.p)]
    _write(path, ["time", "status"] + [f"x{j + 1}" for j in range(data.p)], cols)


def write_trajectory_csv(path, trajectory: np.ndarray):
    """Rows of ``(iter, theta_1, ..., theta_p)``."""
    trajectory = np.atleast_2d(trajectory)
    p = trajectory.shape[1] - 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter"] + [f"theta_{j + 1}" for j in range(p)])
    for row in trajectory:
        w.writerow([str(int(row[0]))] + [fmt(v) for v in row[1:]])
    Path(path).write_text(buf.getvalue())
