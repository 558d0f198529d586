"""Input validation and CSV ingestion."""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass

import numpy as np
from sklearn.utils.validation import check_array, check_X_y


class DataFormatError(ValueError):
    """Malformed dataset; the message names the offending row/column."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` rows of ``(S, M, Y, X)``; ``X`` carries a leading intercept column."""

    S: np.ndarray
    M: np.ndarray
    Y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "X", X)
        for name in ("S", "M", "Y"):
            v = np.asarray(getattr(self, name), dtype=float).ravel()
            if v.shape[0] != X.shape[0]:
                raise DataFormatError(f"column {name} has {v.shape[0]} rows, X has {X.shape[0]}")
            object.__setattr__(self, name, v)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def y(self):
        return np.column_stack([self.S, self.M, self.Y])

    def take(self, idx):
        return Dataset(self.S[idx], self.M[idx], self.Y[idx], self.X[idx])

    @classmethod
    def from_xy(cls, X, y):
        X, y = check_gsem_xy(X, y)
        return cls(y[:, 0], y[:, 1], y[:, 2], X)


def check_gsem_xy(X, y):
    """Validate a confounder matrix and an ``(n, 3)`` target of ``(S, M, Y)``."""
    X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=float)
    if y.ndim != 2 or y.shape[1] != 3:
        raise ValueError(f"y must have three columns (S, M, Y), got shape {y.shape}")
    check_design(X)
    return X, y


def check_design(X):
    X = check_array(X, dtype=float)
    if not np.all(X[:, 0] == 1.0):
        raise ValueError("first column of X must be the intercept (all ones)")
    if X.shape[0] <= X.shape[1]:
        raise ValueError(f"need n > p, got n={X.shape[0]}, p={X.shape[1]}")
    return X


def check_dataset(data):
    if not isinstance(data, Dataset):
        raise TypeError(f"expected Dataset, got {type(data).__name__}")
    check_gsem_xy(data.X, data.y)
    return data


def check_probability(value, name="tau"):
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value


_X_COL = re.compile(r"^X(\d+)$")


def _parse_float(text, row, col):
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None


def read_table(path, columns=None):
    """Read a numeric CSV into ``(header, 2-D array)`` with row/column errors.

    With ``columns`` only those are parsed (others may hold text) and the
    returned header is ``columns``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise DataFormatError(f"{path}: duplicate column names in header")
        keep = list(range(len(header)))
        if columns is not None:
            missing = [c for c in columns if c not in header]
            if missing:
                raise DataFormatError(f"{path}: missing column {missing[0]!r}")
            keep = [header.index(c) for c in columns]
        rows = []
        for i, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataFormatError(f"row {i}: expected {len(header)} fields, got {len(rec)}")
            vals = [_parse_float(rec[j].strip(), i, header[j]) for j in keep]
            if not np.all(np.isfinite(vals)):
                j = keep[int(np.flatnonzero(~np.isfinite(vals))[0])]
                raise DataFormatError(f"row {i}, column {header[j]!r}: missing or non-finite value")
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return [header[j] for j in keep], np.asarray(rows, dtype=float)


def x_columns(header):
    cols = sorted((int(m.group(1)), h) for h in header if (m := _X_COL.match(h)))
    if not cols or [k for k, _ in cols] != list(range(1, len(cols) + 1)):
        raise DataFormatError("covariate columns must be named X1..Xp with X1 the intercept")
    return [h for _, h in cols]


def read_dataset(path):
    """Load a Dataset CSV with columns S, M, Y, X1..Xp (X1 all ones)."""
    header, table = read_table(path)
    for col in ("S", "M", "Y"):
        if col not in header:
            raise DataFormatError(f"{path}: missing column {col!r}")
    xcols = x_columns(header)
    X = table[:, [header.index(c) for c in xcols]]
    bad = np.flatnonzero(X[:, 0] != 1.0)
    if bad.size:
        raise DataFormatError(f"row {bad[0] + 2}, column 'X1': intercept column must be 1")
    data = Dataset(*(table[:, header.index(c)] for c in ("S", "M", "Y")), X)
    if data.n <= data.p:
        raise DataFormatError(f"{path}: need more rows than covariates (n={data.n}, p={data.p})")
    return data


def dataset_to_csv(data):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["S", "M", "Y"] + [f"X{j + 1}" for j in range(data.p)])
    for row in np.column_stack([data.S, data.M, data.Y, data.X]):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def write_dataset(data, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(dataset_to_csv(data))
