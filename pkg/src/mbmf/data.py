"""Sparse observation matrices: ingestion, splitting, folds and persistence.

Observations are stored as coordinate triplets ``(row, col, value)`` in the
order they were read. The indicator matrix Z is implicit: a cell is observed
exactly when a triplet exists for it. Every split and fold is expressed as a
set of entry indices into that triplet order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .seeding import rng_stream

__all__ = [
    "BEHAVIORS",
    "BehaviorLog",
    "DataError",
    "DEFAULT_BEHAVIOR_WEIGHTS",
    "SparseObservations",
    "SplitPlan",
    "behaviors_to_interest",
    "fold_mask",
    "load_behavior_log",
    "load_triplets",
    "make_validation_folds",
    "read_folds",
    "reindex",
    "save_triplets",
    "split_historical_present",
    "training_view",
    "write_folds",
]


class DataError(ValueError):
    """Raised for malformed or inconsistent observation data."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SparseObservations:
    """An ``n_rows x n_cols`` matrix with a sparse set of observed cells.

    Rows are users and columns are items. ``rows``, ``cols`` and ``values``
    are parallel arrays, one element per observed entry; the position in
    these arrays is the entry index used by splits and folds.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    row_labels: tuple = field(default=None)
    col_labels: tuple = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "rows", _frozen(self.rows, np.int64))
        object.__setattr__(self, "cols", _frozen(self.cols, np.int64))
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        n, m = int(self.n_rows), int(self.n_cols)
        object.__setattr__(self, "n_rows", n)
        object.__setattr__(self, "n_cols", m)
        if n < 0 or m < 0:
            raise DataError("matrix dimensions must be non-negative")
        if not (len(self.rows) == len(self.cols) == len(self.values)):
            raise DataError("rows, cols and values must have equal length")
        if len(self.rows):
            if self.rows.min() < 0 or self.rows.max() >= n:
                raise DataError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= m:
                raise DataError("column index out of range")
            keys = self.rows * m + self.cols
            uniq, counts = np.unique(keys, return_counts=True)
            if len(uniq) != len(keys):
                dup = int(uniq[np.argmax(counts > 1)])
                raise DataError(f"duplicate entry at (row {dup // m}, col {dup % m})")
        row_labels = self.row_labels
        col_labels = self.col_labels
        if row_labels is None:
            row_labels = [str(i) for i in range(n)]
        if col_labels is None:
            col_labels = [str(j) for j in range(m)]
        object.__setattr__(self, "row_labels", tuple(str(s) for s in row_labels))
        object.__setattr__(self, "col_labels", tuple(str(s) for s in col_labels))
        if len(self.row_labels) != n or len(self.col_labels) != m:
            raise DataError("label lists must match the matrix dimensions")

    @classmethod
    def from_dense(cls, matrix, mask=None, **labels):
        """Build from a dense array; ``mask`` selects observed cells (default: all)."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if mask is None:
            mask = np.ones(matrix.shape, dtype=bool)
        r, c = np.nonzero(mask)
        return cls(matrix.shape[0], matrix.shape[1], r, c, matrix[r, c], **labels)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return len(self.values)

    @property
    def entries(self):
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    @cached_property
    def csr_order(self):
        """Permutation that sorts entries by (row, col), i.e. CSR storage order."""
        return np.lexsort((self.cols, self.rows))

    @cached_property
    def _csr_pattern(self):
        order = self.csr_order
        indptr = np.zeros(self.n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.rows, minlength=self.n_rows), out=indptr[1:])
        return self.cols[order], indptr

    def to_csr(self, values=None):
        """CSR matrix of ``values`` (default: the observed values) on this pattern."""
        values = self.values if values is None else np.asarray(values, dtype=np.float64)
        indices, indptr = self._csr_pattern
        return sp.csr_matrix((values[self.csr_order], indices, indptr), shape=self.shape)

    def to_dense(self, fill=0.0):
        out = np.full(self.shape, fill, dtype=np.float64)
        out[self.rows, self.cols] = self.values
        return out

    def indicator(self):
        """Dense 0/1 indicator matrix Z."""
        z = np.zeros(self.shape, dtype=np.float64)
        z[self.rows, self.cols] = 1.0
        return z

    def row_counts(self):
        return np.bincount(self.rows, minlength=self.n_rows)

    def col_counts(self):
        return np.bincount(self.cols, minlength=self.n_cols)

    def subset(self, index):
        """Observations restricted to the given entry indices or boolean mask."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return SparseObservations(
            self.n_rows,
            self.n_cols,
            self.rows[index],
            self.cols[index],
            self.values[index],
            self.row_labels,
            self.col_labels,
        )

    def with_values(self, values):
        """Same cells and labels, new values."""
        return SparseObservations(
            self.n_rows, self.n_cols, self.rows, self.cols, values, self.row_labels, self.col_labels
        )


def reindex(data, row_labels, col_labels):
    """Re-express ``data`` on another label space, dropping unknown labels.

    Used to line a separately loaded file (e.g. a history) up with the
    indices of the matrix being factorised.
    """
    rmap = {lab: i for i, lab in enumerate(row_labels)}
    cmap = {lab: j for j, lab in enumerate(col_labels)}
    r = np.array([rmap.get(data.row_labels[i], -1) for i in data.rows], dtype=np.int64)
    c = np.array([cmap.get(data.col_labels[j], -1) for j in data.cols], dtype=np.int64)
    keep = (r >= 0) & (c >= 0)
    return SparseObservations(
        len(rmap), len(cmap), r[keep], c[keep], data.values[keep], row_labels, col_labels
    )


def load_triplets(path, delimiter=",", has_header=False):
    """Read a ``user,item,value`` text file.

    External ids are mapped to contiguous indices in first-seen order.
    Blank lines and lines starting with ``#`` are skipped; if ``has_header``
    is set the first remaining line is dropped. Extra fields beyond the
    third are ignored.
    """
    row_ids, col_ids = {}, {}
    rows, cols, vals = [], [], []
    seen = {}
    header_pending = has_header
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if header_pending:
                header_pending = False
                continue
            parts = [p.strip() for p in line.split(delimiter)]
            if len(parts) < 3 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected user{delimiter}item{delimiter}value")
            try:
                value = float(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value {parts[2]!r}") from None
            if not math.isfinite(value):
                raise DataError(f"{path}:{lineno}: non-finite value {parts[2]!r}")
            r = row_ids.setdefault(parts[0], len(row_ids))
            c = col_ids.setdefault(parts[1], len(col_ids))
            if (r, c) in seen:
                raise DataError(
                    f"{path}:{lineno}: duplicate pair ({parts[0]}, {parts[1]}), "
                    f"first seen on line {seen[(r, c)]}"
                )
            seen[(r, c)] = lineno
            rows.append(r)
            cols.append(c)
            vals.append(value)
    if not vals:
        raise DataError(f"{path}: no entries")
    return SparseObservations(len(row_ids), len(col_ids), rows, cols, vals, list(row_ids), list(col_ids))


def save_triplets(data, path, delimiter=",", header=False):
    """Write observations as ``row_label,col_label,value`` lines.

    Reading the file back gives the same cells, labels and values. Indices
    are reproduced too when some entry order lets first appearance follow
    both label orders (always for the stored order of a freshly loaded
    file); otherwise entries are written row by row and the column indices
    of the reloaded data follow first appearance. Labels with no entries
    cannot be expressed and are dropped.
    """
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(delimiter.join(["user", "item", "value"]) + "\n")
        # Entries are emitted so that first-seen order reproduces both label orders.
        for r, c, v in _label_preserving_order(data):
            fh.write(f"{data.row_labels[r]}{delimiter}{data.col_labels[c]}{delimiter}{v!r}\n")


def _label_preserving_order(data):
    entries = data.entries
    # Loading assigns indices by first appearance; as long as the entries are
    # stored in an order where row r first appears before row r+1 (and same for
    # columns), indices survive. Reorder only when the stored order breaks that.
    if _first_seen_is_identity(data.rows) and _first_seen_is_identity(data.cols):
        return entries
    order = sorted(range(len(entries)), key=lambda e: (entries[e][0], entries[e][1]))
    return [entries[e] for e in order]


def _first_seen_is_identity(idx):
    _, first = np.unique(idx, return_index=True)
    return bool(np.all(np.diff(first) > 0)) if len(first) else True


@dataclass(frozen=True, eq=False)
class SplitPlan:
    """Historical/present partition of a source matrix plus validation folds.

    ``historical_index`` and ``present_index`` are entry indices into the
    source; ``folds`` are entry indices into ``present``.
    """

    historical: SparseObservations
    present: SparseObservations
    historical_index: np.ndarray
    present_index: np.ndarray
    folds: list = field(default_factory=list)


def split_historical_present(data, seed):
    """Randomly split entries 50/50 into historical and present parts.

    Rows and columns that have any entries must keep at least one of them in
    the present part. Each offending row, then each offending column, gets
    its highest-index historical entry moved to present.
    """
    if data.nnz == 0:
        raise DataError("cannot split an empty observation set")
    rng = rng_stream(seed, "split")
    perm = rng.permutation(data.nnz)
    in_present = np.ones(data.nnz, dtype=bool)
    in_present[perm[: data.nnz // 2]] = False

    entry = np.arange(data.nnz)
    for idx, size in ((data.rows, data.n_rows), (data.cols, data.n_cols)):
        have = np.bincount(idx, minlength=size) > 0
        covered = np.bincount(idx[in_present], minlength=size) > 0
        missing = have & ~covered
        if missing.any():
            last = np.full(size, -1, dtype=np.int64)
            np.maximum.at(last, idx, entry)
            in_present[last[missing]] = True

    present_index = np.flatnonzero(in_present)
    historical_index = np.flatnonzero(~in_present)
    return SplitPlan(
        historical=data.subset(historical_index),
        present=data.subset(present_index),
        historical_index=historical_index,
        present_index=present_index,
    )


def make_validation_folds(present, n_folds, fraction, seed, disjoint=True):
    """Draw ``n_folds`` validation folds of ``floor(fraction * nnz)`` entries each.

    With ``disjoint`` the folds are consecutive chunks of one random
    permutation; otherwise each fold is an independent uniform sample.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    if n_folds < 1:
        raise ValueError("n_folds must be at least 1")
    if disjoint and n_folds * fraction > 1 + 1e-12:
        raise ValueError(f"{n_folds} disjoint folds of fraction {fraction} exceed the data")
    size = math.floor(fraction * present.nnz + 1e-9)
    if size == 0:
        raise ValueError("validation fold would be empty")
    if disjoint:
        perm = rng_stream(seed, "folds").permutation(present.nnz)
        return [np.sort(perm[f * size : (f + 1) * size]) for f in range(n_folds)]
    return [
        np.sort(rng_stream(seed, "folds", f).choice(present.nnz, size=size, replace=False))
        for f in range(n_folds)
    ]


def fold_mask(present, fold):
    """Boolean mask M over the entries of ``present``: True on fold entries."""
    mask = np.zeros(present.nnz, dtype=bool)
    mask[np.asarray(fold, dtype=np.int64)] = True
    return mask


def training_view(present, fold):
    """``present`` with the fold entries held out."""
    return present.subset(~fold_mask(present, fold))


def write_folds(path, folds):
    """Fold manifest: one fold per line, space-separated entry indices."""
    with open(path, "w", encoding="utf-8") as fh:
        for fold in folds:
            fh.write(" ".join(str(int(i)) for i in fold) + "\n")


def read_folds(path):
    folds = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        folds.append(np.array([int(t) for t in line.split()], dtype=np.int64))
    return folds


BEHAVIORS = ("click", "collect", "add-to-cart", "payment")
DEFAULT_BEHAVIOR_WEIGHTS = (1.0, 2.0, 3.0, 5.0)

_BEHAVIOR_ALIASES = {
    "click": "click",
    "collect": "collect",
    "cart": "add-to-cart",
    "add-to-cart": "add-to-cart",
    "pay": "payment",
    "payment": "payment",
}


@dataclass(frozen=True)
class BehaviorLog:
    """User behaviour records ``(user, category, behavior)``."""

    records: tuple

    def __post_init__(self):
        clean = []
        for user, category, behavior in self.records:
            kind = _BEHAVIOR_ALIASES.get(str(behavior).strip().lower())
            if kind is None:
                raise DataError(f"unknown behavior {behavior!r}; expected one of {BEHAVIORS}")
            clean.append((str(user), str(category), kind))
        object.__setattr__(self, "records", tuple(clean))


def load_behavior_log(path, delimiter=",", has_header=False):
    """Read a ``user,category,behavior`` file (behavior in click/collect/cart/pay)."""
    records = []
    header_pending = has_header
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if header_pending:
                header_pending = False
                continue
            parts = [p.strip() for p in line.split(delimiter)]
            if len(parts) < 3:
                raise DataError(f"{path}:{lineno}: expected user{delimiter}category{delimiter}behavior")
            if parts[2].lower() not in _BEHAVIOR_ALIASES:
                raise DataError(f"{path}:{lineno}: unknown behavior {parts[2]!r}")
            records.append(tuple(parts[:3]))
    return BehaviorLog(tuple(records))


def behaviors_to_interest(log, weights=DEFAULT_BEHAVIOR_WEIGHTS):
    """Interest points per (user, category): weighted sum of behaviour counts.

    Pairs with no records get no entry at all.
    """
    weights = tuple(float(w) for w in weights)
    if len(weights) != 4 or any(w < 0 for w in weights):
        raise ValueError("weights must be four non-negative numbers")
    weight_of = dict(zip(BEHAVIORS, weights))
    users, cats, points = {}, {}, {}
    for user, category, kind in log.records:
        u = users.setdefault(user, len(users))
        c = cats.setdefault(category, len(cats))
        points[(u, c)] = points.get((u, c), 0.0) + weight_of[kind]
    if not points:
        raise DataError("behavior log has no records")
    (rows, cols), vals = zip(*points.keys()), list(points.values())
    return SparseObservations(len(users), len(cats), rows, cols, vals, list(users), list(cats))
