"""Preprocessing and choice of the magnitude vectors.

Three kinds of data are handled:

* bounded on both sides, ``[r_min, r_max]`` (e.g. ratings 1..5);
* bounded on one side, typically non-negative counts;
* unbounded, where the observed min/max stand in for the bounds.

The centered variant shifts data so the bound is symmetric around zero; the
non-negative variant only needs the values to be >= 0. Either way the
shift is kept in a :class:`PreprocessRecord` so predictions can be mapped
back to the original scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .spherical import MagnitudePair
from .optimizer import CENTERED, NONNEGATIVE

__all__ = [
    "Contradiction",
    "HistoricalStats",
    "PreprocessRecord",
    "bounds_type3",
    "center_type1",
    "center_type2",
    "historical_magnitudes",
    "historical_stats",
    "magnitudes_type1_centered",
    "magnitudes_type1_nonneg",
    "prepare",
    "read_magnitudes",
    "shift_nonnegative",
    "write_magnitudes",
]

BOUNDED_BOTH = "bounded_both"
BOUNDED_ONE_SIDE = "bounded_one_side"
UNBOUNDED = "unbounded"
DATA_TYPES = (BOUNDED_BOTH, BOUNDED_ONE_SIDE, UNBOUNDED)

SCALAR = "scalar"
RANK1 = "per_entry_rank1"

POLICIES = ("reject_outlier", "raise_magnitude", "error")


@dataclass(frozen=True, eq=False)
class PreprocessRecord:
    """How observed values were transformed before training.

    The training value of cell (i, j) is ``V_ij - offset`` and, for
    ``offset_kind == "per_entry_rank1"``, additionally minus
    ``rank1_w[i] * rank1_h[j]``. :meth:`restore` undoes exactly this.
    """

    variant: str
    data_type: str
    offset_kind: str = SCALAR
    offset: float = 0.0
    r_min: float = None
    r_max: float = None
    rank1_w: np.ndarray = None
    rank1_h: np.ndarray = None

    def __post_init__(self):
        if self.variant not in (CENTERED, NONNEGATIVE):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.data_type not in DATA_TYPES:
            raise ValueError(f"unknown data type {self.data_type!r}")
        if self.offset_kind == RANK1:
            if self.rank1_w is None or self.rank1_h is None:
                raise ValueError("a rank-one offset needs both magnitude vectors")
        elif self.offset_kind != SCALAR:
            raise ValueError(f"unknown offset kind {self.offset_kind!r}")

    @property
    def magnitudes(self):
        """Magnitudes used for a rank-one offset (after any adjustment)."""
        if self.offset_kind != RANK1:
            return None
        return MagnitudePair(self.rank1_w, self.rank1_h)

    def entry_offsets(self, rows, cols):
        off = np.full(len(rows), float(self.offset))
        if self.offset_kind == RANK1:
            off += np.asarray(self.rank1_w)[rows] * np.asarray(self.rank1_h)[cols]
        return off

    def apply(self, data):
        return data.with_values(data.values - self.entry_offsets(data.rows, data.cols))

    def restore(self, raw, rows, cols):
        return np.asarray(raw, dtype=np.float64) + self.entry_offsets(rows, cols)


def _check_range(data, r_min, r_max):
    if not r_max > r_min:
        raise ValueError(f"r_max ({r_max}) must exceed r_min ({r_min})")
    bad = (data.values < r_min) | (data.values > r_max)
    if bad.any():
        e = int(np.argmax(bad))
        raise ValueError(
            f"value {data.values[e]!r} at (row {data.rows[e]}, col {data.cols[e]}) "
            f"outside the declared range [{r_min}, {r_max}]"
        )


def center_type1(data, r_min, r_max):
    """Centre data with a known range on the range midpoint."""
    _check_range(data, r_min, r_max)
    record = PreprocessRecord(
        CENTERED, BOUNDED_BOTH, SCALAR, (r_min + r_max) / 2.0, float(r_min), float(r_max)
    )
    return record.apply(data), record


def magnitudes_type1_centered(n, m, r_min, r_max):
    """Equal magnitudes whose products all equal the half-width of the range."""
    if n < 1 or m < 1:
        raise ValueError("magnitude vectors must be non-empty")
    if not r_max > r_min:
        raise ValueError("r_max must exceed r_min")
    r = np.sqrt((r_max - r_min) / 2.0)
    return MagnitudePair(np.full(n, r), np.full(m, r))


def shift_nonnegative(data, r_min, data_type=BOUNDED_BOTH, r_max=None):
    """Shift by the lower bound when it is negative, otherwise leave data alone."""
    if np.any(data.values < r_min):
        raise ValueError(f"observed values fall below r_min={r_min}")
    offset = float(r_min) if r_min < 0 else 0.0
    record = PreprocessRecord(NONNEGATIVE, data_type, SCALAR, offset, float(r_min), r_max)
    return record.apply(data), record


def magnitudes_type1_nonneg(n, m, r_max):
    """Equal magnitudes whose products all equal the upper bound."""
    if n < 1 or m < 1:
        raise ValueError("magnitude vectors must be non-empty")
    if not r_max > 0:
        raise ValueError("r_max must be positive for the non-negative variant")
    r = np.sqrt(r_max)
    return MagnitudePair(np.full(n, r), np.full(m, r))


class Contradiction(NamedTuple):
    """An observation above twice its magnitude product, i.e. outside the centred range."""

    entry: int
    row: int
    col: int
    value: float
    bound: float


def center_type2(data, mags, policy="raise_magnitude"):
    """Centre non-negative data on the per-cell magnitude product.

    Returns ``(centred data, record, contradictions)``. A contradiction is a
    value with ``V_ij > 2 r_w[i] r_h[j]``; ``policy`` decides its fate:

    ``reject_outlier``   drop the entry;
    ``raise_magnitude``  grow ``r_w[i]`` just enough that the worst entry of
                         row i sits on the upper bound;
    ``error``            raise ValueError.

    All contradictions (relative to the input magnitudes) are returned.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    if np.any(data.values < 0):
        raise ValueError("centring on magnitudes requires non-negative data")
    r_w = np.array(mags.r_w, dtype=np.float64)
    r_h = np.asarray(mags.r_h, dtype=np.float64)
    if len(r_w) != data.n_rows or len(r_h) != data.n_cols:
        raise ValueError("magnitude vectors do not match the data dimensions")

    bound = 2.0 * r_w[data.rows] * r_h[data.cols]
    over = np.flatnonzero(data.values > bound)
    found = [
        Contradiction(int(e), int(data.rows[e]), int(data.cols[e]), float(data.values[e]), float(bound[e]))
        for e in over
    ]
    if found and policy == "error":
        c = found[0]
        raise ValueError(
            f"{len(found)} observation(s) exceed twice their magnitude product, "
            f"first at (row {c.row}, col {c.col}): {c.value} > {c.bound}"
        )
    if policy == "reject_outlier" and found:
        keep = np.ones(data.nnz, dtype=bool)
        keep[over] = False
        data = data.subset(keep)
    elif policy == "raise_magnitude" and found:
        need = np.zeros(data.n_rows)
        np.maximum.at(need, data.rows[over], data.values[over] / (2.0 * r_h[data.cols[over]]))
        r_w = np.maximum(r_w, need)

    record = PreprocessRecord(CENTERED, BOUNDED_ONE_SIDE, RANK1, 0.0, 0.0, None, r_w, r_h.copy())
    return record.apply(data), record, found


def bounds_type3(data):
    """Observed minimum and maximum, used as bounds for data without any."""
    if data.nnz == 0:
        raise ValueError("no observations")
    return float(data.values.min()), float(data.values.max())


@dataclass(frozen=True, eq=False)
class HistoricalStats:
    """Per-row statistics of a historical matrix (rows may be users or items).

    ``has_data`` marks rows with at least one historical entry; their
    ``mean``/``sd`` are meaningful, the others hold 0.
    """

    mean: np.ndarray
    sd: np.ndarray
    count: np.ndarray
    has_data: np.ndarray
    global_mean: float
    global_sd: float
    rho: float = 0.05

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")


def historical_stats(history, axis="rows", rho=0.05):
    """Mean, population standard deviation and count per row (or column)."""
    if history.nnz == 0:
        raise ValueError("historical data is empty; no global statistics")
    if axis == "rows":
        idx, size = history.rows, history.n_rows
    elif axis == "cols":
        idx, size = history.cols, history.n_cols
    else:
        raise ValueError("axis must be 'rows' or 'cols'")
    v = history.values
    count = np.bincount(idx, minlength=size)
    has = count > 0
    total = np.bincount(idx, weights=v, minlength=size)
    mean = np.divide(total, count, out=np.zeros(size), where=has)
    sq = np.bincount(idx, weights=(v - mean[idx]) ** 2, minlength=size)
    sd = np.sqrt(np.divide(sq, count, out=np.zeros(size), where=has))
    return HistoricalStats(mean, sd, count, has, float(v.mean()), float(v.std()), rho)


def historical_magnitudes(stats, n_items, floor=1e-8):
    """Blend each row's own history with the global history.

    ``r_i = w_i sqrt(mean_i + sd_i) + (1 - w_i) sqrt(global_mean + global_sd)``
    with ``w_i = min(count_i / (rho * n_items), 1)``, and ``w_i = 0`` for rows
    without history. ``n_items`` is the size of the other dimension. Results
    are clipped below at ``floor`` to keep magnitudes strictly positive.
    """
    if n_items < 1:
        raise ValueError("n_items must be positive")
    glob = stats.global_mean + stats.global_sd
    if glob < 0:
        raise ValueError("global mean + sd is negative; shift the data to be non-negative first")
    own = stats.mean + stats.sd
    if np.any(own[stats.has_data] < 0):
        raise ValueError("a row has negative mean + sd; shift the data to be non-negative first")
    weight = np.where(stats.has_data, np.minimum(stats.count / (stats.rho * n_items), 1.0), 0.0)
    own_term = np.sqrt(np.where(stats.has_data, own, 0.0))
    r = weight * own_term + (1.0 - weight) * np.sqrt(glob)
    return np.maximum(r, floor)


def write_magnitudes(path, labels, values):
    """Two-column ``label,magnitude`` file."""
    with open(path, "w", encoding="utf-8") as fh:
        for label, v in zip(labels, values):
            fh.write(f"{label},{float(v)!r}\n")


def read_magnitudes(path, labels):
    """Read a ``label,magnitude`` file and align it to ``labels``."""
    found = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            label, _, value = line.rpartition(",")
            try:
                found[label.strip()] = float(value)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad magnitude {value!r}") from None
    missing = [lab for lab in labels if lab not in found]
    if missing:
        raise ValueError(f"{path}: no magnitude for {missing[0]!r} ({len(missing)} missing)")
    return np.array([found[lab] for lab in labels])


def prepare(data, variant, source="type1", r_min=None, r_max=None, history=None,
            rho=0.05, policy="raise_magnitude", external=None):
    """Preprocess ``data`` and pick magnitudes for one training run.

    ``source`` is ``"type1"`` (equal magnitudes from the range),
    ``"historical"`` (blend of ``history`` statistics, which must share the
    index space of ``data``) or ``"external"`` (a given MagnitudePair). With
    no ``r_min``/``r_max`` the observed extremes stand in for the bounds.

    The non-negative variant shifts by a negative lower bound; the centred
    variant centres on the range midpoint for ``type1`` and on the magnitude
    products otherwise (after the same shift). Returns
    ``(training data, magnitudes, record, contradictions)``.
    """
    if variant not in (CENTERED, NONNEGATIVE):
        raise ValueError(f"unknown variant {variant!r}")
    declared = r_min is not None and r_max is not None
    if not declared:
        lo, hi = bounds_type3(data)
        r_min = lo if r_min is None else r_min
        r_max = hi if r_max is None else r_max
    data_type = BOUNDED_BOTH if declared else (BOUNDED_ONE_SIDE if r_min >= 0 else UNBOUNDED)
    n, m = data.shape

    if source == "type1" and variant == CENTERED:
        if not declared:
            raise ValueError("centred type-1 magnitudes need a declared range")
        centred, record = center_type1(data, r_min, r_max)
        return centred, magnitudes_type1_centered(n, m, r_min, r_max), record, []

    shifted, record = shift_nonnegative(data, r_min, data_type, r_max)
    if source == "type1":
        mags = magnitudes_type1_nonneg(n, m, r_max - record.offset)
    elif source == "historical":
        if history is None:
            raise ValueError("historical magnitudes need historical data")
        if history.shape != data.shape:
            raise ValueError("history must share the dimensions of the data")
        hist = history.with_values(history.values - record.offset)
        mags = MagnitudePair(
            historical_magnitudes(historical_stats(hist, "rows", rho), m),
            historical_magnitudes(historical_stats(hist, "cols", rho), n),
        )
    elif source == "external":
        if external is None:
            raise ValueError("external magnitudes were not supplied")
        mags = external
    else:
        raise ValueError(f"unknown magnitude source {source!r}")

    if variant == NONNEGATIVE:
        return shifted, mags, record, []
    centred, rec2, found = center_type2(shifted, mags, policy)
    record = PreprocessRecord(
        CENTERED, data_type, RANK1, record.offset, float(r_min), float(r_max), rec2.rank1_w, rec2.rank1_h
    )
    return centred, rec2.magnitudes, record, found
