"""Versioned plain-text model files.

Layout::

    # mbmf model
    format 1
    n <N>
    m <M>
    k <K>
    [preprocess]            key value lines, optional
    [rank1_w] / [rank1_h]   one value per line, only for rank-one offsets
    [row_labels] / [col_labels]
    [r_w] / [r_h]           magnitudes, absent for unbounded baselines
    [w]                     N lines of K values
    [h]                     M lines of K values (the columns of H)

Reals are written with 17 significant digits so reading a file back gives
bit-identical arrays.
"""

from __future__ import annotations

import numpy as np

from .magnitudes import PreprocessRecord
from .spherical import FactorModel, MagnitudePair

__all__ = ["FORMAT_VERSION", "ModelFileError", "load_model", "save_model"]

FORMAT_VERSION = 1
_MAGIC = "# mbmf model"


class ModelFileError(ValueError):
    pass


def _num(x):
    return format(float(x), ".17g")


def _opt(x):
    return "none" if x is None else _num(x)


def save_model(model, path):
    """Write a :class:`FactorModel` (or a baseline with ``w``/``h`` only)."""
    w = np.asarray(model.w, dtype=np.float64)
    h = np.asarray(model.h, dtype=np.float64)
    n, k = w.shape
    m = h.shape[1]
    rec = getattr(model, "preprocess", None)
    mags = getattr(model, "magnitudes", None)
    row_labels = getattr(model, "row_labels", None) or [str(i) for i in range(n)]
    col_labels = getattr(model, "col_labels", None) or [str(j) for j in range(m)]
    lines = [_MAGIC, f"format {FORMAT_VERSION}", f"n {n}", f"m {m}", f"k {k}"]
    if rec is not None:
        lines += [
            "[preprocess]",
            f"variant {rec.variant}",
            f"data_type {rec.data_type}",
            f"offset_kind {rec.offset_kind}",
            f"offset {_num(rec.offset)}",
            f"r_min {_opt(rec.r_min)}",
            f"r_max {_opt(rec.r_max)}",
        ]
        if rec.rank1_w is not None:
            lines.append("[rank1_w]")
            lines += [_num(v) for v in rec.rank1_w]
            lines.append("[rank1_h]")
            lines += [_num(v) for v in rec.rank1_h]
    lines.append("[row_labels]")
    lines += list(row_labels)
    lines.append("[col_labels]")
    lines += list(col_labels)
    if mags is not None:
        lines.append("[r_w]")
        lines += [_num(v) for v in mags.r_w]
        lines.append("[r_h]")
        lines += [_num(v) for v in mags.r_h]
    lines.append("[w]")
    lines += [" ".join(_num(v) for v in row) for row in w]
    lines.append("[h]")
    lines += [" ".join(_num(v) for v in col) for col in h.T]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


_SECTIONS = ("preprocess", "rank1_w", "rank1_h", "row_labels", "col_labels", "r_w", "r_h", "w", "h")


def _sections(lines, n, m):
    """Split the body into sections.

    Every section but ``[preprocess]`` has a known number of lines (n or m),
    so labels that happen to look like section headers are read as labels.
    """
    sizes = {"preprocess": None, "rank1_w": n, "r_w": n, "row_labels": n, "w": n,
             "rank1_h": m, "r_h": m, "col_labels": m, "h": m}
    sections, pos = {}, 0
    while pos < len(lines):
        line = lines[pos]
        name = line[1:-1] if line.startswith("[") and line.endswith("]") else None
        if name not in sizes:
            raise ModelFileError(f"line {pos + 1}: expected a section header, got {line!r}")
        if name in sections:
            raise ModelFileError(f"duplicate section [{name}]")
        pos += 1
        size = sizes[name]
        if size is None:
            end = pos
            while end < len(lines) and not (lines[end].startswith("[") and lines[end][1:-1] in sizes):
                end += 1
        else:
            end = pos + size
            if end > len(lines):
                raise ModelFileError(f"section [{name}] is truncated")
        sections[name] = lines[pos:end]
        pos = end
    return sections


def _floats(lines, count, width, name):
    try:
        arr = np.array([[float(t) for t in line.split()] for line in lines], dtype=np.float64)
    except ValueError:
        raise ModelFileError(f"non-numeric value in [{name}]") from None
    if arr.size == 0:
        arr = arr.reshape(0, width)
    if arr.shape != (count, width):
        raise ModelFileError(f"[{name}] has shape {arr.shape}, expected {(count, width)}")
    return arr


def load_model(path):
    """Read a model file; returns a :class:`FactorModel` (``magnitudes`` may be None)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != _MAGIC:
        raise ModelFileError(f"{path}: not an mbmf model file")
    header = lines[1:5]
    try:
        meta = dict(line.split(" ", 1) for line in header)
        version = int(meta["format"])
        n, m, k = int(meta["n"]), int(meta["m"]), int(meta["k"])
    except (KeyError, ValueError):
        raise ModelFileError(f"{path}: malformed header") from None
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format {version}")
    sec = _sections(lines[5:], n, m)
    for name in ("row_labels", "col_labels", "w", "h"):
        if name not in sec:
            raise ModelFileError(f"{path}: missing section [{name}]")
    w = _floats(sec["w"], n, k, "w")
    h = np.ascontiguousarray(_floats(sec["h"], m, k, "h").T)
    mags = None
    if "r_w" in sec:
        mags = MagnitudePair(_floats(sec["r_w"], n, 1, "r_w")[:, 0], _floats(sec["r_h"], m, 1, "r_h")[:, 0])
    rec = None
    if "preprocess" in sec:
        p = dict(line.split(" ", 1) for line in sec["preprocess"] if line)
        opt = lambda s: None if s == "none" else float(s)  # noqa: E731
        rank1_w = rank1_h = None
        if "rank1_w" in sec:
            rank1_w = _floats(sec["rank1_w"], n, 1, "rank1_w")[:, 0]
            rank1_h = _floats(sec["rank1_h"], m, 1, "rank1_h")[:, 0]
        rec = PreprocessRecord(
            p["variant"], p["data_type"], p["offset_kind"], float(p["offset"]),
            opt(p["r_min"]), opt(p["r_max"]), rank1_w, rank1_h,
        )
    row_labels, col_labels = tuple(sec["row_labels"]), tuple(sec["col_labels"])
    if len(row_labels) != n or len(col_labels) != m:
        raise ModelFileError(f"{path}: label count does not match dimensions")
    return FactorModel(w, h, mags, rec, row_labels, col_labels)
