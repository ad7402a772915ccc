"""Accuracy metrics, synthetic data and the prediction-variance experiment."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .baselines import train_mf, train_nmf
from .data import SparseObservations
from .magnitudes import (
    center_type1,
    magnitudes_type1_centered,
    magnitudes_type1_nonneg,
    shift_nonnegative,
)
from .optimizer import CENTERED, NONNEGATIVE, TrainConfig, predict, predict_raw, train
from .seeding import rng_stream

__all__ = [
    "EvalReport",
    "VarianceReport",
    "evaluate",
    "f1_score",
    "generate_synthetic",
    "mae",
    "rmse",
    "standard_algorithms",
    "variance_experiment",
    "write_eval_csv",
    "write_variance_csv",
]


def _masked(truth, predictions, mask):
    truth = np.asarray(truth, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if truth.shape != predictions.shape:
        raise ValueError("truth and predictions must have the same shape")
    if mask is not None:
        mask = np.asarray(mask)
        truth, predictions = truth[mask], predictions[mask]
    if truth.size == 0:
        raise ValueError("no entries to evaluate")
    return truth, predictions


def rmse(truth, predictions, mask=None):
    """Root mean squared error over the masked cells (all cells if ``mask`` is None)."""
    t, p = _masked(truth, predictions, mask)
    d = t - p
    return math.sqrt(float(d @ d) / d.size)


def mae(truth, predictions, mask=None):
    """Mean absolute error over the masked cells."""
    t, p = _masked(truth, predictions, mask)
    return float(np.abs(t - p).sum()) / t.size


def _f1(tp, n_pred, n_true):
    if n_pred == 0 and n_true == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_true
    return 2.0 * precision * recall / (precision + recall)


def f1_score(users, truth, predictions, mask=None, average="micro"):
    """F1 (as a percentage) of above-average recommendations.

    For each user the truth-side threshold is the mean true value over that
    user's evaluated cells, and an item counts as recommended when its value
    exceeds it; the predicted side uses the mean prediction the same way.
    ``average="micro"`` pools every (user, item) decision before computing
    precision and recall; ``"macro"`` averages per-user F1 scores. When
    both sets are empty the score is 100.
    """
    if average not in ("micro", "macro"):
        raise ValueError("average must be 'micro' or 'macro'")
    users = np.asarray(users)
    t, p = _masked(truth, predictions, None)
    if mask is not None:
        mask = np.asarray(mask)
        users, t, p = users[mask], t[mask], p[mask]
    if t.size == 0:
        raise ValueError("no entries to evaluate")
    uniq, inv = np.unique(users, return_inverse=True)
    counts = np.bincount(inv)
    t_thr = np.bincount(inv, weights=t) / counts
    p_thr = np.bincount(inv, weights=p) / counts
    rec_true = t > t_thr[inv]
    rec_pred = p > p_thr[inv]
    hit = rec_true & rec_pred
    if average == "micro":
        return 100.0 * _f1(int(hit.sum()), int(rec_pred.sum()), int(rec_true.sum()))
    tp = np.bincount(inv, weights=hit)
    npred = np.bincount(inv, weights=rec_pred)
    ntrue = np.bincount(inv, weights=rec_true)
    scores = [_f1(a, b, c) for a, b, c in zip(tp, npred, ntrue)]
    return 100.0 * float(np.mean(scores))


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    mae: float
    f1: float
    n_eval_entries: int


def evaluate(users, truth, predictions, average="micro"):
    """RMSE, MAE and F1 on one set of evaluated cells."""
    return EvalReport(
        rmse(truth, predictions),
        mae(truth, predictions),
        f1_score(users, truth, predictions, average=average),
        int(np.asarray(truth).size),
    )


def generate_synthetic(n, m, value_range=(0.0, 10.0), density=0.2, seed=0):
    """Random full matrix scaled to ``value_range`` and an observed subset.

    The observed part keeps ``ceil(density * n * m)`` cells and has no empty
    row or column: a random covering set of ``max(n, m)`` cells is kept
    first, the rest are drawn uniformly. Returns ``(full, observed)``.
    """
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    lo, hi = map(float, value_range)
    if not hi > lo:
        raise ValueError("value_range must be increasing")
    total = n * m
    keep = math.ceil(density * total - 1e-9)
    if keep < max(n, m):
        raise ValueError(
            f"density {density} keeps {keep} cells, fewer than the {max(n, m)} "
            f"needed to leave no empty row or column"
        )
    rng = rng_stream(seed, "synthetic")
    raw = rng.random((n, m))
    span = raw.max() - raw.min()
    full = lo + (raw - raw.min()) / span * (hi - lo) if span > 0 else np.full((n, m), lo)
    full_obs = SparseObservations.from_dense(full)

    pick = rng_stream(seed, "synthetic-mask")
    rperm, cperm = pick.permutation(n), pick.permutation(m)
    cover = np.arange(max(n, m))
    flat = np.unique(rperm[cover % n] * m + cperm[cover % m])
    rest = np.setdiff1d(np.arange(total), flat, assume_unique=True)
    extra = pick.choice(rest, size=keep - len(flat), replace=False)
    chosen = np.sort(np.concatenate([flat, extra]))
    mask = np.zeros(total, dtype=bool)
    mask[chosen] = True
    return full_obs, SparseObservations.from_dense(full, mask.reshape(n, m))


@dataclass(frozen=True, eq=False)
class VarianceReport:
    """Spread of predictions on missing cells across repeated runs.

    ``sigma[c]`` is the population standard deviation of the predictions
    for cell ``(rows[c], cols[c])`` across ``repetitions`` runs.
    """

    ave_sigma: float
    max_sigma: float
    rows: np.ndarray
    cols: np.ndarray
    sigma: np.ndarray
    repetitions: int


def _mbmf_n(lo, hi, cfg_kwargs):
    def run(observed, pairs, k, seed):
        data, record = shift_nonnegative(observed, lo, r_max=hi)
        mags = magnitudes_type1_nonneg(observed.n_rows, observed.n_cols, hi - record.offset)
        cfg = TrainConfig(k=k, seed=seed, variant=NONNEGATIVE, **cfg_kwargs)
        model, _ = train(data, mags, cfg, preprocess=record)
        return predict(model, pairs)

    return run


def _mbmf_c(lo, hi, cfg_kwargs):
    def run(observed, pairs, k, seed):
        data, record = center_type1(observed, lo, hi)
        mags = magnitudes_type1_centered(observed.n_rows, observed.n_cols, lo, hi)
        cfg = TrainConfig(k=k, seed=seed, variant=CENTERED, **cfg_kwargs)
        model, _ = train(data, mags, cfg, preprocess=record)
        return predict(model, pairs)

    return run


def _baseline(fit, cfg_kwargs):
    def run(observed, pairs, k, seed):
        cfg = TrainConfig(k=max(k, 2), seed=seed, **cfg_kwargs)
        model, _ = fit(observed, k, cfg)
        return predict_raw(model, pairs)

    return run


def standard_algorithms(value_range=(0.0, 10.0), **cfg_kwargs):
    """Name -> ``run(observed, pairs, k, seed)`` for mf, nmf, mbmf-n and mbmf-c.

    The MBMF variants take their bounds from ``value_range``; extra keyword
    arguments go to :class:`TrainConfig`.
    """
    lo, hi = map(float, value_range)
    return {
        "mf": _baseline(train_mf, cfg_kwargs),
        "nmf": _baseline(train_nmf, cfg_kwargs),
        "mbmf-n": _mbmf_n(lo, hi, cfg_kwargs),
        "mbmf-c": _mbmf_c(lo, hi, cfg_kwargs),
    }


def variance_experiment(
    algorithms, n, m, density, repetitions, k, seed, value_range=(0.0, 10.0), data=None
):
    """Run each algorithm ``repetitions`` times and measure prediction spread.

    ``algorithms`` maps a name to ``run(observed, pairs, k, seed)`` returning
    predictions for the given (row, col) pairs. Each repetition gets its own
    initialisation seed; the data is generated once from ``seed`` unless a
    ``(full, observed)`` pair is passed as ``data``. Returns name -> report.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    full, observed = data if data is not None else generate_synthetic(n, m, value_range, density, seed)
    missing = np.ones(observed.shape, dtype=bool)
    missing[observed.rows, observed.cols] = False
    rows, cols = np.nonzero(missing)
    pairs = np.column_stack([rows, cols])
    rep_seeds = [int(rng_stream(seed, "repetition", r).integers(2**31)) for r in range(repetitions)]
    reports = {}
    for name, run in algorithms.items():
        preds = np.empty((repetitions, len(rows)))
        for r, s in enumerate(rep_seeds):
            preds[r] = run(observed, pairs, k, s)
        sigma = preds.std(axis=0)
        reports[name] = VarianceReport(
            float(sigma.mean()) if sigma.size else 0.0,
            float(sigma.max()) if sigma.size else 0.0,
            rows,
            cols,
            sigma,
            repetitions,
        )
    return reports


def write_eval_csv(path, rows):
    """``algorithm,K,fold,rmse,mae,f1`` rows; ``fold`` is an index or ``avg``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["algorithm", "K", "fold", "rmse", "mae", "f1"])
        for alg, k, fold, rep in rows:
            out.writerow([alg, k, fold, repr(rep.rmse), repr(rep.mae), repr(rep.f1)])


def write_variance_csv(path, rows):
    """``algorithm,K,ave_sigma,max_sigma`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["algorithm", "K", "ave_sigma", "max_sigma"])
        for alg, k, rep in rows:
            out.writerow([alg, k, repr(rep.ave_sigma), repr(rep.max_sigma)])
