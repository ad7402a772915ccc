"""Unbounded reference factorisations: plain MF and masked NMF."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .optimizer import TrainTrace, _factor_grads, dynamic_descent, residuals
from .seeding import rng_stream

__all__ = ["BaselineModel", "init_factors", "train_mf", "train_nmf"]

_logger = logging.getLogger(__name__)

EPS = 1e-12


@dataclass(eq=False)
class BaselineModel:
    w: np.ndarray
    h: np.ndarray
    preprocess: object = None

    @property
    def k(self):
        return self.w.shape[1]


def init_factors(data, k, seed):
    """Uniform (0, 1) entries scaled by sqrt(mean|V| / k).

    The absolute value only matters for signed data, where a negative mean
    would otherwise collapse the start onto the W = H = 0 saddle.
    """
    rng = rng_stream(seed, "init")
    scale = math.sqrt(float(np.mean(np.abs(data.values))) / k) if data.nnz else 0.0
    w = rng.uniform(0.0, 1.0, size=(data.n_rows, k)) * scale
    h = rng.uniform(0.0, 1.0, size=(k, data.n_cols)) * scale
    return w, h


def _check(data, k):
    if data.nnz == 0:
        raise ValueError("cannot train on an empty observation set")
    if k < 1:
        raise ValueError("k must be at least 1")


def train_mf(data, k, cfg, init=None):
    """Gradient descent on W and H directly, same step and stopping rules as MBMF.

    ``cfg.k`` is ignored in favour of ``k`` so that k = 1 is allowed here.
    Returns ``(BaselineModel, TrainTrace)``.
    """
    _check(data, k)
    w0, h0 = init if init is not None else init_factors(data, k, cfg.seed)

    def loss(params):
        res = residuals(data, *params)
        return float(res @ res), res

    def gradient(params, res):
        return _factor_grads(data, params[0], params[1], res)

    (w, h), trace = dynamic_descent((np.array(w0, dtype=float), np.array(h0, dtype=float)), loss, gradient, cfg)
    return BaselineModel(w, h), trace


def train_nmf(data, k, cfg, init=None):
    """Multiplicative updates restricted to observed cells.

    ``W <- W * ((Z*V) H^T) / ((Z*(WH)) H^T)`` then the analogous H update,
    with ``EPS`` added to each denominator. Stops like MBMF on a stalled
    objective (or at ``cfg.max_iters``). Returns ``(BaselineModel, TrainTrace)``.
    """
    _check(data, k)
    if np.any(data.values < 0):
        raise ValueError("NMF needs non-negative observations")
    w, h = init if init is not None else init_factors(data, k, cfg.seed)
    w, h = np.array(w, dtype=float), np.array(h, dtype=float)
    zv = data.to_csr()
    zv_t = zv.T.tocsr()

    def masked_product(w, h):
        return data.to_csr(residuals(data, w, h) + data.values)

    res = residuals(data, w, h)
    f = float(res @ res)
    trace = TrainTrace(initial_objective=f)
    trace.reason = "max_iters"
    streak = 0
    for _ in range(cfg.max_iters):
        if f == 0.0:
            trace.reason = "zero_residual"
            break
        zwh = masked_product(w, h)
        w = w * (zv @ h.T) / ((zwh @ h.T) + EPS)
        zwh = masked_product(w, h)
        h = h * (zv_t @ w).T / ((zwh.T @ w).T + EPS)
        res = residuals(data, w, h)
        fc = float(res @ res)
        trace.objectives.append(fc)
        trace.lr_phi.append(float("nan"))
        trace.lr_theta.append(float("nan"))
        trace.accepted.append(True)
        streak = streak + 1 if f - fc < cfg.tol else 0
        f = fc
        if streak >= cfg.patience:
            trace.reason = "converged"
            break
    _logger.info("nmf stopped after %d iterations (%s), objective %.6g", trace.iterations, trace.reason, f)
    return BaselineModel(w, h), trace
