"""MBMF training: gradient descent on the angle matrices.

The objective is the squared residual over observed cells,
``F = || Z * (V - W H) ||_F^2``, with W and H rebuilt from the angles on
every step, so the row/column magnitudes never drift. Each iteration takes
one simultaneous step on phi and theta and keeps it only if F did not go up;
step sizes grow on success and shrink (with rollback) on failure.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .seeding import rng_stream
from .spherical import (
    AngleState,
    FactorModel,
    build_factors,
    grad_h_wrt_theta,
    grad_w_wrt_phi,
)

__all__ = [
    "DivergenceError",
    "TrainConfig",
    "TrainTrace",
    "grad_f_wrt_angles",
    "grad_f_wrt_angles_elementwise",
    "grad_f_wrt_factors",
    "objective",
    "predict",
    "predict_raw",
    "residuals",
    "train",
]

_logger = logging.getLogger(__name__)

CENTERED = "centered"
NONNEGATIVE = "nonnegative"


@dataclass(frozen=True)
class TrainConfig:
    k: int
    max_iters: int = 500
    tol: float = 1e-5
    patience: int = 10
    lr_phi: float = 0.1
    lr_theta: float = 0.1
    lr_grow: float = 1.1
    lr_shrink: float = 2.0
    seed: int = 0
    variant: str = NONNEGATIVE

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2: a 1-dimensional factor has no angles")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not (self.lr_phi > 0 and self.lr_theta > 0):
            raise ValueError("initial step sizes must be positive")
        if not (self.lr_grow > 1 and self.lr_shrink > 1):
            raise ValueError("lr_grow and lr_shrink must both exceed 1")
        if self.variant not in (CENTERED, NONNEGATIVE):
            raise ValueError(f"variant must be {CENTERED!r} or {NONNEGATIVE!r}")


@dataclass
class TrainTrace:
    """Per-iteration record of a training run.

    ``objectives[t]`` is the objective of the step tried at iteration t, and
    ``lr_phi[t]``/``lr_theta[t]`` the step sizes it used. Rejected steps are
    rolled back, so the accepted objectives form a non-increasing sequence.
    """

    initial_objective: float
    objectives: list = field(default_factory=list)
    lr_phi: list = field(default_factory=list)
    lr_theta: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    reason: str = ""

    @property
    def iterations(self):
        return len(self.objectives)

    @property
    def final_objective(self):
        acc = [f for f, ok in zip(self.objectives, self.accepted) if ok]
        return acc[-1] if acc else self.initial_objective

    def accepted_objectives(self):
        return [self.initial_objective] + [f for f, ok in zip(self.objectives, self.accepted) if ok]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(["iter", "objective", "lr_phi", "lr_theta", "accepted"])
            for t, row in enumerate(zip(self.objectives, self.lr_phi, self.lr_theta, self.accepted)):
                f, a, b, ok = row
                out.writerow([t + 1, repr(f), repr(a), repr(b), int(ok)])


class DivergenceError(RuntimeError):
    """Training produced non-finite values; ``trace`` holds the run so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def _check_dims(data, w, h):
    if w.shape[0] != data.n_rows or h.shape[1] != data.n_cols or w.shape[1] != h.shape[0]:
        raise ValueError(
            f"factors {w.shape} x {h.shape} do not fit a {data.n_rows} x {data.n_cols} matrix"
        )


@njit(cache=True, nogil=True)
def _sampled_dot(order, rows, cols, w, ht, out):
    # Walk entries in row-sorted order so rows of w are read sequentially.
    k = w.shape[1]
    for i in range(order.shape[0]):
        e = order[i]
        r = rows[e]
        c = cols[e]
        acc = 0.0
        for f in range(k):
            acc += w[r, f] * ht[c, f]
        out[e] = acc


def _predicted_at(rows, cols, w, ht, order=None):
    """``w[rows[e]] . ht[cols[e]]`` for every e without materialising the gathers."""
    if order is None:
        order = np.lexsort((cols, rows))
    out = np.empty(len(rows))
    w = np.ascontiguousarray(w, dtype=np.float64)
    ht = np.ascontiguousarray(ht, dtype=np.float64)
    _sampled_dot(order, rows, cols, w, ht, out)
    return out


def residuals(data, w, h):
    """``(W H)_ij - V_ij`` at every observed entry, in entry order."""
    _check_dims(data, w, h)
    return _predicted_at(data.rows, data.cols, w, h.T, data.csr_order) - data.values


def objective(data, model):
    """Squared Frobenius norm of the residual restricted to observed cells."""
    res = residuals(data, model.w, model.h)
    return float(res @ res)


def _factor_grads(data, w, h, res):
    e = data.to_csr(res)
    grad_w = 2.0 * (e @ h.T)
    grad_h = 2.0 * (e.T @ w).T
    return np.asarray(grad_w), np.ascontiguousarray(grad_h)


def grad_f_wrt_factors(data, model):
    """Gradients of the objective with respect to W and H.

    ``gradW = 2 (Z*(WH) - Z*V) H^T`` and ``gradH = 2 W^T (Z*(WH) - Z*V)``;
    the masked residual is held as a sparse matrix on the observed pattern.
    """
    res = residuals(data, model.w, model.h)
    return _factor_grads(data, model.w, model.h, res)


def _angle_grads(angles, mags, grad_w, grad_h):
    # The factor gradient is broadcast along the angle axis (a virtual copy per
    # angle) and contracted with the derivative tensor over the K axis.
    t_w = grad_w_wrt_phi(angles.phi, mags.r_w)
    t_h = grad_h_wrt_theta(angles.theta, mags.r_h)
    d_phi = (grad_w[:, :, None] * t_w).sum(axis=1)
    d_theta = (grad_h[None, :, :] * t_h).sum(axis=1)
    return d_phi, d_theta


def grad_f_wrt_angles(data, angles, mags):
    """Gradients of the objective with respect to phi (N x K-1) and theta (K-1 x M)."""
    model = build_factors(angles, mags)
    grad_w, grad_h = grad_f_wrt_factors(data, model)
    return _angle_grads(angles, mags, grad_w, grad_h)


def _aux_derivative(angles_row, b):
    """Unit-radius derivative of one spherical vector with respect to angle b.

    Built from the auxiliary sine vector ``s(., b)`` and cosine vector
    ``c(., b)`` one element at a time (0-based indices).
    """
    k = len(angles_row) + 1
    lead = math.prod(math.sin(angles_row[p]) for p in range(b))
    s = np.zeros(k)
    c = np.zeros(k)
    for j in range(k):
        if j < b:
            continue
        if j == b:
            s[j] = -lead * math.sin(angles_row[b])
            c[j] = 1.0
            continue
        s[j] = lead * math.prod(math.sin(angles_row[p]) for p in range(b + 1, j))
        if j < k - 1:
            c[j] = math.cos(angles_row[j]) * math.cos(angles_row[b])
        else:
            c[j] = math.cos(angles_row[b])
    return s * c


def grad_f_wrt_angles_elementwise(data, angles, mags):
    """Reference angle gradients, one element at a time.

    Uses dense Z and V and the per-element chain rule. Slow: meant as a
    cross-check of :func:`grad_f_wrt_angles` on small problems.
    """
    model = build_factors(angles, mags)
    w, h = model.w, model.h
    z = data.indicator()
    v = data.to_dense()
    wh = w @ h
    gw = 2.0 * ((z * wh) @ h.T - (z * v) @ h.T)
    gh = 2.0 * (w.T @ (z * wh) - w.T @ (z * v))
    n, km1 = angles.phi.shape
    m = angles.theta.shape[1]
    d_phi = np.zeros((n, km1))
    d_theta = np.zeros((km1, m))
    for a in range(n):
        for b in range(km1):
            d_phi[a, b] = gw[a] @ (mags.r_w[a] * _aux_derivative(angles.phi[a], b))
    for b in range(m):
        for a in range(km1):
            d_theta[a, b] = gh[:, b] @ (mags.r_h[b] * _aux_derivative(angles.theta[:, b], a))
    return d_phi, d_theta


def dynamic_descent(params, loss, gradient, cfg, trace_every=50):
    """Gradient descent with grow-on-success / shrink-and-rollback steps.

    ``params`` is a pair of arrays, ``loss(params)`` returns ``(value, aux)``
    and ``gradient(params, aux)`` a pair of arrays shaped like ``params``.
    Both arrays step together and share one accept/reject decision; their
    step sizes start at ``cfg.lr_phi``/``cfg.lr_theta`` and scale together.
    Stops after ``cfg.max_iters`` tried steps, or once ``cfg.patience``
    consecutive accepted steps each lowered the loss by less than ``cfg.tol``.
    """
    f, aux = loss(params)
    trace = TrainTrace(initial_objective=f)
    if not math.isfinite(f):
        raise DivergenceError("initial objective is not finite", trace)
    lr = [cfg.lr_phi, cfg.lr_theta]
    grad = None
    streak = 0
    trace.reason = "max_iters"
    for it in range(cfg.max_iters):
        if f == 0.0:
            trace.reason = "zero_residual"
            break
        if grad is None:
            grad = gradient(params, aux)
            if not all(np.all(np.isfinite(g)) for g in grad):
                raise DivergenceError(f"non-finite gradient at iteration {it}", trace)
            if not any(np.any(g) for g in grad):
                trace.reason = "stationary"
                break
        cand = (params[0] - lr[0] * grad[0], params[1] - lr[1] * grad[1])
        fc, aux_c = loss(cand)
        ok = bool(fc <= f)  # False for NaN
        trace.objectives.append(float(fc))
        trace.lr_phi.append(lr[0])
        trace.lr_theta.append(lr[1])
        trace.accepted.append(ok)
        if ok:
            streak = streak + 1 if f - fc < cfg.tol else 0
            params, f, aux, grad = cand, fc, aux_c, None
            lr = [lr[0] * cfg.lr_grow, lr[1] * cfg.lr_grow]
            if streak >= cfg.patience:
                trace.reason = "converged"
                break
        else:
            lr = [lr[0] / cfg.lr_shrink, lr[1] / cfg.lr_shrink]
            if lr[0] == 0.0 and lr[1] == 0.0:
                trace.reason = "step_underflow"
                break
        if trace_every and (it + 1) % trace_every == 0:
            _logger.debug("iter %d objective %.6g lr %.3g", it + 1, f, lr[0])
    _logger.info("stopped after %d iterations (%s), objective %.6g", trace.iterations, trace.reason, f)
    return params, trace


def train(data, mags, cfg, init=None, elementwise=False, preprocess=None):
    """Fit an MBMF model; returns ``(FactorModel, TrainTrace)``.

    ``init`` optionally supplies starting angles; otherwise they are drawn
    from the ``init`` stream of ``cfg.seed``. ``elementwise`` switches the
    gradient to the slow per-element reference path.
    """
    if data.nnz == 0:
        raise ValueError("cannot train on an empty observation set")
    if len(mags.r_w) != data.n_rows or len(mags.r_h) != data.n_cols:
        raise ValueError("magnitude vectors do not match the data dimensions")
    if init is None:
        init = AngleState.random(data.n_rows, data.n_cols, cfg.k, rng_stream(cfg.seed, "init"))
    elif init.k != cfg.k:
        raise ValueError("initial angles have the wrong latent dimension")

    def loss(params):
        model = build_factors(AngleState(*params), mags)
        res = residuals(data, model.w, model.h)
        return float(res @ res), (model, res)

    def gradient(params, aux):
        angles = AngleState(*params)
        if elementwise:
            return grad_f_wrt_angles_elementwise(data, angles, mags)
        model, res = aux
        grad_w, grad_h = _factor_grads(data, model.w, model.h, res)
        return _angle_grads(angles, mags, grad_w, grad_h)

    params, trace = dynamic_descent((init.phi.copy(), init.theta.copy()), loss, gradient, cfg)
    model = build_factors(AngleState(*params), mags, preprocess)
    model.row_labels, model.col_labels = data.row_labels, data.col_labels
    return model, trace


def _pairs(pairs, model):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    rows, cols = pairs[:, 0], pairs[:, 1]
    n, m = model.w.shape[0], model.h.shape[1]
    bad = (rows < 0) | (rows >= n) | (cols < 0) | (cols >= m)
    if bad.any():
        i = int(np.argmax(bad))
        raise IndexError(f"pair ({rows[i]}, {cols[i]}) outside a {n} x {m} model")
    return rows, cols


def predict_raw(model, pairs):
    """Inner products ``W[i] . H[:, j]`` on the training scale."""
    rows, cols = _pairs(pairs, model)
    return _predicted_at(rows, cols, model.w, model.h.T)


def predict(model, pairs):
    """Predictions on the original data scale (preprocessing offsets added back)."""
    rows, cols = _pairs(pairs, model)
    raw = _predicted_at(rows, cols, model.w, model.h.T)
    if model.preprocess is None:
        return raw
    return model.preprocess.restore(raw, rows, cols)
