"""Hyperspherical parameterisation of fixed-magnitude factor vectors.

A K-vector of norm r is written with K-1 angles::

    x_1 = r cos(p_1)
    x_k = r sin(p_1) ... sin(p_{k-1}) cos(p_k)      1 < k < K
    x_K = r sin(p_1) ... sin(p_{K-1})

i.e. ``x = r * s(p) * c(p)`` with ``s`` the running product of sines
(``s_1 = 1``) and ``c`` the cosines padded with a trailing 1. Rows of W and
columns of H are built this way from the angle matrices ``phi`` (N x K-1)
and ``theta`` (K-1 x M), so the norm constraints hold by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = [
    "AngleState",
    "FactorModel",
    "MagnitudePair",
    "build_factors",
    "cartesian_to_spherical",
    "grad_h_wrt_theta",
    "grad_w_wrt_phi",
    "rows_from_angles",
    "spherical_to_cartesian",
]

TWO_PI = 2.0 * np.pi


def _check_k(n_angles):
    if n_angles < 1:
        raise ValueError("latent dimension K must be at least 2 (one or more angles)")


@dataclass(frozen=True, eq=False)
class MagnitudePair:
    """Strictly positive row magnitudes ``r_w`` (length N) and column magnitudes ``r_h`` (length M)."""

    r_w: np.ndarray
    r_h: np.ndarray

    def __post_init__(self):
        r_w = np.array(self.r_w, dtype=np.float64).reshape(-1)
        r_h = np.array(self.r_h, dtype=np.float64).reshape(-1)
        for name, r in (("r_w", r_w), ("r_h", r_h)):
            if not np.all(np.isfinite(r)) or np.any(r <= 0):
                raise ValueError(f"{name} must contain finite, strictly positive magnitudes")
            r.setflags(write=False)
        object.__setattr__(self, "r_w", r_w)
        object.__setattr__(self, "r_h", r_h)

    def range_matrix(self):
        """Rank-one matrix R with R_ij = r_w[i] * r_h[j], the per-cell prediction bound."""
        return np.outer(self.r_w, self.r_h)


@dataclass(eq=False)
class AngleState:
    """Angle matrices: ``phi`` is N x (K-1), ``theta`` is (K-1) x M."""

    phi: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=np.float64))
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=np.float64))
        _check_k(self.phi.shape[1])
        if self.theta.shape[0] != self.phi.shape[1]:
            raise ValueError("phi and theta must carry the same number of angles")
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.theta))):
            raise ValueError("angles must be finite")

    @property
    def k(self):
        return self.phi.shape[1] + 1

    @classmethod
    def random(cls, n, m, k, rng):
        """Uniform angles in [0, pi] for all but the last, [0, 2 pi) for the last."""
        _check_k(k - 1)
        hi = np.full(k - 1, np.pi)
        hi[-1] = TWO_PI
        phi = rng.uniform(0.0, 1.0, size=(n, k - 1)) * hi
        theta = (rng.uniform(0.0, 1.0, size=(m, k - 1)) * hi).T
        return cls(phi, np.ascontiguousarray(theta))

    def copy(self):
        return AngleState(self.phi.copy(), self.theta.copy())


@dataclass(eq=False)
class FactorModel:
    """Factor matrices ``w`` (N x K) and ``h`` (K x M) with their magnitudes.

    ``preprocess`` is the record of the transformation applied to the data
    before training (see :mod:`mbmf.magnitudes`); predictions add its offset
    back. ``None`` means the model predicts on the raw data scale.
    """

    w: np.ndarray
    h: np.ndarray
    magnitudes: MagnitudePair
    preprocess: Any = None
    row_labels: tuple = field(default=None)
    col_labels: tuple = field(default=None)

    @property
    def k(self):
        return self.w.shape[1]

    def magnitude_error(self):
        """Largest relative deviation of a row/column norm from its magnitude."""
        ew = np.abs(np.linalg.norm(self.w, axis=1) - self.magnitudes.r_w) / self.magnitudes.r_w
        eh = np.abs(np.linalg.norm(self.h, axis=0) - self.magnitudes.r_h) / self.magnitudes.r_h
        return float(max(ew.max(initial=0.0), eh.max(initial=0.0)))


def _sines_cosines(angles):
    """Auxiliary matrices S and C for a stack of angle rows (shape n x (K-1))."""
    sin, cos = np.sin(angles), np.cos(angles)
    n = angles.shape[0]
    s = np.empty((n, angles.shape[1] + 1))
    s[:, 0] = 1.0
    np.cumprod(sin, axis=1, out=s[:, 1:])
    c = np.ones_like(s)
    c[:, :-1] = cos
    return s, c


def rows_from_angles(angles, radii):
    """Cartesian rows ``radii[:, None] * S * C`` for an n x (K-1) angle matrix."""
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    _check_k(angles.shape[1])
    s, c = _sines_cosines(angles)
    return np.asarray(radii, dtype=np.float64)[:, None] * s * c


def spherical_to_cartesian(angles, radius):
    """Point on the sphere of the given radius for K-1 angles; returns a K-vector."""
    angles = np.asarray(angles, dtype=np.float64).reshape(1, -1)
    return rows_from_angles(angles, np.array([radius]))[0]


def cartesian_to_spherical(x):
    """Inverse conversion; returns ``(angles, radius)``.

    The first K-2 angles lie in [0, pi] and the last in [0, 2 pi). Where the
    trailing part of the vector vanishes the remaining angles are 0.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _check_k(len(x) - 1)
    radius = float(np.linalg.norm(x))
    if radius == 0.0:
        raise ValueError("the zero vector has no spherical representation")
    k = len(x)
    # Norms of the trailing parts x[i+1:], computed back to front.
    tail = np.sqrt(np.cumsum((x[::-1] ** 2))[::-1])
    angles = np.empty(k - 1)
    for i in range(k - 2):
        angles[i] = np.arctan2(tail[i + 1], x[i])
    last = np.arctan2(x[k - 1], x[k - 2])
    if last < 0:
        last += TWO_PI
    if last >= TWO_PI:
        last = 0.0
    angles[k - 2] = last
    return angles, radius


def build_factors(angles, mags, preprocess=None):
    """W and H from angle matrices and magnitudes.

    Row i of W is the point with angles ``phi[i]`` on the sphere of radius
    ``r_w[i]``; column j of H likewise from ``theta[:, j]`` and ``r_h[j]``.
    """
    n, m = angles.phi.shape[0], angles.theta.shape[1]
    if len(mags.r_w) != n or len(mags.r_h) != m:
        raise ValueError(
            f"magnitudes ({len(mags.r_w)}, {len(mags.r_h)}) do not match angles ({n}, {m})"
        )
    w = rows_from_angles(angles.phi, mags.r_w)
    h = rows_from_angles(angles.theta.T, mags.r_h).T
    return FactorModel(w, np.ascontiguousarray(h), mags, preprocess)


def grad_w_wrt_phi(phi, r_w):
    """Derivative tensor of W with respect to phi, shape N x K x (K-1).

    Entry ``[a, j, b]`` is dW[a, j] / dphi[a, b] (W[a] does not depend on
    other rows' angles). With 0-based indices::

        j < b        0
        j == b       -r sin(p_0) ... sin(p_b)
        j > b        r cos(p_b) * prod_{p<j, p!=b} sin(p_p) * c_j

    where ``c_j = cos(p_j)`` except ``c_{K-1} = 1``. Products skip the
    differentiated factor instead of dividing by it, so zero sines are safe.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    n, km1 = phi.shape
    _check_k(km1)
    k = km1 + 1
    r = np.asarray(r_w, dtype=np.float64).reshape(-1)
    if len(r) != n:
        raise ValueError("r_w length does not match the rows of phi")
    sin, cos = np.sin(phi), np.cos(phi)
    s, c = _sines_cosines(phi)  # s[:, j] = prod_{p<j} sin
    out = np.zeros((n, k, km1))
    for b in range(km1):
        lead = r * s[:, b]
        out[:, b, b] = -lead * sin[:, b]
        # prod_{b<p<j} sin for j = b+1 .. K-1
        between = np.ones((n, k - b - 1))
        if k - b - 2 > 0:
            np.cumprod(sin[:, b + 1 :], axis=1, out=between[:, 1:])
        out[:, b + 1 :, b] = (lead * cos[:, b])[:, None] * between * c[:, b + 1 :]
    return out


def grad_h_wrt_theta(theta, r_h):
    """Derivative tensor of H with respect to theta, shape (K-1) x K x M.

    Entry ``[b, j, m]`` is dH[j, m] / dtheta[b, m]; the column analogue of
    :func:`grad_w_wrt_phi`.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    return grad_w_wrt_phi(theta.T, r_h).transpose(2, 1, 0)
