"""Orthant probabilities P(X_j >= lower for all j) of multivariate Student-t laws.

Estimated by separation-of-variables sequential conditioning on the Cholesky
factor (Genz-style), integrated with randomly shifted, baker-folded scrambled
Halton points plus an antithetic pair, replicated for an empirical standard
error. One-dimensional and diagonal shapes take exact closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincinv, ndtr, ndtri, stdtr
from scipy.stats import qmc

from .errors import NumericalError, ValidationError

__all__ = ["OrthantQuery", "student_t_orthant"]

_TINY = 1e-300
_ONE_MINUS = 1.0 - 1e-16


@dataclass(frozen=True)
class OrthantQuery:
    """P(X_j >= lower_bound for all j), X ~ MVT(location, shape_matrix, dof)."""

    location: np.ndarray
    shape_matrix: np.ndarray
    dof: float
    lower_bound: float

    def __post_init__(self) -> None:
        loc = np.atleast_1d(np.asarray(self.location, dtype=float))
        shape = np.atleast_2d(np.asarray(self.shape_matrix, dtype=float))
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "shape_matrix", shape)
        u = loc.size
        if shape.shape != (u, u):
            raise ValidationError("shape matrix does not match the location length")
        if not (np.isfinite(loc).all() and np.isfinite(shape).all()):
            raise ValidationError("non-finite orthant query")
        if not np.allclose(shape, shape.T, rtol=1e-10, atol=1e-12):
            raise ValidationError("shape matrix must be symmetric")
        if not (self.dof > 0 and math.isfinite(self.dof)):
            raise ValidationError("dof must be positive and finite")
        if math.isnan(self.lower_bound) or self.lower_bound == math.inf:
            raise ValidationError("lower bound must be finite or -inf")

    @property
    def dim(self) -> int:
        return self.location.size


def _genz_values(b: np.ndarray, L: np.ndarray, dof: float, pts: np.ndarray) -> np.ndarray:
    """Sequential-conditioning integrand at each point of pts in (0,1)^d.

    Point column 0 drives the chi scale mixing the Student-t out of Gaussians;
    columns 1..d-1 drive the conditional Gaussian coordinates. The mean of the
    returned values estimates P(T <= b) for T ~ MVT(0, L L', dof).
    """
    d = b.size
    scale = np.sqrt(2.0 * gammaincinv(dof / 2.0, pts[:, 0]) / dof)
    e = ndtr(scale * b[0] / L[0, 0])
    f = e.copy()
    ys = np.empty((pts.shape[0], d - 1)) if d > 1 else None
    for i in range(1, d):
        ys[:, i - 1] = ndtri(np.clip(pts[:, i] * e, _TINY, _ONE_MINUS))
        num = scale * b[i] - ys[:, :i] @ L[i, :i]
        e = ndtr(num / L[i, i])
        f *= e
    return f


def student_t_orthant(
    q: OrthantQuery,
    rng: np.random.Generator | None = None,
    target_se: float = 1e-4,
    *,
    n_reps: int = 8,
    start_points: int = 512,
    max_points: int = 1 << 21,
) -> tuple[float, float]:
    """Estimate the orthant probability and its standard error.

    Exact (zero standard error) for one dimension, a diagonal shape, or an
    infinite lower bound. Otherwise the QMC point count per replicate grows
    fourfold per round until the replicate-level standard error reaches
    target_se or max_points total points are spent; a result above target_se
    signals the cap was hit (not fatal, per the caller's tolerance policy).
    """
    if q.lower_bound == -math.inf:
        return 1.0, 0.0
    d = q.dim
    sd = np.sqrt(np.diag(q.shape_matrix))
    if np.any(sd <= 0):
        raise NumericalError("shape matrix has a non-positive diagonal")
    b = q.location - q.lower_bound
    if d == 1:
        return float(stdtr(q.dof, b[0] / sd[0])), 0.0
    off = q.shape_matrix - np.diag(np.diag(q.shape_matrix))
    if not off.any():
        return float(np.prod(stdtr(q.dof, b / sd))), 0.0

    order = np.argsort(b / sd, kind="stable")
    b_o = b[order]
    shape_o = q.shape_matrix[np.ix_(order, order)]
    try:
        L = np.linalg.cholesky(shape_o)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("shape matrix is not positive definite") from exc

    rng = rng if rng is not None else np.random.default_rng(0)
    engines = [qmc.Halton(d=d, scramble=True, seed=rng) for _ in range(n_reps)]
    shifts = rng.uniform(size=(n_reps, d))
    sums = np.zeros(n_reps)
    counts = np.zeros(n_reps)
    m = start_points
    total = 0
    est, se = 0.0, math.inf
    while True:
        for r in range(n_reps):
            raw = engines[r].random(m)
            folded = 1.0 - np.abs(2.0 * ((raw + shifts[r]) % 1.0) - 1.0)
            vals = 0.5 * (
                _genz_values(b_o, L, q.dof, np.clip(folded, _TINY, _ONE_MINUS))
                + _genz_values(b_o, L, q.dof, np.clip(1.0 - folded, _TINY, _ONE_MINUS))
            )
            sums[r] += vals.sum()
            counts[r] += vals.size
        total += n_reps * m
        means = sums / counts
        est = float(means.mean())
        se = float(means.std(ddof=1) / math.sqrt(n_reps))
        if se <= target_se or total >= max_points:
            break
        m *= 4
    return est, se
