"""Low-variance resampling for the particle filter."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

__all__ = ["residual_systematic_resample", "multinomial_resample"]


def _normalize(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValidationError("weights must be a non-empty 1-D array")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValidationError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValidationError("weights sum to zero")
    return w / total


def residual_systematic_resample(
    weights: np.ndarray, rng: np.random.Generator, n_out: int | None = None
) -> np.ndarray:
    """Residual resampling with a systematic draw on the residuals.

    Each index i is copied floor(R w_i) times deterministically; the fractional
    remainders are resampled systematically with a single uniform. Copy counts
    therefore differ from the expected value R w_i by less than 1, and exactly
    one random number is consumed. Returns sorted indices (length R), so the
    output is invariant to how ties in the cumulative sums are broken.
    """
    w = _normalize(weights)
    n = w.size
    r = n if n_out is None else int(n_out)
    if r <= 0:
        raise ValidationError("resample size must be positive")
    scaled = r * w
    floors = np.floor(scaled).astype(np.int64)
    n_res = r - int(floors.sum())
    counts = floors
    if n_res > 0:
        resid = scaled - floors
        cum = np.cumsum(resid)
        cum[-1] = n_res  # kill round-off; residuals sum to n_res exactly
        points = rng.uniform(0.0, 1.0) + np.arange(n_res)
        idx = np.searchsorted(cum, points, side="right")
        np.minimum(idx, n - 1, out=idx)  # guard against float round-up at the top
        counts = floors + np.bincount(idx, minlength=n)
    return np.repeat(np.arange(n), counts)


def multinomial_resample(
    weights: np.ndarray, rng: np.random.Generator, n_out: int | None = None
) -> np.ndarray:
    """Plain multinomial resampling; reference implementation for tests."""
    w = _normalize(weights)
    r = w.size if n_out is None else int(n_out)
    if r <= 0:
        raise ValidationError("resample size must be positive")
    counts = rng.multinomial(r, w)
    return np.repeat(np.arange(w.size), counts)
