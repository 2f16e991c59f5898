"""Core domain types: stimulus-response series, excitability curves, priors,
data re-ordering and the model-size prior.

Units convention: stimuli in volts, responses and twitch forces in mN,
precision-like scale parameters in mN^2. Documented, not type-enforced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import betaln, log_expit, log_ndtr, ndtr

from .errors import ValidationError

__all__ = [
    "ExcitabilityParams",
    "ExcitabilityCurve",
    "LogLogisticCurve",
    "GaussianCdfCurve",
    "get_curve",
    "excitability_prob",
    "excitability_slope_at_median",
    "cv_of_excitability",
    "StimulusResponseSeries",
    "reorder_series",
    "model_prior",
    "excitability_prior_logdensity",
    "ModelConfig",
    "BETA_SHAPE",
]

# Both beta prior shapes; vague but zero at the support boundary.
BETA_SHAPE = 1.1


@dataclass(frozen=True)
class ExcitabilityParams:
    """Median firing threshold (volts) and reciprocal gradient at that median."""

    eta: float
    lam: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.eta) and math.isfinite(self.lam)):
            raise ValidationError("excitability parameters must be finite")
        if self.eta <= 0 or self.lam <= 0:
            raise ValidationError("excitability parameters must be positive")


class ExcitabilityCurve:
    """Sigmoidal firing-probability curve F(s; eta, lam).

    Implementations guarantee F is non-decreasing in s, F(eta) = 1/2 and
    F'(eta) = 1/lam. All methods broadcast over numpy arrays of (eta, lam)
    for a scalar stimulus.
    """

    name: str = "abstract"

    def prob(self, s, eta, lam):
        raise NotImplementedError

    def log_prob(self, s, eta, lam):
        raise NotImplementedError

    def log_one_minus(self, s, eta, lam):
        raise NotImplementedError

    def slope_at_median(self, eta, lam):
        return 1.0 / np.asarray(lam, dtype=float)

    def __repr__(self) -> str:  # pragma: no cover - cosmetic
        return f"<{type(self).__name__}>"


class LogLogisticCurve(ExcitabilityCurve):
    """Log-logistic curve: logistic in log-stimulus with shape k = 4*eta/lam.

    F(0) is exactly 0 (continuous extension of the s -> 0 limit).
    """

    name = "loglogistic"

    @staticmethod
    def _z(s, eta, lam):
        # k (log s - log eta); k = 4 eta / lam
        eta = np.asarray(eta, dtype=float)
        lam = np.asarray(lam, dtype=float)
        return (4.0 * eta / lam) * (np.log(s) - np.log(eta))

    def prob(self, s, eta, lam):
        if s == 0.0:
            return np.zeros(np.broadcast(np.asarray(eta), np.asarray(lam)).shape)
        z = self._z(s, eta, lam)
        # expit written via log_expit keeps the deep tails consistent with log_prob
        return np.exp(log_expit(z))

    def log_prob(self, s, eta, lam):
        if s == 0.0:
            return np.full(np.broadcast(np.asarray(eta), np.asarray(lam)).shape, -np.inf)
        return log_expit(self._z(s, eta, lam))

    def log_one_minus(self, s, eta, lam):
        if s == 0.0:
            return np.zeros(np.broadcast(np.asarray(eta), np.asarray(lam)).shape)
        return log_expit(-self._z(s, eta, lam))


class GaussianCdfCurve(ExcitabilityCurve):
    """Gaussian-CDF curve F(s) = Phi(delta (s - eta)) with delta = sqrt(2*pi)/lam.

    Unlike the log-logistic curve, F(0) > 0; callers must not assume a zero
    firing probability at zero stimulus under this variant.
    """

    name = "gaussian"

    @staticmethod
    def _arg(s, eta, lam):
        eta = np.asarray(eta, dtype=float)
        lam = np.asarray(lam, dtype=float)
        return math.sqrt(2.0 * math.pi) * (s - eta) / lam

    def prob(self, s, eta, lam):
        return ndtr(self._arg(s, eta, lam))

    def log_prob(self, s, eta, lam):
        return log_ndtr(self._arg(s, eta, lam))

    def log_one_minus(self, s, eta, lam):
        return log_ndtr(-self._arg(s, eta, lam))


_CURVES = {
    "loglogistic": LogLogisticCurve(),
    "gaussian": GaussianCdfCurve(),
}


def get_curve(name: str) -> ExcitabilityCurve:
    try:
        return _CURVES[name]
    except KeyError:
        raise ValidationError(
            f"unknown excitability curve {name!r}; expected one of {sorted(_CURVES)}"
        ) from None


def excitability_prob(curve: ExcitabilityCurve, s: float, p: ExcitabilityParams) -> float:
    """Firing probability F(s; eta, lam) for one unit at stimulus s."""
    if not math.isfinite(s) or s < 0:
        raise ValidationError(f"stimulus must be finite and non-negative, got {s!r}")
    return float(curve.prob(float(s), p.eta, p.lam))


def excitability_slope_at_median(curve: ExcitabilityCurve, p: ExcitabilityParams) -> float:
    """dF/ds evaluated at s = eta; equals 1/lam for every supported curve."""
    return float(curve.slope_at_median(p.eta, p.lam))


def cv_of_excitability(p: ExcitabilityParams) -> float:
    """Coefficient of variation of the firing-threshold distribution.

    The threshold of a unit with log-logistic excitability is log-logistic
    with scale eta and shape k = 4*eta/lam, whose moments give
    CV^2 = tan(b)/b - 1 with b = pi/k. Requires lam/eta < 2 so that k > 2
    and the variance exists.
    """
    ratio = p.lam / p.eta
    if ratio >= 2.0:
        raise ValidationError(
            f"threshold variance undefined for lam/eta = {ratio:.4g} >= 2"
        )
    b = math.pi * ratio / 4.0
    return math.sqrt(math.tan(b) / b - 1.0)


@dataclass(frozen=True)
class StimulusResponseSeries:
    """Ordered experiment records.

    Records 1..tau-1 (1-based) are baseline sweeps at zero stimulus, record
    tau is the supramaximal stimulus (the maximum in the series), and records
    tau+1..T are sorted by non-decreasing stimulus.
    """

    stimuli: np.ndarray
    responses: np.ndarray
    tau: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "stimuli", np.asarray(self.stimuli, dtype=float))
        object.__setattr__(self, "responses", np.asarray(self.responses, dtype=float))
        self.validate()

    def validate(self) -> None:
        s, y, tau = self.stimuli, self.responses, self.tau
        if s.ndim != 1 or y.shape != s.shape:
            raise ValidationError("stimuli and responses must be equal-length 1-D arrays")
        T = s.size
        if not (2 <= tau <= T):
            raise ValidationError(f"need T >= tau >= 2, got tau={tau}, T={T}")
        if not (np.isfinite(s).all() and np.isfinite(y).all()):
            raise ValidationError("non-finite stimulus or response value")
        if (s < 0).any():
            raise ValidationError("negative stimulus value")
        if (s[: tau - 1] != 0).any():
            raise ValidationError("baseline records must have zero stimulus")
        if s[tau - 1] < s.max():
            raise ValidationError("supramaximal record does not carry the maximum stimulus")
        post = s[tau:]
        if post.size and (np.diff(post) < 0).any():
            raise ValidationError("post-supramaximal records are not sorted by stimulus")

    @property
    def T(self) -> int:
        return int(self.stimuli.size)

    @property
    def n_baseline(self) -> int:
        return self.tau - 1

    @property
    def baseline_responses(self) -> np.ndarray:
        return self.responses[: self.tau - 1]

    @property
    def supramax_stimulus(self) -> float:
        return float(self.stimuli[self.tau - 1])

    @property
    def supramax_response(self) -> float:
        return float(self.responses[self.tau - 1])

    @property
    def post_stimuli(self) -> np.ndarray:
        return self.stimuli[self.tau:]

    @property
    def post_responses(self) -> np.ndarray:
        return self.responses[self.tau:]


def reorder_series(
    raw: Sequence[tuple[float, float]],
    baseline_flags: Sequence[bool],
    supramax_flags: Sequence[bool],
) -> StimulusResponseSeries:
    """Arrange raw records into the canonical assimilation order.

    Baseline records come first in their original relative order, the single
    supramaximal record follows, and the remainder is sorted by increasing
    stimulus (stable, ties broken by original position).

    Raises
    ------
    ValidationError
        If there is no baseline record, not exactly one supramaximal record,
        or the supramaximal record does not carry the maximum stimulus.
    """
    rows = [(float(s), float(y)) for s, y in raw]
    if not (len(rows) == len(baseline_flags) == len(supramax_flags)):
        raise ValidationError("flag sequences must match the number of records")
    base_idx = [i for i, f in enumerate(baseline_flags) if f]
    supra_idx = [i for i, f in enumerate(supramax_flags) if f]
    if not base_idx:
        raise ValidationError("no baseline record")
    if len(supra_idx) != 1:
        raise ValidationError(f"expected exactly one supramaximal record, got {len(supra_idx)}")
    si = supra_idx[0]
    if si in base_idx:
        raise ValidationError("a record cannot be both baseline and supramaximal")
    stimuli = [r[0] for r in rows]
    if stimuli[si] < max(stimuli):
        raise ValidationError(
            f"supramaximal stimulus {stimuli[si]} below series maximum {max(stimuli)}"
        )
    for i in base_idx:
        if stimuli[i] != 0.0:
            raise ValidationError(f"baseline record {i} has non-zero stimulus {stimuli[i]}")
    rest = [i for i in range(len(rows)) if i != si and i not in set(base_idx)]
    rest.sort(key=lambda i: (stimuli[i], i))
    order = base_idx + [si] + rest
    s = np.array([stimuli[i] for i in order])
    y = np.array([rows[i][1] for i in order])
    return StimulusResponseSeries(s, y, tau=len(base_idx) + 1)


def model_prior(u: int, u_max: int) -> float:
    """Truncated geometric(1/2) prior on the unit count: P(u) = 2^-u / (1 - 2^-u_max)."""
    if not (1 <= u <= u_max):
        raise ValidationError(f"unit count {u} outside 1..{u_max}")
    return math.exp(-u * math.log(2.0)) / (1.0 - math.exp(-u_max * math.log(2.0)))


def _beta_logpdf(x, a: float):
    """log Beta(a, a) density, -inf outside (0, 1); vectorized."""
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, -np.inf)
    inside = (x > 0.0) & (x < 1.0)
    xi = x[inside]
    out[inside] = (a - 1.0) * (np.log(xi) + np.log1p(-xi)) - betaln(a, a)
    return out


def excitability_prior_logdensity(eta, lam, eta_max: float, lambda_max: float):
    """Log prior density of (eta, lam): independent scaled Beta(1.1, 1.1) laws.

    Includes the 1/(eta_max * lambda_max) change-of-variable factor; returns
    -inf outside (0, eta_max] x (0, lambda_max]. Vectorized over arrays.
    The upper endpoints carry zero density (the beta boundary).
    """
    scalar = np.isscalar(eta) and np.isscalar(lam)
    le = _beta_logpdf(np.asarray(eta, dtype=float) / eta_max, BETA_SHAPE) - math.log(eta_max)
    ll = _beta_logpdf(np.asarray(lam, dtype=float) / lambda_max, BETA_SHAPE) - math.log(lambda_max)
    out = le + ll
    return float(out) if scalar else out


@dataclass(frozen=True)
class ModelConfig:
    """All tunable knobs of the estimation pipeline.

    ``eta_max=None`` resolves to 1.1x the supramaximal stimulus of the series
    being analysed. ``stability`` holds a selection.StabilityConfig; ``None``
    means protocol defaults.
    """

    u_max: int = 12
    eta_max: float | None = None
    lambda_max: float = 14.0
    a0: float = 0.5
    delta: float = 0.05
    epsilon: float = 0.2
    mu_min: float = 15.0
    n_particles0: int = 5000
    grid_n0: int = 30
    prune_threshold: float = 0.0
    seed: int = 0
    curve: str = "loglogistic"
    # observation-process hyperparameters
    a_bar0: float = 0.5
    b_bar0: float = 0.1
    m_bar0: float = 0.0
    c_bar0: float = 1.0e3
    m0: float = 40.0
    C0_scale: float = 1.0e4
    stability: object | None = None

    def __post_init__(self) -> None:
        if self.u_max < 1:
            raise ValidationError("u_max must be >= 1")
        if not (0.0 < self.delta < 1.0 and 0.0 < self.epsilon < 1.0):
            raise ValidationError("delta and epsilon must lie in (0, 1)")
        if not (0.0 <= self.prune_threshold < 1.0):
            raise ValidationError("prune_threshold must lie in [0, 1)")
        if self.grid_n0 < 2:
            raise ValidationError("grid_n0 must be >= 2")
        if self.lambda_max <= 0:
            raise ValidationError("lambda_max must be positive")
        get_curve(self.curve)

    def resolve_eta_max(self, series: StimulusResponseSeries) -> float:
        if self.eta_max is not None:
            if self.eta_max <= series.supramax_stimulus:
                raise ValidationError(
                    f"eta_max={self.eta_max} must exceed the supramaximal stimulus "
                    f"{series.supramax_stimulus}"
                )
            return self.eta_max
        return 1.1 * series.supramax_stimulus

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)
