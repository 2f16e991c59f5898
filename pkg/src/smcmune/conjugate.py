"""Gaussian-gamma sufficient statistics for the observation process.

Two stat families: baseline (scalar offset mu_bar with precision nu_bar) and
unit twitch forces (vector mu with common precision nu). Non-baseline
assimilation freezes the baseline statistics and treats the baseline noise as
negligible relative to unit noise (nu_bar^-1 = 0), so a firing observation is
a weighted regression update with weight 1/(number of firing units).

Scalar operations delegate to batched kernels (leading particle axis) so the
sequential filter and single-record replays share the exact same arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincinv, gammaln

from .errors import NumericalError, ValidationError
from .model import ModelConfig

__all__ = [
    "BaselineStats",
    "UnitStats",
    "init_baseline_stats",
    "baseline_update",
    "set_nu_prior",
    "gamma_median",
    "init_unit_stats",
    "firing_update",
    "observation_predictive_logdensity",
    "student_t_logpdf",
]

_DEFAULT_CONFIG = ModelConfig()


@dataclass(frozen=True)
class BaselineStats:
    """Sufficient statistics (a_bar, b_bar, m_bar, c_bar) of the baseline noise posterior.

    nu_bar ~ Gamma(a_bar, rate b_bar) and mu_bar | nu_bar ~ N(m_bar, c_bar / nu_bar).
    """

    a_bar: float
    b_bar: float
    m_bar: float
    c_bar: float

    def __post_init__(self) -> None:
        vals = (self.a_bar, self.b_bar, self.m_bar, self.c_bar)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("baseline statistics must be finite")
        if self.a_bar <= 0 or self.b_bar <= 0 or self.c_bar <= 0:
            raise ValidationError("a_bar, b_bar, c_bar must be positive")


@dataclass(frozen=True)
class UnitStats:
    """Sufficient statistics (a, b, m, C) of the unit twitch-force posterior.

    nu ~ Gamma(a, rate b) and mu | nu ~ N_u(m, C / nu); C is SPD.
    """

    a: float
    b: float
    m: np.ndarray
    C: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float))
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float))
        if self.a <= 0 or self.b <= 0:
            raise ValidationError("a and b must be positive")
        u = self.m.shape[0]
        if self.C.shape != (u, u):
            raise ValidationError("C must be u x u for a length-u m")

    @property
    def u(self) -> int:
        return int(self.m.shape[0])


def init_baseline_stats(config: ModelConfig | None = None) -> BaselineStats:
    cfg = config or _DEFAULT_CONFIG
    return BaselineStats(cfg.a_bar0, cfg.b_bar0, cfg.m_bar0, cfg.c_bar0)


def baseline_update(stats: BaselineStats, y: float) -> BaselineStats:
    """Assimilate one zero-stimulus observation into the baseline posterior."""
    if not math.isfinite(y):
        raise ValidationError(f"non-finite baseline response {y!r}")
    denom = 1.0 + stats.c_bar
    resid = y - stats.m_bar
    # the residual weight is c/(1+c): the u=1, x=1 case of the firing update
    return BaselineStats(
        a_bar=stats.a_bar + 0.5,
        b_bar=stats.b_bar + resid * resid / (2.0 * denom),
        m_bar=stats.m_bar + stats.c_bar * resid / denom,
        c_bar=stats.c_bar / denom,
    )


def gamma_median(shape: float, rate: float) -> float:
    """Median of Gamma(shape, rate) via the inverse regularized incomplete gamma."""
    if shape <= 0 or rate <= 0:
        raise ValidationError("gamma median needs positive shape and rate")
    return float(gammaincinv(shape, 0.5)) / rate


def set_nu_prior(a0: float, delta: float, epsilon: float, baseline: BaselineStats) -> float:
    """Calibrate the unit-precision prior scale b0 from the fitted baseline noise.

    Chooses b0 so that under nu ~ Gamma(a0, rate b0), the unit noise exceeds
    epsilon times the posterior-median baseline precision with probability
    only delta: P(nu <= epsilon * med(nu_bar)) = 1 - delta. The quantile
    equation inverts in closed form through the regularized incomplete gamma.
    """
    if not (0.0 < delta < 1.0 and 0.0 < epsilon < 1.0):
        raise ValidationError("delta and epsilon must lie in (0, 1)")
    med = gamma_median(baseline.a_bar, baseline.b_bar)
    q = float(gammaincinv(a0, 1.0 - delta))
    b0 = q / (epsilon * med)
    if not math.isfinite(b0) or b0 <= 0:
        raise NumericalError(
            f"nu-prior calibration failed: a0={a0}, delta={delta}, "
            f"epsilon={epsilon}, median={med}"
        )
    return b0


def init_unit_stats(u: int, b0: float, config: ModelConfig | None = None) -> UnitStats:
    cfg = config or _DEFAULT_CONFIG
    if u < 1:
        raise ValidationError("need at least one unit")
    return UnitStats(
        a=cfg.a0,
        b=b0,
        m=np.full(u, cfg.m0, dtype=float),
        C=cfg.C0_scale * np.eye(u),
    )


# ---------------------------------------------------------------------------
# batched kernels; leading axis indexes particles
# ---------------------------------------------------------------------------

def _firing_update_batch(A, B, M, C, x, y, m_bar):
    """One firing assimilation for a batch sharing the firing vector x != 0."""
    v = np.einsum("nij,j->ni", C, x)            # C x
    xCx = np.einsum("ni,i->n", v, x)            # x' C x
    q = 1.0 / (x.sum() + xCx)
    r = y - m_bar - np.einsum("ni,i->n", M, x)
    M2 = M + (q * r)[:, None] * v
    # outer product first so entries (i, j) and (j, i) are the same float and
    # C2 stays exactly symmetric under repeated downdates
    C2 = C - q[:, None, None] * (v[:, :, None] * v[:, None, :])
    A2 = A + 0.5
    B2 = B + 0.5 * q * r * r
    return A2, B2, M2, C2


def _predictive_logpdf_fire_batch(A, B, M, C, x, y, m_bar):
    """log density of y under the firing-vector Student-t predictive, batched."""
    v = np.einsum("nij,j->ni", C, x)
    xCx = np.einsum("ni,i->n", v, x)
    loc = m_bar + np.einsum("ni,i->n", M, x)
    scale2 = (B / A) * (xCx + x.sum())
    return student_t_logpdf(y, loc, scale2, 2.0 * A)


def student_t_logpdf(y, loc, scale2, dof):
    """Log density of a scaled Student-t: location loc, squared scale scale2, dof."""
    z = np.square(np.asarray(y) - loc) / (dof * scale2)
    return (
        gammaln((dof + 1.0) / 2.0)
        - gammaln(dof / 2.0)
        - 0.5 * np.log(dof * math.pi * scale2)
        - ((dof + 1.0) / 2.0) * np.log1p(z)
    )


def firing_update(stats: UnitStats, x, y: float, m_bar: float) -> UnitStats:
    """Assimilate one observation with firing vector x (at least one unit firing).

    The baseline statistics are frozen at their last baseline value; m_bar is
    that frozen offset. Rank-1 update, O(u^2).
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (stats.u,):
        raise ValidationError(f"firing vector must have length {stats.u}")
    if not x.any():
        raise ValidationError("firing_update requires a non-zero firing vector")
    A2, B2, M2, C2 = _firing_update_batch(
        np.array([stats.a]), np.array([stats.b]), stats.m[None, :], stats.C[None, :, :],
        x, float(y), float(m_bar),
    )
    return UnitStats(a=float(A2[0]), b=float(B2[0]), m=M2[0], C=C2[0])


def observation_predictive_logdensity(
    y: float,
    x,
    baseline: BaselineStats,
    units: UnitStats | None,
) -> float:
    """Log one-step-ahead density of response y given the firing vector x.

    x = 0 routes to the baseline Student-t (dof 2*a_bar); any firing routes to
    the unit-regression Student-t (dof 2*a). Both are exact under conjugacy.
    """
    x = np.asarray(x, dtype=float)
    if not x.any():
        scale2 = (baseline.b_bar / baseline.a_bar) * (baseline.c_bar + 1.0)
        return float(student_t_logpdf(float(y), baseline.m_bar, scale2, 2.0 * baseline.a_bar))
    if units is None:
        raise ValidationError("unit statistics required for a firing observation")
    out = _predictive_logpdf_fire_batch(
        np.array([units.a]), np.array([units.b]), units.m[None, :], units.C[None, :, :],
        x, float(y), baseline.m_bar,
    )
    return float(out[0])
