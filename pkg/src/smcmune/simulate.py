"""Synthetic stimulus-response generator with known ground truth.

Systems draw unit thresholds, reciprocal slopes, and twitch forces from fixed
laws under separation constraints (thresholds at least 2 V apart, adjacent
twitch forces at least 4 mN apart), then emit a canonical series: baseline
records, one supramaximal record, and an ascending stimulus sweep. The latent
firing matrix and per-record force draws are kept for exact replay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .model import ExcitabilityCurve, StimulusResponseSeries, get_curve

__all__ = [
    "TrueSystem",
    "StimulusDesign",
    "SimulatedLatents",
    "simulate_params",
    "simulate_dataset",
    "detect_alternation",
]

_MAX_SYSTEM_ATTEMPTS = 1_000_000
_MAX_COORD_ATTEMPTS = 100_000


@dataclass(frozen=True)
class TrueSystem:
    """Ground-truth generator parameters, units sorted by threshold."""

    etas: np.ndarray  # median thresholds, volts
    lams: np.ndarray  # reciprocal gradients, volts
    mus: np.ndarray  # expected twitch forces, mN
    nu_inv: float  # twitch-force variance, mN^2
    mu_bar: float = 0.0
    nu_bar_inv: float = 0.0625  # baseline-noise variance (0.25^2)
    curve: str = "loglogistic"

    def __post_init__(self) -> None:
        for name in ("etas", "lams", "mus"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        self.validate()

    def validate(self) -> None:
        u = self.etas.size
        if u < 1 or self.lams.shape != (u,) or self.mus.shape != (u,):
            raise ValidationError("etas, lams, mus must be equal-length and non-empty")
        if (np.diff(self.etas) <= 2.0).any():
            raise ValidationError("thresholds must ascend with spacing > 2 V")
        if (np.abs(np.diff(self.mus)) <= 4.0).any():
            raise ValidationError("threshold-adjacent twitch forces must differ by > 4 mN")
        if (self.mus <= 20.0).any():
            raise ValidationError("twitch forces must exceed 20 mN")
        if (self.lams <= 0.0).any() or (self.lams >= 10.0).any():
            raise ValidationError("reciprocal gradients must lie in (0, 10) V")
        if not (self.nu_inv > 0 and self.nu_bar_inv > 0):
            raise ValidationError("variances must be positive")
        get_curve(self.curve)

    @property
    def u_star(self) -> int:
        return int(self.etas.size)


@dataclass(frozen=True)
class StimulusDesign:
    """Measurement schedule: baselines, one supramaximal sweep, then a ramp."""

    n_baseline: int = 20
    supramax_stimulus: float = 40.0
    stimuli: np.ndarray = field(
        default_factory=lambda: np.linspace(5.0, 40.0, 199)
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "stimuli", np.asarray(self.stimuli, dtype=float))
        if self.n_baseline < 1:
            raise ValidationError("need at least one baseline record")
        if (self.stimuli <= 0).any():
            raise ValidationError("ramp stimuli must be positive")
        if self.stimuli.size and self.stimuli.max() > self.supramax_stimulus:
            raise ValidationError("ramp exceeds the supramaximal stimulus")


@dataclass(frozen=True)
class SimulatedLatents:
    """Per-record latent draws, aligned with the canonical series order."""

    firing: np.ndarray  # (T, u) 0/1
    unit_draws: np.ndarray  # (T, u) mN, per-record twitch forces
    baseline_draws: np.ndarray  # (T,) mN


def _truncated(draw, accept, rng: np.random.Generator, size: int) -> np.ndarray:
    """Per-coordinate rejection sampling from a truncated univariate law."""
    out = np.empty(size)
    for i in range(size):
        for _ in range(_MAX_COORD_ATTEMPTS):
            v = draw(rng)
            if accept(v):
                out[i] = v
                break
        else:
            raise NumericalError("truncated draw rejected too many times")
    return out


def simulate_params(u_star: int, rng: np.random.Generator) -> TrueSystem:
    """Draw a ground-truth system of u_star units satisfying the constraints.

    Thresholds Unif(5, 40) V; reciprocal gradients Gamma(shape 2, scale 8)
    truncated below 10 V; twitch forces N(40, 20^2) truncated above 20 mN;
    twitch variance Unif(1, 5) mN^2. Whole systems are rejected until sorted
    thresholds are > 2 V apart and threshold-adjacent forces > 4 mN apart.
    """
    if u_star < 1:
        raise ValidationError("u_star must be >= 1")
    for _ in range(_MAX_SYSTEM_ATTEMPTS):
        etas = rng.uniform(5.0, 40.0, u_star)
        lams = _truncated(
            lambda r: r.gamma(2.0, 8.0), lambda v: v < 10.0, rng, u_star
        )
        mus = _truncated(
            lambda r: r.normal(40.0, 20.0), lambda v: v > 20.0, rng, u_star
        )
        nu_inv = rng.uniform(1.0, 5.0)
        order = np.argsort(etas, kind="stable")
        etas, lams, mus = etas[order], lams[order], mus[order]
        if u_star > 1:
            if (np.diff(etas) <= 2.0).any() or (np.abs(np.diff(mus)) <= 4.0).any():
                continue
        return TrueSystem(etas, lams, mus, float(nu_inv))
    raise NumericalError(
        f"no admissible system of {u_star} units found in {_MAX_SYSTEM_ATTEMPTS} attempts"
    )


def simulate_dataset(
    system: TrueSystem,
    design: StimulusDesign | None = None,
    rng: np.random.Generator | None = None,
    *,
    return_latents: bool = False,
):
    """Generate a canonical series from the system under the given schedule.

    Record order is final (baselines, supramaximal, ascending ramp). Firing is
    Bernoulli in each unit's excitability at the record's stimulus, forced off
    at baseline and on at the supramaximal record; the response adds the
    baseline draw and one fresh force draw per firing unit. Draw order:
    firing uniforms (T, u), unit force draws (T, u), baseline draws (T,).
    """
    design = design or StimulusDesign()
    rng = rng if rng is not None else np.random.default_rng(0)
    curve = get_curve(system.curve)
    u = system.u_star
    ramp = np.sort(design.stimuli, kind="stable")
    stimuli = np.concatenate(
        [np.zeros(design.n_baseline), [design.supramax_stimulus], ramp]
    )
    T = stimuli.size
    tau = design.n_baseline + 1

    probs = np.empty((T, u))
    for t in range(T):
        probs[t] = curve.prob(float(stimuli[t]), system.etas, system.lams)
    firing = (rng.uniform(size=(T, u)) < probs).astype(np.int8)
    firing[: tau - 1, :] = 0
    firing[tau - 1, :] = 1

    unit_draws = system.mus[None, :] + math.sqrt(system.nu_inv) * rng.standard_normal(
        (T, u)
    )
    baseline_draws = system.mu_bar + math.sqrt(
        system.nu_bar_inv
    ) * rng.standard_normal(T)
    responses = baseline_draws + (firing * unit_draws).sum(axis=1)
    series = StimulusResponseSeries(stimuli, responses, tau=tau)
    if not return_latents:
        return series
    return series, SimulatedLatents(firing, unit_draws, baseline_draws)


def detect_alternation(
    system: TrueSystem, low: float = 0.05, high: float = 0.95
) -> tuple[bool, list[tuple[float, float]]]:
    """Stimulus intervals where at least two units fire probabilistically.

    Each unit is 'in play' where its firing probability lies in (low, high);
    for the log-logistic curve that is an explicit stimulus interval. Returns
    whether any two such intervals overlap, plus the overlap intervals (the
    stimulus ranges where distinct firing combinations alternate).
    """
    if not (0.0 < low < high < 1.0):
        raise ValidationError("need 0 < low < high < 1")
    if system.curve != "loglogistic":
        raise ValidationError("alternation detection supports the log-logistic curve")
    k = 4.0 * system.etas / system.lams
    s_lo = system.etas * (low / (1.0 - low)) ** (1.0 / k)
    s_hi = system.etas * (high / (1.0 - high)) ** (1.0 / k)
    events = sorted(
        [(s, +1) for s in s_lo] + [(s, -1) for s in s_hi]
    )
    depth = 0
    intervals: list[tuple[float, float]] = []
    start = None
    for s, step in events:
        depth += step
        if depth >= 2 and start is None:
            start = s
        elif depth < 2 and start is not None:
            intervals.append((float(start), float(s)))
            start = None
    return bool(intervals), intervals
