"""Exact evidence by exhaustive enumeration of firing sequences.

Ground truth for validating the particle filter on tiny instances: the model
evidence (at a fixed grid resolution) is a finite sum over every firing
combination at every non-baseline record after the supramaximal one. Shares
the baseline chain, conjugate updates, grid machinery, and supramaximal step
with the filter, so the two estimate the very same quantity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conjugate import (
    UnitStats,
    firing_update,
    init_unit_stats,
    observation_predictive_logdensity,
    set_nu_prior,
)
from .engine import _supramax_increment, assimilate_baseline_phase
from .errors import ValidationError
from .grid import EMPTY_KEY, GridCache, Lattice, child_key
from .model import ModelConfig, StimulusResponseSeries, get_curve

__all__ = ["OracleLimits", "exact_log_ml", "enumerate_path_logs"]

_DEFAULT_CONFIG = ModelConfig()


@dataclass(frozen=True)
class OracleLimits:
    """Hard bounds on the enumeration; the leaf count is 2^(units * records)."""

    max_units: int = 2
    max_nonbaseline: int = 12
    max_bits: int = 24

    def check(self, u: int, n_free: int) -> None:
        if u > self.max_units:
            raise ValidationError(
                f"exact enumeration supports at most {self.max_units} units, got {u}"
            )
        if n_free > self.max_nonbaseline:
            raise ValidationError(
                f"exact enumeration supports at most {self.max_nonbaseline} "
                f"free records, got {n_free}"
            )
        if u * n_free > self.max_bits:
            raise ValidationError(
                f"enumeration needs {u * n_free} bits, cap is {self.max_bits}"
            )


class _LogSumAccumulator:
    """Streaming log of a sum of exponentials, numerically shifted."""

    def __init__(self) -> None:
        self._max = -math.inf
        self._sum = 0.0

    def add(self, x: float) -> None:
        if x == -math.inf:
            return
        if x <= self._max:
            self._sum += math.exp(x - self._max)
        else:
            self._sum = self._sum * math.exp(self._max - x) + 1.0
            self._max = x

    def value(self) -> float:
        if self._sum == 0.0:
            return -math.inf
        return self._max + math.log(self._sum)


def _prepare(series: StimulusResponseSeries, u: int, grid_n: int, config):
    cfg = config or _DEFAULT_CONFIG
    if u < 1:
        raise ValidationError("u must be >= 1")
    if grid_n < 2:
        raise ValidationError("grid_n must be >= 2")
    curve = get_curve(cfg.curve)
    lattice = Lattice(grid_n, grid_n, cfg.resolve_eta_max(series), cfg.lambda_max)
    cache = GridCache(lattice, curve)

    baseline, log_const = assimilate_baseline_phase(series, cfg)
    b0 = set_nu_prior(cfg.a0, cfg.delta, cfg.epsilon, baseline)
    stats0 = init_unit_stats(u, b0, cfg)
    s_tau = series.supramax_stimulus
    y_tau = series.supramax_response
    p_fire = cache.predictive(EMPTY_KEY, float(s_tau))
    log_const += _supramax_increment(stats0, baseline, float(y_tau), float(s_tau), p_fire)
    if not math.isfinite(log_const):
        return cfg, cache, baseline, None, None, -math.inf
    stats1 = firing_update(stats0, np.ones(u), float(y_tau), baseline.m_bar)
    key1 = child_key(EMPTY_KEY, 1)
    cache.get_or_extend(key1, EMPTY_KEY, 1, float(s_tau))
    return cfg, cache, baseline, stats1, (key1,) * u, log_const


def _step_weights(cache, baseline, stats, keys, y, s, u):
    """Log joint weight of every firing combo at one record, shape (2^u,)."""
    p = np.array([cache.predictive(k, s) for k in keys])
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
        log_np = np.log1p(-p)
    out = np.empty(1 << u)
    x = np.zeros(u)
    for c in range(1 << u):
        for j in range(u):
            x[j] = (c >> j) & 1
        prior = float(np.where(x > 0, log_p, log_np).sum())
        if prior == -math.inf:
            out[c] = -math.inf
            continue
        out[c] = prior + observation_predictive_logdensity(y, x, baseline, stats)
    return out


def _advance(cache, stats, keys, c, u, y, s, m_bar) -> tuple[UnitStats, tuple]:
    bits = [(c >> j) & 1 for j in range(u)]
    new_keys = []
    for j, k in enumerate(keys):
        nk = child_key(k, bits[j])
        cache.get_or_extend(nk, k, bits[j], s)
        new_keys.append(nk)
    if c != 0:
        stats = firing_update(stats, np.array(bits, dtype=float), y, m_bar)
    return stats, tuple(new_keys)


def exact_log_ml(
    series: StimulusResponseSeries,
    u: int,
    grid_n: int,
    config: ModelConfig | None = None,
    limits: OracleLimits | None = None,
) -> float:
    """Exact log evidence for a u-unit model by summing over firing paths.

    Depth-first recursion over the free records (everything after the
    supramaximal one); prefixes share conjugate statistics and cached grids,
    and zero-probability branches are skipped. The result is what the particle
    filter's running log-evidence estimates.
    """
    limits = limits or OracleLimits()
    n_free = series.T - series.tau
    limits.check(u, n_free)
    cfg, cache, baseline, stats1, keys1, log_const = _prepare(series, u, grid_n, config)
    if not math.isfinite(log_const):
        return -math.inf
    stimuli = series.post_stimuli
    responses = series.post_responses
    acc = _LogSumAccumulator()

    def recurse(i: int, stats: UnitStats, keys: tuple, log_acc: float) -> None:
        if i == n_free:
            acc.add(log_acc)
            return
        y = float(responses[i])
        s = float(stimuli[i])
        w = _step_weights(cache, baseline, stats, keys, y, s, u)
        for c in range(1 << u):
            if w[c] == -math.inf:
                continue
            st, ks = _advance(cache, stats, keys, c, u, y, s, baseline.m_bar)
            recurse(i + 1, st, ks, log_acc + float(w[c]))

    recurse(0, stats1, keys1, 0.0)
    return log_const + acc.value()


def enumerate_path_logs(
    series: StimulusResponseSeries,
    u: int,
    grid_n: int,
    config: ModelConfig | None = None,
    limits: OracleLimits | None = None,
) -> np.ndarray:
    """Log joint of every firing path, shape (2^(u * n_free),).

    Paths enumerate the free records' combos lexicographically (earliest
    record in the lowest digit block). log-sum-exp of the returned array
    equals exact_log_ml up to accumulation order.
    """
    limits = limits or OracleLimits()
    n_free = series.T - series.tau
    limits.check(u, n_free)
    if u * n_free > 20:
        raise ValidationError("path table too large to materialize")
    cfg, cache, baseline, stats1, keys1, log_const = _prepare(series, u, grid_n, config)
    n_paths = 1 << (u * n_free)
    out = np.full(n_paths, -np.inf)
    if not math.isfinite(log_const):
        return out
    stimuli = series.post_stimuli
    responses = series.post_responses

    def recurse(i: int, stats: UnitStats, keys: tuple, log_acc: float, base: int) -> None:
        if i == n_free:
            out[base] = log_acc
            return
        y = float(responses[i])
        s = float(stimuli[i])
        w = _step_weights(cache, baseline, stats, keys, y, s, u)
        for c in range(1 << u):
            child_base = base | (c << (u * i))
            if w[c] == -math.inf:
                continue  # whole subtree stays -inf
            st, ks = _advance(cache, stats, keys, c, u, y, s, baseline.m_bar)
            recurse(i + 1, st, ks, log_acc + float(w[c]), child_base)

    recurse(0, stats1, keys1, log_const, 0)
    return out
