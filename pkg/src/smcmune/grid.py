"""Lattice posteriors over (eta, lam), trapezium quadrature, and the grid cache.

Each unit's excitability posterior is carried as unnormalized log values on a
regular rectangular lattice. Bilinear interpolation of vertex products makes
every integral a compound trapezium sum over vertex values, so predictives are
ratios of two weighted sums. Grids for identical firing histories are shared
through a cache keyed by the history bitstring.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .errors import AnnihilatedPosteriorError, ValidationError
from .model import ExcitabilityCurve, excitability_prior_logdensity

__all__ = [
    "Lattice",
    "GridPosterior",
    "GridCache",
    "EMPTY_KEY",
    "child_key",
    "init_grid",
    "grid_update",
    "trapezium_integral",
    "unit_fire_predictive",
    "cache_get_or_extend",
    "grid_posterior_summary",
    "GridSummary",
]

# History key: (length, bits) with bit l set iff the unit fired at the l-th
# non-baseline observation. Python ints, so histories of any length fit.
EMPTY_KEY = (0, 0)


def child_key(key: tuple[int, int], fired: int) -> tuple[int, int]:
    length, bits = key
    return (length + 1, bits | (int(bool(fired)) << length))


@dataclass(frozen=True)
class Lattice:
    """Regular vertex lattice over (0, eta_max] x (0, lambda_max].

    Vertices sit at i*eta_max/n_eta (i = 1..n_eta) and j*lambda_max/n_lambda;
    the lattice is open at zero, avoiding the prior's boundary zero and the
    log-stimulus singularity at eta = 0.
    """

    n_eta: int
    n_lambda: int
    eta_max: float
    lambda_max: float

    def __post_init__(self) -> None:
        if self.n_eta < 2 or self.n_lambda < 2:
            raise ValidationError("lattice needs at least 2 vertices per dimension")
        if self.eta_max <= 0 or self.lambda_max <= 0:
            raise ValidationError("lattice bounds must be positive")

    @cached_property
    def etas(self) -> np.ndarray:
        return self.eta_max * np.arange(1, self.n_eta + 1) / self.n_eta

    @cached_property
    def lams(self) -> np.ndarray:
        return self.lambda_max * np.arange(1, self.n_lambda + 1) / self.n_lambda

    @property
    def d_eta(self) -> float:
        return self.eta_max / self.n_eta

    @property
    def d_lambda(self) -> float:
        return self.lambda_max / self.n_lambda

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return self.etas[:, None], self.lams[None, :]

    @cached_property
    def trap_weights(self) -> np.ndarray:
        """Tensor-product trapezium weights: corners 1/4, edges 1/2, interior 1."""
        we = np.ones(self.n_eta)
        we[0] = we[-1] = 0.5
        wl = np.ones(self.n_lambda)
        wl[0] = wl[-1] = 0.5
        return np.outer(we, wl)

    @cached_property
    def trap_flat(self) -> np.ndarray:
        return self.trap_weights.ravel()

    @property
    def cell_area(self) -> float:
        return self.d_eta * self.d_lambda


@dataclass(frozen=True)
class GridPosterior:
    """Unnormalized log posterior values at lattice vertices.

    log_values are stored shifted so their maximum is zero; max_log accumulates
    the shifts, so the true log density at a vertex is log_values + max_log.
    """

    lattice: Lattice
    log_values: np.ndarray
    max_log: float

    def __post_init__(self) -> None:
        if self.log_values.shape != (self.lattice.n_eta, self.lattice.n_lambda):
            raise ValidationError("log_values shape does not match the lattice")
        # linear-domain values, precomputed: every grid the filter creates is
        # queried for a predictive on the very next observation
        object.__setattr__(self, "values_flat", np.exp(self.log_values).ravel())


def init_grid(lattice: Lattice) -> GridPosterior:
    """Prior grid: scaled-beta log density of (eta, lam) at each vertex."""
    e, l = lattice.mesh
    lv = excitability_prior_logdensity(
        np.broadcast_to(e, (lattice.n_eta, lattice.n_lambda)),
        np.broadcast_to(l, (lattice.n_eta, lattice.n_lambda)),
        lattice.eta_max,
        lattice.lambda_max,
    )
    m = float(lv.max())
    return GridPosterior(lattice, lv - m, m)


def grid_update(
    g: GridPosterior,
    fired: int,
    s: float,
    curve: ExcitabilityCurve,
    log_factor: np.ndarray | None = None,
) -> GridPosterior:
    """Multiply the grid by the firing (or non-firing) likelihood at stimulus s.

    log_factor may carry the precomputed likelihood mesh (the same for every
    grid updated at one observation); when omitted it is evaluated here.
    """
    if s <= 0:
        raise ValidationError("grid updates need a positive stimulus")
    if log_factor is None:
        e, l = g.lattice.mesh
        if fired:
            log_factor = curve.log_prob(s, e, l)
        else:
            log_factor = curve.log_one_minus(s, e, l)
    lv = g.log_values + log_factor
    m = float(lv.max())
    if not np.isfinite(m):
        raise AnnihilatedPosteriorError(
            f"excitability posterior annihilated at s={s}, fired={int(bool(fired))}"
        )
    return GridPosterior(g.lattice, lv - m, g.max_log + m)


def trapezium_integral(
    g: GridPosterior,
    pointwise_log_factor: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> float:
    """Compound trapezium sum of exp(log_values [+ factor]) over the lattice.

    Uses the shifted log values; the caller re-applies exp(max_log) when an
    absolute (non-ratio) value is needed.
    """
    lv = g.log_values
    if pointwise_log_factor is not None:
        e, l = g.lattice.mesh
        lv = lv + pointwise_log_factor(e, l)
    return float(np.sum(g.lattice.trap_weights * np.exp(lv)) * g.lattice.cell_area)


def unit_fire_predictive(
    g: GridPosterior,
    s: float,
    curve: ExcitabilityCurve,
    f_flat: np.ndarray | None = None,
) -> float:
    """Posterior firing probability at stimulus s: ratio of two trapezium sums.

    The cell area cancels, so both sums are plain dot products of the grid's
    values with trapezium-weighted meshes. f_flat may carry the precomputed
    curve-times-weights mesh (identical for every grid at one stimulus).
    """
    if s <= 0:
        raise ValidationError("firing predictive needs a positive stimulus")
    vals = g.values_flat
    lat = g.lattice
    den = float(vals @ lat.trap_flat)
    if den == 0.0:
        raise AnnihilatedPosteriorError("zero posterior mass under the lattice")
    if f_flat is None:
        e, l = lat.mesh
        f_flat = (curve.prob(s, e, l) * lat.trap_weights).ravel()
    p = float(vals @ f_flat) / den
    # clamp against quadrature round-off at the ends of the unit interval
    return min(max(p, 0.0), 1.0)


class GridSummary(NamedTuple):
    eta_median: float
    eta_lo: float
    eta_hi: float
    lam_median: float
    lam_lo: float
    lam_hi: float


def _marginal_quantiles(vertices: np.ndarray, density: np.ndarray, qs) -> list[float]:
    """Quantiles of a piecewise-linear density known at vertices."""
    seg = 0.5 * (density[:-1] + density[1:]) * np.diff(vertices)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        raise AnnihilatedPosteriorError("zero marginal mass")
    return [float(np.interp(q * total, cum, vertices)) for q in qs]


def grid_posterior_summary(g: GridPosterior) -> GridSummary:
    """Median and central 95% interval of each marginal, by trapezium sums."""
    lat = g.lattice
    vals = np.exp(g.log_values)
    we = np.ones(lat.n_lambda)
    we[0] = we[-1] = 0.5
    marg_eta = (vals * we[None, :]).sum(axis=1) * lat.d_lambda
    wl = np.ones(lat.n_eta)
    wl[0] = wl[-1] = 0.5
    marg_lam = (vals * wl[:, None]).sum(axis=0) * lat.d_eta
    qs = (0.5, 0.025, 0.975)
    eq = _marginal_quantiles(lat.etas, marg_eta, qs)
    lq = _marginal_quantiles(lat.lams, marg_lam, qs)
    return GridSummary(eq[0], eq[1], eq[2], lq[0], lq[1], lq[2])


class _CacheEntry:
    __slots__ = ("grid", "predictives")

    def __init__(self, grid: GridPosterior):
        self.grid = grid
        self.predictives: dict[float, float] = {}


class GridCache:
    """Shared store of per-firing-history grids and their firing predictives.

    Grids are immutable once inserted; two units (of any particles) with the
    same history key share one entry. Inserting an already-present key is a
    no-op (first writer wins; recomputation would yield the identical grid).
    """

    def __init__(self, lattice: Lattice, curve: ExcitabilityCurve):
        self.lattice = lattice
        self.curve = curve
        self._entries: dict[tuple[int, int], _CacheEntry] = {
            EMPTY_KEY: _CacheEntry(init_grid(lattice))
        }
        # per-stimulus likelihood meshes, shared by every grid touched at one
        # observation; bounded by the number of distinct stimuli in a series
        self._log_mesh: dict[tuple[float, int], np.ndarray] = {}
        self._f_flat: dict[float, np.ndarray] = {}
        self.updates_computed = 0
        self.predictives_computed = 0

    def _log_factor(self, s: float, fired: int) -> np.ndarray:
        key = (s, fired)
        m = self._log_mesh.get(key)
        if m is None:
            e, l = self.lattice.mesh
            m = self.curve.log_prob(s, e, l) if fired else self.curve.log_one_minus(s, e, l)
            self._log_mesh[key] = m
        return m

    def f_flat(self, s: float) -> np.ndarray:
        f = self._f_flat.get(s)
        if f is None:
            e, l = self.lattice.mesh
            f = (self.curve.prob(s, e, l) * self.lattice.trap_weights).ravel()
            self._f_flat[s] = f
        return f

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._entries

    def grid(self, key: tuple[int, int]) -> GridPosterior:
        return self._entries[key].grid

    def get_or_extend(
        self,
        key: tuple[int, int],
        parent_key: tuple[int, int],
        fired: int,
        s: float,
        curve: ExcitabilityCurve | None = None,
    ) -> GridPosterior:
        entry = self._entries.get(key)
        if entry is not None:
            return entry.grid
        parent = self._entries.get(parent_key)
        if parent is None:
            raise ValidationError(f"parent grid {parent_key!r} missing from cache")
        if curve is None or curve is self.curve:
            g = grid_update(
                parent.grid, fired, s, self.curve,
                log_factor=self._log_factor(float(s), int(bool(fired))),
            )
        else:
            g = grid_update(parent.grid, fired, s, curve)
        self.updates_computed += 1
        self._entries[key] = _CacheEntry(g)
        return g

    def predictive(self, key: tuple[int, int], s: float) -> float:
        entry = self._entries[key]
        p = entry.predictives.get(s)
        if p is None:
            p = unit_fire_predictive(entry.grid, s, self.curve, f_flat=self.f_flat(s))
            self.predictives_computed += 1
            entry.predictives[s] = p
        return p

    def evict_except(self, live_keys: Iterable[tuple[int, int]]) -> None:
        keep = set(live_keys)
        keep.add(EMPTY_KEY)
        for key in [k for k in self._entries if k not in keep]:
            del self._entries[key]


def cache_get_or_extend(
    cache: GridCache,
    key: tuple[int, int],
    parent_key: tuple[int, int],
    fired: int,
    s: float,
    curve: ExcitabilityCurve | None = None,
) -> GridPosterior:
    """Cached child-grid lookup; computes one grid_update from the parent on miss."""
    return cache.get_or_extend(key, parent_key, fired, s, curve)
