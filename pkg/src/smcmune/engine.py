"""Fully adapted particle filter over unit firing histories.

Particles carry exact conjugate sufficient statistics instead of parameter
draws. Each step weights every particle by its exact one-step predictive of
the next response (summing the joint density over all 2^u firing vectors),
resamples, then draws the firing vector from its exact conditional posterior.
The evidence estimate accumulates log(mean weight) per step.

The per-combo tables enumerate firing vectors in Gray-code order so the
quadratic forms x'Cx, the inner products x'm, and the firing-prior log-odds
all update by O(u) rank-1 deltas per combo instead of O(u^2) recomputation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .conjugate import (
    BaselineStats,
    UnitStats,
    _firing_update_batch,
    baseline_update,
    firing_update,
    init_baseline_stats,
    init_unit_stats,
    observation_predictive_logdensity,
    set_nu_prior,
)
from .errors import AnnihilatedPosteriorError, ValidationError
from .grid import (
    EMPTY_KEY,
    GridCache,
    GridPosterior,
    Lattice,
    child_key,
    grid_update,
    init_grid,
    unit_fire_predictive,
)
from .model import ExcitabilityCurve, ModelConfig, StimulusResponseSeries, get_curve
from .resampling import residual_systematic_resample

__all__ = [
    "Particle",
    "Diagnostics",
    "RunResult",
    "assimilate_baseline_phase",
    "particle_weight",
    "combo_log_tables",
    "propagate",
    "assimilate_supramaximal",
    "residual_systematic_resample",
    "smc_run",
]

_DEFAULT_CONFIG = ModelConfig()


@dataclass
class Particle:
    """One filter particle: per-unit firing-history keys plus conjugate stats.

    ``unit_history_keys[j]`` is the (length, bits) key of unit j's firing
    indicators over the non-baseline observations assimilated so far; all keys
    share one length. ``combo_table`` is the transient per-step table of log
    joint weights indexed by firing-vector integer (bit j = unit j fired).
    """

    unit_history_keys: tuple[tuple[int, int], ...]
    unit_stats: UnitStats | None
    combo_table: np.ndarray | None = None


@dataclass
class Diagnostics:
    ess_trace: list[float] = field(default_factory=list)
    cache_size_trace: list[int] = field(default_factory=list)
    grid_updates_computed: int = 0
    predictives_computed: int = 0
    annihilated: bool = False
    annihilated_at: int | None = None  # 1-based observation index, None if completed
    timings: dict[str, float] = field(default_factory=dict)


def assimilate_baseline_phase(
    series: StimulusResponseSeries, config: ModelConfig | None = None
) -> tuple[BaselineStats, float]:
    """Fold the zero-stimulus records into the baseline posterior.

    Deterministic and shared by every particle: no unit fires at zero stimulus
    (the log-logistic curve gives F(0) = 0 exactly), so each record only moves
    the baseline statistics and contributes its Student-t predictive density.
    Returns the final statistics and the summed log predictive.
    """
    cfg = config or _DEFAULT_CONFIG
    stats = init_baseline_stats(cfg)
    log_ml = 0.0
    none_fire = np.zeros(1)
    for y in series.baseline_responses:
        log_ml += observation_predictive_logdensity(float(y), none_fire, stats, None)
        stats = baseline_update(stats, float(y))
    return stats, log_ml


def _bits_matrix(combos: np.ndarray, u: int) -> np.ndarray:
    """(len(combos), u) 0/1 matrix; bit j of combo c says whether unit j fired."""
    return ((combos[:, None] >> np.arange(u)[None, :]) & 1).astype(np.int8)


def _combo_tables_gray(A, B, M, C, log_p, log_np, y, m_bar, baseline_log_t):
    """log joint weight per firing combo, Gray-code incremental, (N, 2^u).

    log_p/log_np are (N, u) arrays of log p_j and log(1 - p_j); entries may be
    -inf. The -inf bookkeeping runs on finite surrogates plus per-particle
    counts of -inf terms, because incremental +/- arithmetic cannot pass
    through infinities.
    """
    n_p, u = M.shape
    n_combos = 1 << u
    out = np.empty((n_p, n_combos))

    p_ninf = np.isinf(log_p)
    np_ninf = np.isinf(log_np)
    p_fin = np.where(p_ninf, 0.0, log_p)
    np_fin = np.where(np_ninf, 0.0, log_np)

    lp_fin = np_fin.sum(axis=1)
    lp_ninf = np_ninf.sum(axis=1, dtype=np.int64)

    out[:, 0] = np.where(lp_ninf == 0, lp_fin, -np.inf) + baseline_log_t

    const = gammaln(A + 0.5) - gammaln(A) - 0.5 * np.log(2.0 * math.pi * B)
    half_up = A + 0.5
    two_b = 2.0 * B

    quad = np.zeros(n_p)  # x' C x
    cvec = np.zeros((n_p, u))  # C x
    mdot = np.zeros(n_p)  # x . m
    n_on = 0  # sum of x

    g = 0
    for k in range(1, n_combos):
        j = (k & -k).bit_length() - 1
        g_next = g ^ (1 << j)
        on = (g_next >> j) & 1
        sgn = 1.0 if on else -1.0
        quad += sgn * 2.0 * cvec[:, j] + C[:, j, j]
        cvec += sgn * C[:, :, j]
        mdot += sgn * M[:, j]
        n_on += 1 if on else -1
        if on:
            lp_fin += p_fin[:, j] - np_fin[:, j]
            lp_ninf += p_ninf[:, j]
            lp_ninf -= np_ninf[:, j]
        else:
            lp_fin += np_fin[:, j] - p_fin[:, j]
            lp_ninf += np_ninf[:, j]
            lp_ninf -= p_ninf[:, j]
        g = g_next

        spread = quad + n_on  # x'Cx + x'x, strictly positive for x != 0
        resid = y - m_bar - mdot
        log_t = const - 0.5 * np.log(spread) - half_up * np.log1p(
            resid * resid / (two_b * spread)
        )
        out[:, g] = np.where(lp_ninf == 0, lp_fin, -np.inf) + log_t
    return out


def _combo_tables_naive(A, B, M, C, log_p, log_np, y, m_bar, baseline_log_t):
    """Reference per-combo recomputation; same contract as the Gray-code path."""
    n_p, u = M.shape
    n_combos = 1 << u
    out = np.empty((n_p, n_combos))
    out[:, 0] = log_np.sum(axis=1) + baseline_log_t
    const = gammaln(A + 0.5) - gammaln(A) - 0.5 * np.log(2.0 * math.pi * B)
    for c in range(1, n_combos):
        x = _bits_matrix(np.array([c]), u)[0].astype(float)
        v = np.einsum("nij,j->ni", C, x)
        quad = np.einsum("ni,i->n", v, x)
        spread = quad + x.sum()
        resid = y - m_bar - np.einsum("ni,i->n", M, x)
        log_t = const - 0.5 * np.log(spread) - (A + 0.5) * np.log1p(
            resid * resid / (2.0 * B * spread)
        )
        prior = np.where(x > 0, log_p, log_np).sum(axis=1)
        out[:, c] = prior + log_t
    return out


def combo_log_tables(
    A: np.ndarray,
    B: np.ndarray,
    M: np.ndarray,
    C: np.ndarray,
    predictives: np.ndarray,
    y: float,
    baseline: BaselineStats,
    prune_threshold: float = 0.0,
    enumeration: str = "gray",
) -> np.ndarray:
    """Per-particle log joint weight of every firing combo, shape (N, 2^u).

    Row i, column c holds log[ prior(c | predictives_i) * t_density(y | c) ]
    for particle i, with column 0 using the frozen-baseline Student-t. Combos
    whose firing-prior probability falls below prune_threshold are dropped
    (set to -inf); the default 0 keeps the enumeration exact.
    """
    if enumeration not in ("gray", "naive"):
        raise ValidationError(f"unknown enumeration mode {enumeration!r}")
    p = np.asarray(predictives, dtype=float)
    if p.ndim == 1:
        p = np.broadcast_to(p, (M.shape[0], p.size))
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
        log_np = np.log1p(-p)
    base_lt = observation_predictive_logdensity(y, np.zeros(1), baseline, None)
    build = _combo_tables_gray if enumeration == "gray" else _combo_tables_naive
    table = build(A, B, M, C, log_p, log_np, float(y), baseline.m_bar, base_lt)
    if prune_threshold > 0.0:
        thr = math.log(prune_threshold)
        u = M.shape[1]
        for c in range(table.shape[1]):
            x = _bits_matrix(np.array([c]), u)[0].astype(bool)
            prior = np.where(x[None, :], log_p, log_np).sum(axis=1)
            table[prior < thr, c] = -np.inf
    return table


def particle_weight(
    p: Particle,
    baseline: BaselineStats,
    y: float,
    s: float,
    predictives: Sequence[float],
    prune_threshold: float = 0.0,
    enumeration: str = "gray",
) -> tuple[float, np.ndarray]:
    """Exact one-step predictive weight of a single particle.

    Enumerates every firing vector, weighting each by its grid firing prior
    times the conjugate Student-t density of y; the particle weight is the
    log-sum-exp over the table. Returns (log weight, combo table); an all--inf
    table (weight zero) is legal and left to the resampler.
    """
    if p.unit_stats is None:
        raise ValidationError("particle has no unit statistics (pre-supramaximal)")
    st = p.unit_stats
    table = combo_log_tables(
        np.array([st.a]),
        np.array([st.b]),
        st.m[None, :],
        st.C[None, :, :],
        np.asarray(predictives, dtype=float)[None, :],
        float(y),
        baseline,
        prune_threshold,
        enumeration,
    )[0]
    with np.errstate(divide="ignore"):
        log_w = float(logsumexp(table))
    return log_w, table


def _sample_combos(tables: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Draw one combo per row from the normalized table, by inverse CDF."""
    row_max = tables.max(axis=1)
    cum = np.cumsum(np.exp(tables - row_max[:, None]), axis=1)
    pts = uniforms * cum[:, -1]
    combos = (cum <= pts[:, None]).sum(axis=1)
    return np.minimum(combos, tables.shape[1] - 1)


def propagate(
    p: Particle,
    combo_table: np.ndarray,
    y: float,
    s: float,
    rng: np.random.Generator,
    caches: GridCache,
    baseline: BaselineStats,
) -> Particle:
    """Advance one particle: sample its firing vector from the combo table,
    extend each unit's history key and grid, and apply the conjugate update
    (firing vectors of all zeros leave the statistics untouched)."""
    table = np.asarray(combo_table, dtype=float)
    if not np.isfinite(table).any():
        raise ValidationError("cannot propagate a zero-probability particle")
    u = len(p.unit_history_keys)
    combo = int(_sample_combos(table[None, :], np.array([rng.uniform()]))[0])
    bits = [(combo >> j) & 1 for j in range(u)]
    new_keys = []
    for j, key in enumerate(p.unit_history_keys):
        nk = child_key(key, bits[j])
        caches.get_or_extend(nk, key, bits[j], float(s))
        new_keys.append(nk)
    stats = p.unit_stats
    if combo != 0:
        stats = firing_update(stats, np.array(bits, dtype=float), float(y), baseline.m_bar)
    return Particle(tuple(new_keys), stats, None)


def _supramax_increment(
    stats0: UnitStats, baseline: BaselineStats, y_tau: float, s_tau: float, p_fire: float
) -> float:
    """Log joint predictive of the supramaximal response with all units forced on."""
    u = stats0.u
    log_fire = u * (math.log(p_fire) if p_fire > 0.0 else -math.inf)
    ones = np.ones(u)
    return log_fire + observation_predictive_logdensity(y_tau, ones, baseline, stats0)


def assimilate_supramaximal(
    particles: list[Particle],
    baseline: BaselineStats,
    y_tau: float,
    s_tau: float,
    nu_prior_b: float,
    caches: GridCache,
    config: ModelConfig | None = None,
) -> tuple[list[Particle], float]:
    """First non-baseline step: install unit priors and force all units to fire.

    Every particle is identical before this observation, so the log-evidence
    increment is a single deterministic number and no resampling is needed.
    Each unit's grid takes a fired=1 update at the supramaximal stimulus.
    """
    cfg = config or _DEFAULT_CONFIG
    if not particles:
        raise ValidationError("empty particle set")
    u = len(particles[0].unit_history_keys)
    stats0 = init_unit_stats(u, nu_prior_b, cfg)
    p_fire = caches.predictive(EMPTY_KEY, float(s_tau))
    increment = _supramax_increment(stats0, baseline, float(y_tau), float(s_tau), p_fire)
    if not math.isfinite(increment):
        return particles, -math.inf
    stats1 = firing_update(stats0, np.ones(u), float(y_tau), baseline.m_bar)
    key1 = child_key(EMPTY_KEY, 1)
    caches.get_or_extend(key1, EMPTY_KEY, 1, float(s_tau))
    keys = (key1,) * u
    return [Particle(keys, stats1, None) for _ in particles], increment


class _CachedGridStore:
    """Grid backend sharing one grid per distinct firing history via GridCache.

    Particle-unit slots hold int32 ids into ``keys`` (the live history keys);
    predictives and child grids are computed once per distinct key.
    """

    shared = True

    def __init__(self, lattice: Lattice, curve: ExcitabilityCurve):
        self.cache = GridCache(lattice, curve)
        self.keys: list[tuple[int, int]] = [EMPTY_KEY]

    def predictive_matrix(self, ids: np.ndarray, s: float) -> np.ndarray:
        vals = np.array([self.cache.predictive(k, s) for k in self.keys])
        return vals[ids]

    def advance(self, ids: np.ndarray, bits: np.ndarray, s: float) -> np.ndarray:
        codes = ids.astype(np.int64) * 2 + bits
        uniq, inv = np.unique(codes, return_inverse=True)
        new_keys = []
        for code in uniq:
            parent = self.keys[int(code) >> 1]
            fired = int(code) & 1
            nk = child_key(parent, fired)
            self.cache.get_or_extend(nk, parent, fired, s)
            new_keys.append(nk)
        self.keys = new_keys
        self.cache.evict_except(new_keys)
        return inv.reshape(ids.shape).astype(np.int32)

    def reorder(self, idx: np.ndarray) -> None:
        pass  # slots carry ids; nothing stored per slot

    def grid_for_slot(self, ids: np.ndarray, i: int, j: int) -> GridPosterior:
        return self.cache.grid(self.keys[ids[i, j]])

    def size(self) -> int:
        return len(self.cache)

    def stats(self) -> tuple[int, int]:
        return self.cache.updates_computed, self.cache.predictives_computed


class _PlainGridStore:
    """Uncached backend: every particle-unit slot owns its grid.

    Exists to demonstrate the cache is a pure optimization; results must be
    bit-identical to the shared store. Key bookkeeping mirrors the cached
    store so history keys remain available.
    """

    shared = False

    def __init__(self, lattice: Lattice, curve: ExcitabilityCurve, n: int, u: int):
        self.curve = curve
        self.keys: list[tuple[int, int]] = [EMPTY_KEY]
        prior = init_grid(lattice)
        self.grids = np.empty((n, u), dtype=object)
        self.grids[:, :] = prior
        self.updates = 0
        self.predictives = 0

    def predictive_matrix(self, ids: np.ndarray, s: float) -> np.ndarray:
        n, u = self.grids.shape
        out = np.empty((n, u))
        for i in range(n):
            for j in range(u):
                out[i, j] = unit_fire_predictive(self.grids[i, j], s, self.curve)
                self.predictives += 1
        return out

    def advance(self, ids: np.ndarray, bits: np.ndarray, s: float) -> np.ndarray:
        n, u = self.grids.shape
        for i in range(n):
            for j in range(u):
                self.grids[i, j] = grid_update(self.grids[i, j], int(bits[i, j]), s, self.curve)
                self.updates += 1
        codes = ids.astype(np.int64) * 2 + bits
        uniq, inv = np.unique(codes, return_inverse=True)
        self.keys = [
            child_key(self.keys[int(code) >> 1], int(code) & 1) for code in uniq
        ]
        return inv.reshape(ids.shape).astype(np.int32)

    def reorder(self, idx: np.ndarray) -> None:
        self.grids = self.grids[idx]

    def grid_for_slot(self, ids: np.ndarray, i: int, j: int) -> GridPosterior:
        return self.grids[i, j]

    def size(self) -> int:
        return int(np.prod(self.grids.shape))

    def stats(self) -> tuple[int, int]:
        return self.updates, self.predictives


@dataclass
class RunResult:
    """Output of one filter run: evidence estimate, final particles, diagnostics."""

    u: int
    log_ml: float
    baseline_stats: BaselineStats
    nu_prior_b: float
    diagnostics: Diagnostics
    n_particles: int
    grid_n: int
    seed: int
    eta_max: float
    config: ModelConfig
    _A: np.ndarray | None = None
    _B: np.ndarray | None = None
    _M: np.ndarray | None = None
    _C: np.ndarray | None = None
    _ids: np.ndarray | None = None
    _store: object | None = None

    @property
    def annihilated(self) -> bool:
        return self.diagnostics.annihilated

    @property
    def ess_trace(self) -> list[float]:
        return self.diagnostics.ess_trace

    @property
    def history_keys(self) -> list[tuple[int, int]]:
        return list(self._store.keys) if self._store is not None else []

    @property
    def particles(self) -> list[Particle]:
        """Materialize the final particle set (lazy; large for big N)."""
        if self._A is None:
            return []
        keys = self._store.keys
        out = []
        for i in range(self._A.size):
            ks = tuple(keys[self._ids[i, j]] for j in range(self.u))
            st = UnitStats(
                a=float(self._A[i]), b=float(self._B[i]), m=self._M[i].copy(),
                C=self._C[i].copy(),
            )
            out.append(Particle(ks, st, None))
        return out

    def unique_components(self) -> tuple[np.ndarray, np.ndarray]:
        """Particle mixture deduplicated by full firing history.

        Returns (weights, representative slot indices): particles sharing all
        u history keys carry identical statistics, so the equal-weight mixture
        collapses to one component per distinct history with weight
        multiplicity/N. Order is the lexicographic order of the id rows.
        """
        if self._ids is None:
            raise ValidationError("annihilated run has no final particle set")
        _, first, counts = np.unique(
            self._ids, axis=0, return_index=True, return_counts=True
        )
        return counts / self._ids.shape[0], first

    def component_stats(self, slot: int) -> UnitStats:
        return UnitStats(
            a=float(self._A[slot]), b=float(self._B[slot]), m=self._M[slot].copy(),
            C=self._C[slot].copy(),
        )

    def grid_for(self, slot: int, j: int) -> GridPosterior:
        return self._store.grid_for_slot(self._ids, int(slot), int(j))


def smc_run(
    series: StimulusResponseSeries,
    u: int,
    n_particles: int | None = None,
    grid_n: int | None = None,
    config: ModelConfig | None = None,
    rng_seed: int | None = None,
    *,
    use_cache: bool = True,
    enumeration: str = "gray",
) -> RunResult:
    """One complete filter pass for a fixed unit count u.

    Baseline phase, unit-precision prior calibration, the forced supramaximal
    update, then one weight/resample/propagate sweep per remaining
    observation, accumulating log f += log(sum of weights) - log N. A fixed
    seed makes the run bit-reproducible; if every particle's weight vanishes
    the result reports log_ml = -inf with the failing step in diagnostics.
    """
    cfg = config or _DEFAULT_CONFIG
    if u < 1:
        raise ValidationError("unit count must be >= 1")
    n_p = cfg.n_particles0 if n_particles is None else int(n_particles)
    if n_p < 1:
        raise ValidationError("need at least one particle")
    n_g = cfg.grid_n0 if grid_n is None else int(grid_n)
    seed = cfg.seed if rng_seed is None else int(rng_seed)
    if seed < 0:
        raise ValidationError("seed must be non-negative")
    curve = get_curve(cfg.curve)
    eta_max = cfg.resolve_eta_max(series)
    lattice = Lattice(n_g, n_g, eta_max, cfg.lambda_max)

    diag = Diagnostics()
    baseline, log_ml = assimilate_baseline_phase(series, cfg)
    b0 = set_nu_prior(cfg.a0, cfg.delta, cfg.epsilon, baseline)

    if use_cache:
        store = _CachedGridStore(lattice, curve)
    else:
        store = _PlainGridStore(lattice, curve, n_p, u)
    ids = np.zeros((n_p, u), dtype=np.int32)

    def result(annihilated_at: int | None = None) -> RunResult:
        if annihilated_at is not None:
            diag.annihilated = True
            diag.annihilated_at = annihilated_at
        diag.grid_updates_computed, diag.predictives_computed = store.stats()
        return RunResult(
            u=u,
            log_ml=-math.inf if diag.annihilated else log_ml,
            baseline_stats=baseline,
            nu_prior_b=b0,
            diagnostics=diag,
            n_particles=n_p,
            grid_n=n_g,
            seed=seed,
            eta_max=eta_max,
            config=cfg,
            _A=A,
            _B=B,
            _M=M,
            _C=C,
            _ids=ids,
            _store=store,
        )

    # supramaximal step: identical for every particle, so computed once
    stats0 = init_unit_stats(u, b0, cfg)
    s_tau, y_tau = series.supramax_stimulus, series.supramax_response
    if store.shared:
        p_fire = store.cache.predictive(EMPTY_KEY, s_tau)
    else:
        p_fire = unit_fire_predictive(store.grids[0, 0], s_tau, curve)
    increment = _supramax_increment(stats0, baseline, y_tau, s_tau, p_fire)
    A = np.full(n_p, stats0.a)
    B = np.full(n_p, stats0.b)
    M = np.tile(stats0.m, (n_p, 1))
    C = np.tile(stats0.C, (n_p, 1, 1))
    if not math.isfinite(increment):
        return result(annihilated_at=series.tau)
    log_ml += increment
    stats1 = firing_update(stats0, np.ones(u), y_tau, baseline.m_bar)
    A[:] = stats1.a
    B[:] = stats1.b
    M[:] = stats1.m
    C[:] = stats1.C
    try:
        ids = store.advance(ids, np.ones((n_p, u), dtype=np.int8), s_tau)
    except AnnihilatedPosteriorError:
        return result(annihilated_at=series.tau)
    diag.ess_trace.append(float(n_p))
    diag.cache_size_trace.append(store.size())

    log_n = math.log(n_p)
    for step, (s, y) in enumerate(
        zip(series.post_stimuli, series.post_responses), start=series.tau + 1
    ):
        rng = np.random.default_rng([seed, step])
        try:
            P = store.predictive_matrix(ids, float(s))
        except AnnihilatedPosteriorError:
            return result(annihilated_at=step)
        tables = combo_log_tables(
            A, B, M, C, P, float(y), baseline, cfg.prune_threshold, enumeration
        )
        with np.errstate(divide="ignore"):
            log_w = logsumexp(tables, axis=1)
        w_max = float(np.max(log_w))
        if not math.isfinite(w_max):
            return result(annihilated_at=step)
        w_lin = np.exp(log_w - w_max)
        w_sum = float(w_lin.sum())
        log_ml += w_max + math.log(w_sum) - log_n
        w_norm = w_lin / w_sum
        diag.ess_trace.append(float(1.0 / np.sum(w_norm * w_norm)))

        idx = residual_systematic_resample(w_norm, rng)
        A, B, M, C, ids = A[idx], B[idx], M[idx], C[idx], ids[idx]
        tables = tables[idx]
        store.reorder(idx)

        combos = _sample_combos(tables, rng.uniform(size=n_p))
        uniq = np.unique(combos)
        for c in uniq:
            if c == 0:
                continue
            sel = combos == c
            x = _bits_matrix(np.array([c]), u)[0].astype(float)
            a2, b2, m2, c2 = _firing_update_batch(
                A[sel], B[sel], M[sel], C[sel], x, float(y), baseline.m_bar
            )
            A[sel], B[sel], M[sel], C[sel] = a2, b2, m2, c2
        bits = _bits_matrix(combos, u)
        try:
            ids = store.advance(ids, bits, float(s))
        except AnnihilatedPosteriorError:
            return result(annihilated_at=step)
        diag.cache_size_trace.append(store.size())

    return result()
