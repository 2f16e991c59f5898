"""Post-run evidence recalibration and posterior summaries from the particle mixture.

The filter runs with an unconstrained twitch-force prior; a physiological
lower bound mu_min enters afterwards by multiplying the evidence with the
ratio of posterior to prior orthant probabilities (both multivariate
Student-t). Parameter summaries come from the equal-weight particle mixture,
deduplicated by firing history since identical histories carry identical
statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc, gammainccinv, stdtr, stdtrit

from .conjugate import BaselineStats, UnitStats
from .engine import RunResult
from .errors import ValidationError
from .grid import GridPosterior, grid_posterior_summary, trapezium_integral
from .model import ModelConfig, StimulusResponseSeries
from .orthant import OrthantQuery, student_t_orthant

__all__ = [
    "IntervalSummary",
    "UnitSummary",
    "ParameterReport",
    "LevelRow",
    "prior_orthant_log",
    "posterior_orthant",
    "recalibrate_log_ml",
    "posterior_mixture_summaries",
    "modal_firing_by_level",
    "unit_display_order",
    "mixture_fire_curve",
    "mixture_response_density",
]


@dataclass(frozen=True)
class IntervalSummary:
    """Median and central 95% credible interval."""

    median: float
    lower: float
    upper: float


@dataclass(frozen=True)
class UnitSummary:
    label: int  # 1-based, ascending posterior-mean threshold
    eta_mean: float
    eta: IntervalSummary
    lam: IntervalSummary
    mu: IntervalSummary


@dataclass(frozen=True)
class ParameterReport:
    units: tuple[UnitSummary, ...]
    nu_inv: IntervalSummary
    nu_bar_inv: IntervalSummary
    n_components: int


@dataclass(frozen=True)
class LevelRow:
    level: int
    n_obs: int
    response_mean: float
    response_min: float
    response_max: float
    firing: tuple[int, ...]  # display unit order (ascending threshold)


def _mixture_components(run: RunResult) -> tuple[np.ndarray, np.ndarray]:
    if run.annihilated:
        raise ValidationError("annihilated run has no posterior to summarize")
    return run.unique_components()


def prior_orthant_log(u: int, config: ModelConfig, nu_prior_b: float, mu_min: float) -> float:
    """Exact log prior orthant P(mu_j >= mu_min for all j) before any firing data.

    The unit prior is exchangeable with a diagonal shape, so the orthant is a
    product of u identical univariate Student-t tails. Baseline observations
    carry no unit information, so this equals the pre-supramaximal posterior
    orthant as well.
    """
    if mu_min == -math.inf:
        return 0.0
    scale = math.sqrt((nu_prior_b / config.a0) * config.C0_scale)
    tail = float(stdtr(2.0 * config.a0, (config.m0 - mu_min) / scale))
    if tail <= 0.0:
        raise ValidationError(
            f"mu_min={mu_min} leaves zero prior mass; incompatible configuration"
        )
    return u * math.log(tail)


def posterior_orthant(
    run: RunResult,
    mu_min: float,
    rng: np.random.Generator | None = None,
    target_se: float = 1e-4,
) -> tuple[float, float]:
    """Mixture posterior orthant P(mu >= mu_min | data) and its standard error.

    One orthant evaluation per distinct firing history, each with its own
    spawned RNG stream, so the result is independent of evaluation order.
    """
    if mu_min == -math.inf:
        return 1.0, 0.0
    weights, slots = _mixture_components(run)
    rng = rng if rng is not None else np.random.default_rng(run.seed)
    streams = rng.spawn(len(slots))
    n = len(slots)
    # Error budget: equalizing w_i * se_i across components keeps the mixture
    # standard error at target_se while letting low-weight components stop
    # after the first QMC round. Components whose free marginal bound
    # P(all mu_j >= b) <= min_j P(mu_j >= b) already pins their contribution
    # below a sliver of the budget are settled at the bound midpoint without
    # any quadrature; the half-width rides along in the reported se.
    skip_at = 0.1 * target_se / n
    total = 0.0
    var = 0.0
    for w, slot, stream in zip(weights, slots, streams):
        st = run.component_stats(int(slot))
        shape = (st.b / st.a) * st.C
        if st.m.size > 1:
            sd = np.sqrt(np.diag(shape))
            bound = float(np.min(stdtr(2.0 * st.a, (st.m - mu_min) / sd)))
            if w * bound <= skip_at:
                total += w * 0.5 * bound
                var += (w * 0.5 * bound) ** 2
                continue
        q = OrthantQuery(st.m, shape, 2.0 * st.a, mu_min)
        p, se = student_t_orthant(q, stream, target_se / (w * math.sqrt(n)))
        total += w * p
        var += (w * se) ** 2
    return float(total), float(math.sqrt(var))


def recalibrate_log_ml(
    run: RunResult,
    hyper: ModelConfig | None = None,
    mu_min: float | None = None,
    rng: np.random.Generator | None = None,
    target_se: float = 1e-4,
) -> float:
    """Evidence adjusted for the twitch-force lower bound mu_min.

    adjusted = log_ml + log P(mu >= mu_min | data) - log P(mu >= mu_min),
    the exact correction for truncating the prior to the orthant, evaluated
    after the run instead of inside the filter. mu_min = 0 (or -inf) disables
    the adjustment; an annihilated run stays at -inf.
    """
    cfg = hyper or run.config
    bound = cfg.mu_min if mu_min is None else float(mu_min)
    if bound == -math.inf or bound == 0.0:
        return run.log_ml
    if not math.isfinite(run.log_ml):
        return run.log_ml
    log_prior = prior_orthant_log(run.u, cfg, run.nu_prior_b, bound)
    post, _ = posterior_orthant(run, bound, rng, target_se)
    log_post = math.log(post) if post > 0.0 else -math.inf
    return run.log_ml + log_post - log_prior


def _bisect_increasing(fn, q: float, lo: float, hi: float, tol: float = 1e-6) -> float:
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if fn(mid) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


_QUANTS = (0.5, 0.025, 0.975)


def _mixture_t_quantiles(weights, locs, scales, dofs) -> IntervalSummary:
    """Quantiles of a weighted mixture of scaled Student-t laws, by bisection."""

    def cdf(z: float) -> float:
        return float(np.sum(weights * stdtr(dofs, (z - locs) / scales)))

    lo = float(np.min(locs + scales * stdtrit(dofs, 1e-4)))
    hi = float(np.max(locs + scales * stdtrit(dofs, 1.0 - 1e-4)))
    med, lo95, hi95 = (_bisect_increasing(cdf, q, lo, hi) for q in _QUANTS)
    return IntervalSummary(med, lo95, hi95)


def _mixture_invgamma_quantiles(weights, shapes, rates) -> IntervalSummary:
    """Quantiles of a mixture of inverse-gamma laws (precision reciprocals).

    If nu ~ Gamma(shape, rate) then 1/nu has CDF P(nu >= 1/z) = Q(shape, rate/z),
    the regularized upper incomplete gamma, increasing in z.
    """

    def cdf(z: float) -> float:
        return float(np.sum(weights * gammaincc(shapes, rates / z)))

    lo = float(np.min(rates / gammainccinv(shapes, 1e-4)))
    hi = float(np.max(rates / gammainccinv(shapes, 1.0 - 1e-4)))
    med, lo95, hi95 = (_bisect_increasing(cdf, q, lo, hi, tol=1e-9) for q in _QUANTS)
    return IntervalSummary(med, lo95, hi95)


def _grid_eta_mean(g: GridPosterior) -> float:
    den = trapezium_integral(g)
    num = trapezium_integral(g, lambda e, l: np.log(e))
    return num / den


def _mixture_grid(run: RunResult, weights, slots, j: int) -> GridPosterior:
    """Weighted mixture of a unit's per-component grid posteriors (normalized)."""
    base = run.grid_for(int(slots[0]), j)
    acc = np.zeros_like(base.log_values)
    for w, slot in zip(weights, slots):
        g = run.grid_for(int(slot), j)
        z = trapezium_integral(g)
        acc += (w / z) * np.exp(g.log_values)
    with np.errstate(divide="ignore"):
        lv = np.log(acc)
    m = float(lv.max())
    return GridPosterior(base.lattice, lv - m, m)


def unit_display_order(run: RunResult) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean thresholds per unit and the ascending display permutation."""
    weights, slots = _mixture_components(run)
    means = np.empty(run.u)
    for j in range(run.u):
        means[j] = sum(
            w * _grid_eta_mean(run.grid_for(int(slot), j))
            for w, slot in zip(weights, slots)
        )
    return means, np.argsort(means, kind="stable")


def posterior_mixture_summaries(run: RunResult, grids=None) -> ParameterReport:
    """Medians and 95% intervals for every parameter from the particle mixture.

    Twitch forces use the mixture of conjugate Student-t marginals, precisions
    the mixture of inverse-gamma marginals, thresholds and slopes the mixture
    of lattice posteriors. Units are labeled 1..u by increasing posterior mean
    threshold. ``grids`` is accepted for interface compatibility; the run
    already references its grid store.
    """
    weights, slots = _mixture_components(run)
    a = run._A[slots]
    b = run._B[slots]
    m = run._M[slots]
    c_diag = np.array([run._C[s].diagonal() for s in slots])
    dofs = 2.0 * a
    eta_means, order = unit_display_order(run)

    units = []
    for rank, j in enumerate(order, start=1):
        scales = np.sqrt((b / a) * c_diag[:, j])
        mu_summary = _mixture_t_quantiles(weights, m[:, j], scales, dofs)
        gmix = _mixture_grid(run, weights, slots, int(j))
        gs = grid_posterior_summary(gmix)
        units.append(
            UnitSummary(
                label=rank,
                eta_mean=float(eta_means[j]),
                eta=IntervalSummary(gs.eta_median, gs.eta_lo, gs.eta_hi),
                lam=IntervalSummary(gs.lam_median, gs.lam_lo, gs.lam_hi),
                mu=mu_summary,
            )
        )

    nu_inv = _mixture_invgamma_quantiles(weights, a, b)
    bl = run.baseline_stats
    nu_bar_inv = _mixture_invgamma_quantiles(
        np.array([1.0]), np.array([bl.a_bar]), np.array([bl.b_bar])
    )
    return ParameterReport(
        units=tuple(units),
        nu_inv=nu_inv,
        nu_bar_inv=nu_bar_inv,
        n_components=len(slots),
    )


def _component_bits(run: RunResult, slots: np.ndarray) -> list[list[tuple[int, int]]]:
    """History keys (length, bits) per component and unit."""
    keys = run._store.keys
    return [
        [keys[run._ids[int(slot), j]] for j in range(run.u)] for slot in slots
    ]


def modal_firing_by_level(
    run: RunResult,
    series: StimulusResponseSeries,
    level_tolerance: float = 4.0,
) -> list[LevelRow]:
    """Cluster fitted responses into force levels and report each level's
    most probable firing vector.

    For every non-baseline observation the modal firing vector across the
    particle mixture is decoded from the history keys; its fitted response is
    the frozen baseline mean plus the posterior-mean twitch force of the units
    firing. Levels are single-linkage clusters of fitted responses with gaps
    above level_tolerance (mN). The baseline records form level 0 with an
    all-zero row. Firing vectors are reported in display unit order.
    """
    weights, slots = _mixture_components(run)
    comp_bits = _component_bits(run, slots)
    n_post = series.T - series.tau + 1  # supramaximal + the sorted remainder
    u = run.u
    mu_mean = np.array(
        [float(np.sum(weights * run._M[slots, j])) for j in range(u)]
    )
    _, order = unit_display_order(run)
    m_bar = run.baseline_stats.m_bar

    modal: list[tuple[int, ...]] = []
    fitted = np.empty(n_post)
    for step in range(n_post):
        freq: dict[tuple[int, ...], float] = {}
        for w, bits in zip(weights, comp_bits):
            vec = tuple((bits[j][1] >> step) & 1 for j in range(u))
            freq[vec] = freq.get(vec, 0.0) + w
        vec = min(freq, key=lambda v: (-freq[v], v))
        modal.append(vec)
        fitted[step] = m_bar + float(np.dot(vec, mu_mean))

    rows = [
        LevelRow(
            level=0,
            n_obs=series.n_baseline,
            response_mean=m_bar,
            response_min=m_bar,
            response_max=m_bar,
            firing=(0,) * u,
        )
    ]
    idx = np.argsort(fitted, kind="stable")
    clusters: list[list[int]] = [[int(idx[0])]]
    for k in idx[1:]:
        if fitted[k] - fitted[clusters[-1][-1]] > level_tolerance:
            clusters.append([int(k)])
        else:
            clusters[-1].append(int(k))
    for level, members in enumerate(clusters, start=1):
        vals = fitted[members]
        freq2: dict[tuple[int, ...], int] = {}
        for k in members:
            freq2[modal[k]] = freq2.get(modal[k], 0) + 1
        vec = min(freq2, key=lambda v: (-freq2[v], v))
        rows.append(
            LevelRow(
                level=level,
                n_obs=len(members),
                response_mean=float(vals.mean()),
                response_min=float(vals.min()),
                response_max=float(vals.max()),
                firing=tuple(int(vec[j]) for j in order),
            )
        )
    return rows


def mixture_fire_curve(run: RunResult, s_values) -> np.ndarray:
    """Posterior-mean firing probability per display unit over stimuli.

    Row k is the mixture (over components) of the grid firing predictives of
    the unit with the k-th smallest posterior-mean threshold; shape
    (u, len(s_values)). Components sharing a firing history share grid
    objects, so predictives are memoized by grid identity.
    """
    from .grid import unit_fire_predictive
    from .model import get_curve

    weights, slots = _mixture_components(run)
    _, order = unit_display_order(run)
    curve = get_curve(run.config.curve)
    s_values = np.asarray(s_values, dtype=float)
    out = np.zeros((run.u, s_values.size))
    for row, j in enumerate(order):
        for si, s in enumerate(s_values):
            seen: dict[int, float] = {}
            acc = 0.0
            for w, slot in zip(weights, slots):
                g = run.grid_for(int(slot), int(j))
                p = seen.get(id(g))
                if p is None:
                    p = unit_fire_predictive(g, float(s), curve)
                    seen[id(g)] = p
                acc += w * p
            out[row, si] = acc
    return out


def mixture_response_density(run: RunResult, s: float, y_values) -> np.ndarray:
    """Posterior predictive density of the response at stimulus s.

    Mixes, over dedup components and firing combinations, the conjugate
    Student-t density of the response: combination priors come from each
    component's grid predictives at s, the no-fire column from the frozen
    baseline posterior.
    """
    from .conjugate import student_t_logpdf
    from .grid import unit_fire_predictive
    from .model import get_curve

    weights, slots = _mixture_components(run)
    curve = get_curve(run.config.curve)
    y_values = np.asarray(y_values, dtype=float)
    u = run.u
    out = np.zeros(y_values.size)
    base = run.baseline_stats
    base_scale2 = (base.b_bar / base.a_bar) * (base.c_bar + 1.0)
    log_base_t = student_t_logpdf(y_values, base.m_bar, base_scale2, 2.0 * base.a_bar)
    seen: dict[int, float] = {}
    for w, slot in zip(weights, slots):
        slot = int(slot)
        p = np.empty(u)
        for j in range(u):
            g = run.grid_for(slot, j)
            pj = seen.get(id(g))
            if pj is None:
                pj = unit_fire_predictive(g, float(s), curve)
                seen[id(g)] = pj
            p[j] = pj
        st = run.component_stats(slot)
        for c in range(1 << u):
            x = np.array([(c >> j) & 1 for j in range(u)], dtype=float)
            prior = float(np.prod(np.where(x > 0, p, 1.0 - p)))
            if prior == 0.0:
                continue
            if c == 0:
                out += w * prior * np.exp(log_base_t)
                continue
            loc = base.m_bar + float(x @ st.m)
            scale2 = (st.b / st.a) * (float(x @ st.C @ x) + float(x.sum()))
            out += w * prior * np.exp(
                student_t_logpdf(y_values, loc, scale2, 2.0 * st.a)
            )
    return out
