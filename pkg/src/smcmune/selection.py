"""Evidence comparison across unit counts with the resource-stability protocol.

Each candidate count gets repeated filter runs; particle counts and grid
resolutions escalate until three independent evidence estimates agree within
one log unit, after which further seeds refine the average. Posterior model
probabilities combine the recalibrated evidence with the truncated-geometric
prior on the count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import RunResult, smc_run
from .errors import NumericalError, ValidationError
from .model import ModelConfig, StimulusResponseSeries, model_prior
from .postprocess import recalibrate_log_ml

__all__ = [
    "StabilityConfig",
    "StabilityRecord",
    "SelectionResult",
    "run_with_stability",
    "select",
    "hpcs",
]


@dataclass(frozen=True)
class StabilityConfig:
    """Constants of the escalation protocol.

    Screening reruns ``runs_screen`` seeds until their evidence range falls
    under ``ml_range_tol``; particle counts step by ``particle_step`` and grid
    resolutions by ``grid_step`` per dimension. ``runs_final`` is the total
    number of seeds averaged for the reported value. Models whose provisional
    posterior probability stays at or below ``prob_floor`` skip escalation.
    ``max_particles``/``max_grid`` cap the resources (the protocol itself
    states none); hitting a cap flags the record. ``recalib_runs`` is how many
    of the last final-stage runs the orthant recalibration is averaged over.
    """

    runs_screen: int = 3
    ml_range_tol: float = 1.0
    particle_step: int = 5000
    grid_step: int = 10
    runs_final: int = 10
    prob_floor: float = 0.01
    max_particles: int = 200_000
    max_grid: int = 120
    recalib_runs: int = 1

    def __post_init__(self) -> None:
        if min(
            self.runs_screen, self.particle_step, self.grid_step, self.runs_final,
            self.max_particles, self.max_grid, self.recalib_runs,
        ) < 1 or self.ml_range_tol <= 0 or self.prob_floor <= 0:
            raise ValidationError("stability constants must be positive")
        if self.runs_final < self.runs_screen:
            raise ValidationError("runs_final must include the screening runs")


@dataclass
class StabilityRecord:
    """Per-unit-count outcome of the stability protocol."""

    u: int
    log_ml: float
    particles_used: int
    grid_used: int
    run_spread: float
    final_se: float
    n_runs: int
    log_mls: list[float]
    capped: bool = False
    skipped_escalation: bool = False
    trace: list[dict] = field(default_factory=list)
    adjusted_log_ml: float | None = None
    last_runs: list[RunResult] = field(default_factory=list)


@dataclass
class SelectionResult:
    records: dict[int, StabilityRecord]
    posterior: np.ndarray  # index 0 <-> u=1
    map_u: int
    hpcs: tuple[int, ...]
    capped: bool
    mu_min: float


def _run_seed(master_seed: int, u: int, counter: int) -> int:
    """Scheduling-independent per-run seed: a pure function of (master, u, counter)."""
    return int(np.random.SeedSequence([master_seed, u, counter]).generate_state(1)[0])


def _spread(values: list[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    if len(finite) < len(values):
        return math.inf  # any annihilated run counts as unstable
    return max(finite) - min(finite)


def _mean(values: list[float]) -> float:
    if any(not math.isfinite(v) for v in values):
        return -math.inf
    return sum(values) / len(values)


def run_with_stability(
    series: StimulusResponseSeries,
    u: int,
    config: ModelConfig | None = None,
    *,
    gate: Callable[[float], bool] | None = None,
    initial_screen: list[RunResult] | None = None,
) -> StabilityRecord:
    """Run one unit count until the evidence estimate is resource-stable.

    Alternates two checks: the range of runs_screen independent estimates must
    be below ml_range_tol (else particles escalate), and refining the grid by
    grid_step per dimension must not shift the mean estimate by more than
    ml_range_tol (else the finer grid is adopted and both checks repeat).
    Once both pass, additional seeds are run so runs_final estimates average
    into the reported value. ``gate``, when given, is consulted with the
    current mean estimate before any escalation; returning False freezes the
    record at its screening runs (used for models of negligible posterior
    probability). Hitting max_particles/max_grid flags the record as capped.
    """
    cfg = config or ModelConfig()
    stab: StabilityConfig = cfg.stability or StabilityConfig()
    n_particles = cfg.n_particles0
    grid_n = cfg.grid_n0
    counter = 0
    trace: list[dict] = []

    def do_runs(k: int, n_p: int, n_g: int) -> list[RunResult]:
        nonlocal counter
        out = []
        for _ in range(k):
            out.append(
                smc_run(series, u, n_p, n_g, cfg, _run_seed(cfg.seed, u, counter))
            )
            counter += 1
        return out

    if initial_screen is not None:
        if len(initial_screen) != stab.runs_screen:
            raise ValidationError("initial screen must hold runs_screen results")
        screen = list(initial_screen)
        counter = stab.runs_screen
    else:
        screen = do_runs(stab.runs_screen, n_particles, grid_n)
    trace.append(_trace_entry("screen", n_particles, grid_n, screen))

    capped = False
    skipped = False
    while True:
        values = [r.log_ml for r in screen]
        if _spread(values) > stab.ml_range_tol:
            if gate is not None and not gate(_mean(values)):
                skipped = True
                break
            if n_particles + stab.particle_step > stab.max_particles:
                capped = True
                break
            n_particles += stab.particle_step
            screen = do_runs(stab.runs_screen, n_particles, grid_n)
            trace.append(_trace_entry("screen", n_particles, grid_n, screen))
            continue
        # range stable; verify the quadrature resolution
        if grid_n + stab.grid_step > stab.max_grid:
            capped = True
            break
        fine = do_runs(stab.runs_screen, n_particles, grid_n + stab.grid_step)
        trace.append(
            _trace_entry("grid-check", n_particles, grid_n + stab.grid_step, fine)
        )
        shift = abs(_mean([r.log_ml for r in fine]) - _mean(values))
        if math.isnan(shift) or shift > stab.ml_range_tol:
            grid_n += stab.grid_step
            screen = fine  # the check runs are valid screens at the adopted grid
            continue
        break  # both checks passed; the coarse-grid screens stand

    runs = list(screen)
    if not (capped or skipped):
        extra = do_runs(stab.runs_final - stab.runs_screen, n_particles, grid_n)
        if extra:
            trace.append(_trace_entry("final", n_particles, grid_n, extra))
        runs += extra

    values = [r.log_ml for r in runs]
    keep = max(1, min(stab.recalib_runs, len(runs)))
    return StabilityRecord(
        u=u,
        log_ml=_mean(values),
        particles_used=n_particles,
        grid_used=grid_n,
        run_spread=_spread([r.log_ml for r in screen]),
        final_se=_se(values),
        n_runs=len(runs),
        log_mls=values,
        capped=capped,
        skipped_escalation=skipped,
        trace=trace,
        last_runs=runs[-keep:],
    )


def _trace_entry(phase: str, n_p: int, n_g: int, runs: list[RunResult]) -> dict:
    values = [r.log_ml for r in runs]
    return {
        "phase": phase,
        "n_particles": n_p,
        "grid_n": n_g,
        "log_mls": values,
        "range": _spread(values),
    }


def _se(values: list[float]) -> float:
    if len(values) < 2 or any(not math.isfinite(v) for v in values):
        return math.inf
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def _log_posterior(log_mls: dict[int, float], u_max: int) -> np.ndarray:
    logs = np.array(
        [log_mls[u] + math.log(model_prior(u, u_max)) for u in range(1, u_max + 1)]
    )
    top = logs.max()
    if not math.isfinite(top):
        raise NumericalError("every candidate model has zero evidence")
    w = np.exp(logs - top)
    return w / w.sum()


def hpcs(posterior, level: float = 0.95) -> set[int]:
    """Smallest set of unit counts whose posterior mass reaches the level.

    Greedy accumulation by descending probability, ties toward the smaller
    count. Counts are 1-based (index 0 of the posterior is u=1).
    """
    p = np.asarray(posterior, dtype=float)
    if p.ndim != 1 or p.size == 0 or (p < 0).any():
        raise ValidationError("posterior must be a non-negative vector")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValidationError("posterior must be normalized")
    if not (0.0 < level <= 1.0):
        raise ValidationError("level must lie in (0, 1]")
    order = sorted(range(p.size), key=lambda i: (-p[i], i))
    total = 0.0
    chosen: set[int] = set()
    for i in order:
        chosen.add(i + 1)
        total += float(p[i])
        if total >= level - 1e-12:
            break
    return chosen


def select(
    series: StimulusResponseSeries,
    config: ModelConfig | None = None,
    *,
    threads: int = 1,
) -> SelectionResult:
    """Full model comparison over u = 1..u_max.

    An initial screening round runs every count at base resources; its means
    freeze the reference evidence used in the escalation gate (a model only
    escalates while its provisional posterior probability, computed against
    the other models' reference values with its own latest mean substituted,
    exceeds prob_floor). This keeps results identical for any thread count.
    Records are then recalibrated at config.mu_min and combined with the
    count prior into posterior probabilities, the MAP count, and the smallest
    95% credible set.
    """
    cfg = config or ModelConfig()
    stab: StabilityConfig = cfg.stability or StabilityConfig()
    if threads < 1:
        raise ValidationError("thread count must be >= 1")
    u_range = range(1, cfg.u_max + 1)

    def first_screen(u: int, k: int) -> RunResult:
        return smc_run(series, u, cfg.n_particles0, cfg.grid_n0, cfg, _run_seed(cfg.seed, u, k))

    jobs = [(u, k) for u in u_range for k in range(stab.runs_screen)]
    if threads == 1:
        screen0 = {(u, k): first_screen(u, k) for u, k in jobs}
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {(u, k): pool.submit(first_screen, u, k) for u, k in jobs}
            screen0 = {key: fut.result() for key, fut in futures.items()}

    base_mean = {
        u: _mean([screen0[(u, k)].log_ml for k in range(stab.runs_screen)])
        for u in u_range
    }
    log_prior = {u: math.log(model_prior(u, cfg.u_max)) for u in u_range}

    def gate_for(u: int) -> Callable[[float], bool]:
        def gate(current_mean: float) -> bool:
            logs = [
                (current_mean if v == u else base_mean[v]) + log_prior[v]
                for v in u_range
            ]
            top = max(logs)
            if not math.isfinite(top):
                return False
            w = [math.exp(x - top) for x in logs]
            return w[u - 1] / sum(w) > stab.prob_floor

        return gate

    def finish(u: int) -> StabilityRecord:
        initial = [screen0[(u, k)] for k in range(stab.runs_screen)]
        record = run_with_stability(
            series, u, cfg, gate=gate_for(u), initial_screen=initial
        )
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, u, 0x5EED])
        )
        deltas = []
        for run in record.last_runs:
            if math.isfinite(run.log_ml):
                deltas.append(recalibrate_log_ml(run, cfg, cfg.mu_min, rng) - run.log_ml)
        if math.isfinite(record.log_ml) and deltas:
            record.adjusted_log_ml = record.log_ml + sum(deltas) / len(deltas)
        else:
            record.adjusted_log_ml = -math.inf
        return record

    if threads == 1:
        records = {u: finish(u) for u in u_range}
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures2 = {u: pool.submit(finish, u) for u in u_range}
            records = {u: fut.result() for u, fut in futures2.items()}

    posterior = _log_posterior(
        {u: records[u].adjusted_log_ml for u in u_range}, cfg.u_max
    )
    map_u = 1 + int(np.argmax(posterior))  # argmax takes the first (smallest) maximizer
    chosen = hpcs(posterior, 0.95)
    return SelectionResult(
        records=records,
        posterior=posterior,
        map_u=map_u,
        hpcs=tuple(sorted(chosen)),
        capped=any(r.capped for r in records.values()),
        mu_min=cfg.mu_min,
    )
