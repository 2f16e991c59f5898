import math

import numpy as np
import pytest
from scipy.special import logsumexp

from smcmune import ModelConfig, ValidationError, get_curve, smc_run
from smcmune.conjugate import (
    baseline_update,
    firing_update,
    init_baseline_stats,
    init_unit_stats,
    observation_predictive_logdensity,
    set_nu_prior,
)
from smcmune.engine import (
    Particle,
    _sample_combos,
    assimilate_baseline_phase,
    assimilate_supramaximal,
    combo_log_tables,
    particle_weight,
    propagate,
)
from smcmune.grid import EMPTY_KEY, GridCache, Lattice, child_key, grid_update, init_grid
from smcmune.oracle import exact_log_ml

from conftest import make_series

LL = get_curve("loglogistic")


# ---------------------------------------------------------------------------
# baseline phase


def test_baseline_phase_matches_manual_fold():
    rng = np.random.default_rng(20)
    ys = rng.normal(0.0, 0.25, size=20)
    series = make_series(list(ys), (40.0, 80.0), [])
    stats, log_ml = assimilate_baseline_phase(series)

    manual = init_baseline_stats(ModelConfig())
    manual_ml = 0.0
    for y in ys:
        manual_ml += observation_predictive_logdensity(float(y), np.zeros(1), manual, None)
        manual = baseline_update(manual, float(y))
    assert stats.a_bar == manual.a_bar == 0.5 + 10.0
    assert stats.b_bar == manual.b_bar
    assert stats.m_bar == manual.m_bar
    assert log_ml == manual_ml

    # vague priors: posterior location tracks the sample moments
    assert abs(stats.m_bar - ys.mean()) < 1e-3
    assert stats.b_bar / stats.a_bar == pytest.approx(ys.var(), rel=0.5)


# ---------------------------------------------------------------------------
# single-particle weight


def _toy_baseline():
    s = init_baseline_stats(ModelConfig())
    for y in (0.1, -0.2, 0.3, 0.05):
        s = baseline_update(s, y)
    return s


def test_particle_weight_composes_from_predictives():
    baseline = _toy_baseline()
    units = init_unit_stats(1, 0.6, ModelConfig())
    p = Particle((EMPTY_KEY,), units)
    y, s, prob = 31.0, 12.0, 0.37
    log_w, table = particle_weight(p, baseline, y, s, [prob])
    t0 = observation_predictive_logdensity(y, np.zeros(1), baseline, None)
    t1 = observation_predictive_logdensity(y, np.ones(1), baseline, units)
    want = logsumexp([math.log(1 - prob) + t0, math.log(prob) + t1])
    assert log_w == pytest.approx(want, rel=1e-12)
    assert table[0] == pytest.approx(math.log(1 - prob) + t0, rel=1e-12)
    assert table[1] == pytest.approx(math.log(prob) + t1, rel=1e-12)


def test_particle_weight_zero_probability_unit():
    baseline = _toy_baseline()
    units = init_unit_stats(1, 0.6, ModelConfig())
    p = Particle((EMPTY_KEY,), units)
    log_w, table = particle_weight(p, baseline, 0.2, 5.0, [0.0])
    t0 = observation_predictive_logdensity(0.2, np.zeros(1), baseline, None)
    assert table[1] == -math.inf
    assert log_w == pytest.approx(t0, rel=1e-12)


def test_particle_weight_needs_unit_stats():
    with pytest.raises(ValidationError):
        particle_weight(Particle((EMPTY_KEY,), None), _toy_baseline(), 1.0, 5.0, [0.5])


# ---------------------------------------------------------------------------
# combo tables


def _random_spd_stats(rng, n, u):
    A = rng.uniform(1.0, 6.0, size=n)
    B = rng.uniform(0.5, 30.0, size=n)
    M = rng.normal(40.0, 10.0, size=(n, u))
    C = np.empty((n, u, u))
    for i in range(n):
        root = rng.normal(size=(u, u))
        C[i] = root @ root.T + 0.5 * np.eye(u)
    return A, B, M, C


def test_gray_enumeration_matches_naive():
    rng = np.random.default_rng(8)
    baseline = _toy_baseline()
    A, B, M, C = _random_spd_stats(rng, 5, 3)
    P = rng.uniform(0.05, 0.95, size=(5, 3))
    # include degenerate firing probabilities to exercise the -inf bookkeeping
    P[0, 0] = 0.0
    P[1, 2] = 1.0
    y = 71.3
    gray = combo_log_tables(A, B, M, C, P, y, baseline, enumeration="gray")
    naive = combo_log_tables(A, B, M, C, P, y, baseline, enumeration="naive")
    assert gray.shape == (5, 8)
    np.testing.assert_allclose(gray, naive, rtol=1e-11, atol=1e-11)
    # p=1 forces the unit on: every combo with that bit off is impossible
    assert np.isneginf(naive[1, [0, 1, 2, 3]]).all()
    assert np.isfinite(naive[1, [4, 5, 6, 7]]).all()


def test_combo_table_unknown_enumeration():
    baseline = _toy_baseline()
    A, B, M, C = _random_spd_stats(np.random.default_rng(0), 1, 1)
    with pytest.raises(ValidationError):
        combo_log_tables(A, B, M, C, np.array([[0.5]]), 1.0, baseline, enumeration="fast")


def test_combo_table_pruning_by_prior():
    baseline = _toy_baseline()
    A, B, M, C = _random_spd_stats(np.random.default_rng(1), 1, 2)
    P = np.array([[0.4, 0.85]])
    table = combo_log_tables(A, B, M, C, P, 55.0, baseline, prune_threshold=0.5)
    # combo priors: 0.09, 0.06, 0.51, 0.34; only the third survives at 0.5
    assert np.isneginf(table[0, [0, 1, 3]]).all()
    assert np.isfinite(table[0, 2])


def test_smc_run_gray_equals_naive(tiny_series):
    a = smc_run(tiny_series, 2, n_particles=200, grid_n=12, rng_seed=3)
    b = smc_run(tiny_series, 2, n_particles=200, grid_n=12, rng_seed=3, enumeration="naive")
    assert abs(a.log_ml - b.log_ml) <= 1e-9


# ---------------------------------------------------------------------------
# supramaximal step


def test_supramaximal_composition(tiny_series):
    baseline, _ = assimilate_baseline_phase(tiny_series)
    cfg = ModelConfig()
    b0 = set_nu_prior(cfg.a0, cfg.delta, cfg.epsilon, baseline)
    lattice = Lattice(16, 16, cfg.resolve_eta_max(tiny_series), cfg.lambda_max)
    cache = GridCache(lattice, LL)
    u = 2
    particles = [Particle((EMPTY_KEY,) * u, None) for _ in range(4)]
    y_tau, s_tau = 90.0, tiny_series.supramax_stimulus

    out, increment = assimilate_supramaximal(particles, baseline, y_tau, s_tau, b0, cache)

    stats0 = init_unit_stats(u, b0, cfg)
    p_fire = cache.predictive(EMPTY_KEY, s_tau)
    want = u * math.log(p_fire) + observation_predictive_logdensity(
        y_tau, np.ones(u), baseline, stats0
    )
    assert increment == pytest.approx(want, rel=1e-14)

    want_stats = firing_update(stats0, np.ones(u), y_tau, baseline.m_bar)
    assert len(out) == 4
    key1 = child_key(EMPTY_KEY, 1)
    for p in out:
        assert p.unit_history_keys == (key1, key1)
        np.testing.assert_array_equal(p.unit_stats.m, want_stats.m)
        np.testing.assert_array_equal(p.unit_stats.C, want_stats.C)
        assert p.unit_stats.a == want_stats.a and p.unit_stats.b == want_stats.b
    # forced firing pulls both twitch means from the prior 40 toward y/2 = 45
    assert np.all(np.abs(want_stats.m - 45.0) < 0.1)


# ---------------------------------------------------------------------------
# deterministic runs and hand-composable evidence


def test_baseline_only_run_is_deterministic_and_composable():
    ys = [0.2, -0.1, 0.15, 0.0, -0.3]
    series = make_series(ys, (25.0, 47.5), [])
    r1 = smc_run(series, 2, n_particles=500, grid_n=14, rng_seed=1)
    r2 = smc_run(series, 2, n_particles=500, grid_n=14, rng_seed=99)
    # no free records: the evidence is deterministic, so the seed is irrelevant
    assert r1.log_ml == r2.log_ml

    baseline, log_ml = assimilate_baseline_phase(series)
    cfg = ModelConfig()
    b0 = set_nu_prior(cfg.a0, cfg.delta, cfg.epsilon, baseline)
    stats0 = init_unit_stats(2, b0, cfg)
    lattice = Lattice(14, 14, cfg.resolve_eta_max(series), cfg.lambda_max)
    from smcmune.grid import unit_fire_predictive

    p_fire = unit_fire_predictive(init_grid(lattice), 25.0, LL)
    want = (
        log_ml
        + 2 * math.log(p_fire)
        + observation_predictive_logdensity(47.5, np.ones(2), baseline, stats0)
    )
    assert r1.log_ml == pytest.approx(want, rel=1e-14)
    # the exhaustive oracle reduces to the same deterministic composition
    assert exact_log_ml(series, 2, grid_n=14) == pytest.approx(r1.log_ml, rel=1e-14)


def test_same_seed_reproduces_run(tiny_series):
    a = smc_run(tiny_series, 2, n_particles=250, grid_n=12, rng_seed=5)
    b = smc_run(tiny_series, 2, n_particles=250, grid_n=12, rng_seed=5)
    c = smc_run(tiny_series, 2, n_particles=250, grid_n=12, rng_seed=6)
    assert a.log_ml == b.log_ml
    assert a.ess_trace == b.ess_trace
    assert a.log_ml != c.log_ml


def test_cache_is_transparent(tiny_series):
    with_cache = smc_run(tiny_series, 2, n_particles=150, grid_n=10, rng_seed=3)
    without = smc_run(tiny_series, 2, n_particles=150, grid_n=10, rng_seed=3, use_cache=False)
    assert with_cache.log_ml == without.log_ml
    assert with_cache.ess_trace == without.ess_trace
    w1, s1 = with_cache.unique_components()
    w2, s2 = without.unique_components()
    np.testing.assert_array_equal(w1, w2)
    for a, b in zip(s1, s2):
        sa, sb = with_cache.component_stats(a), without.component_stats(b)
        np.testing.assert_array_equal(sa.m, sb.m)
        np.testing.assert_array_equal(sa.C, sb.C)
        assert sa.a == sb.a and sa.b == sb.b


def test_ess_trace_shape_and_bounds(two_unit_run, tiny_series):
    n_post = tiny_series.T - tiny_series.tau
    trace = two_unit_run.ess_trace
    assert len(trace) == n_post + 1
    assert trace[0] == two_unit_run.n_particles
    for e in trace:
        assert 1.0 - 1e-9 <= e <= two_unit_run.n_particles + 1e-9


def test_run_validation(tiny_series):
    with pytest.raises(ValidationError):
        smc_run(tiny_series, 0)
    with pytest.raises(ValidationError):
        smc_run(tiny_series, 1, n_particles=0)
    with pytest.raises(ValidationError):
        smc_run(tiny_series, 1, n_particles=10, rng_seed=-1)


# ---------------------------------------------------------------------------
# combo sampling and propagation


def test_sample_combos_frequencies():
    probs = np.array([0.2, 0.5, 0.1, 0.2])
    n = 100_000
    tables = np.tile(np.log(probs), (n, 1))
    rng = np.random.default_rng(17)
    combos = _sample_combos(tables, rng.uniform(size=n))
    counts = np.bincount(combos, minlength=4)
    se = np.sqrt(n * probs * (1 - probs))
    assert (np.abs(counts - n * probs) <= 3 * se).all()


def test_sample_combos_skips_impossible():
    tables = np.tile([-np.inf, math.log(0.7), math.log(0.3), -np.inf], (5000, 1))
    rng = np.random.default_rng(2)
    combos = _sample_combos(tables, rng.uniform(size=5000))
    assert set(np.unique(combos)) <= {1, 2}


def test_propagate_updates_stats_and_keys():
    baseline = _toy_baseline()
    units = init_unit_stats(2, 0.6, ModelConfig())
    lattice = Lattice(8, 8, 33.0, 14.0)
    cache = GridCache(lattice, LL)
    key1 = child_key(EMPTY_KEY, 1)
    cache.get_or_extend(key1, EMPTY_KEY, 1, 30.0)
    p = Particle((key1, key1), units)

    table = np.log(np.array([0.15, 0.35, 0.30, 0.20]))
    y, s = 55.0, 14.0
    rng = np.random.default_rng(4)
    counts = np.zeros(4)
    for _ in range(4000):
        child = propagate(p, table, y, s, rng, cache, baseline)
        bits = tuple(k[1] >> 1 for k in child.unit_history_keys)
        combo = bits[0] | (bits[1] << 1)
        counts[combo] += 1
        for j, k in enumerate(child.unit_history_keys):
            assert k == child_key(key1, (combo >> j) & 1)
        if combo == 0:
            assert child.unit_stats is units
        else:
            x = np.array([(combo >> j) & 1 for j in range(2)], dtype=float)
            want = firing_update(units, x, y, baseline.m_bar)
            np.testing.assert_array_equal(child.unit_stats.m, want.m)
            assert child.unit_stats.b == want.b
    probs = np.exp(table)
    se = np.sqrt(4000 * probs * (1 - probs))
    assert (np.abs(counts - 4000 * probs) <= 3.5 * se).all()


def test_propagate_consumes_one_uniform():
    baseline = _toy_baseline()
    units = init_unit_stats(1, 0.6, ModelConfig())
    cache = GridCache(Lattice(8, 8, 33.0, 14.0), LL)
    key1 = child_key(EMPTY_KEY, 1)
    cache.get_or_extend(key1, EMPTY_KEY, 1, 30.0)
    p = Particle((key1,), units)
    rng = np.random.default_rng(31)
    propagate(p, np.log([0.6, 0.4]), 50.0, 12.0, rng, cache, baseline)
    fresh = np.random.default_rng(31)
    fresh.uniform()
    assert rng.uniform() == fresh.uniform()


def test_propagate_rejects_dead_table():
    baseline = _toy_baseline()
    units = init_unit_stats(1, 0.6, ModelConfig())
    cache = GridCache(Lattice(8, 8, 33.0, 14.0), LL)
    p = Particle((EMPTY_KEY,), units)
    with pytest.raises(ValidationError):
        propagate(p, np.array([-np.inf, -np.inf]), 1.0, 5.0,
                  np.random.default_rng(0), cache, baseline)


# ---------------------------------------------------------------------------
# final-state replay


def test_component_replay_matches_sequential_updates(two_unit_run, tiny_series):
    run = two_unit_run
    weights, slots = run.unique_components()
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)
    cfg = run.config
    base = run.baseline_stats

    for slot in slots[:5]:
        stats = init_unit_stats(run.u, run.nu_prior_b, cfg)
        stats = firing_update(
            stats, np.ones(run.u), tiny_series.supramax_response, base.m_bar
        )
        keys = [run.history_keys[k] for k in run._ids[slot]]
        length = keys[0][0]
        assert length == 1 + (tiny_series.T - tiny_series.tau)
        for i, (s, y) in enumerate(
            zip(tiny_series.post_stimuli, tiny_series.post_responses), start=1
        ):
            x = np.array([(keys[j][1] >> i) & 1 for j in range(run.u)], dtype=float)
            if x.any():
                stats = firing_update(stats, x, float(y), base.m_bar)
        got = run.component_stats(int(slot))
        np.testing.assert_allclose(got.m, stats.m, rtol=1e-12)
        np.testing.assert_allclose(got.C, stats.C, rtol=1e-12, atol=1e-15)
        assert got.a == pytest.approx(stats.a, rel=1e-14)
        assert got.b == pytest.approx(stats.b, rel=1e-12)


def test_grid_replay_matches_history(two_unit_run, tiny_series):
    run = two_unit_run
    _, slots = run.unique_components()
    slot = int(slots[0])
    lattice = Lattice(run.grid_n, run.grid_n, run.eta_max, run.config.lambda_max)
    stimuli = [tiny_series.supramax_stimulus, *tiny_series.post_stimuli]
    for j in range(run.u):
        key = run.history_keys[run._ids[slot, j]]
        g = init_grid(lattice)
        for i, s in enumerate(stimuli):
            g = grid_update(g, (key[1] >> i) & 1, float(s), LL)
        got = run.grid_for(slot, j)
        np.testing.assert_array_equal(got.log_values, g.log_values)
        assert got.max_log == g.max_log


# ---------------------------------------------------------------------------
# evidence estimate quality


def test_evidence_is_unbiased_on_small_instance(ambiguous_series):
    exact = exact_log_ml(ambiguous_series, 1, grid_n=16)
    ratios = []
    for seed in range(200):
        r = smc_run(ambiguous_series, 1, n_particles=300, grid_n=16, rng_seed=seed)
        ratios.append(math.exp(r.log_ml - exact))
    ratios = np.array(ratios)
    sem = ratios.std(ddof=1) / math.sqrt(ratios.size)
    assert abs(ratios.mean() - 1.0) <= 3 * sem


# ---------------------------------------------------------------------------
# annihilation through pruning


def test_pruned_run_annihilates(ambiguous_series):
    cfg = ModelConfig(prune_threshold=0.9)
    # both firing choices at the first free record have prior mass below the
    # threshold, so every combo is pruned and the particle set dies
    lattice = Lattice(12, 12, cfg.resolve_eta_max(ambiguous_series), cfg.lambda_max)
    cache = GridCache(lattice, LL)
    key1 = child_key(EMPTY_KEY, 1)
    cache.get_or_extend(key1, EMPTY_KEY, 1, ambiguous_series.supramax_stimulus)
    p_first = cache.predictive(key1, float(ambiguous_series.post_stimuli[0]))
    assert 0.1 < p_first < 0.9

    run = smc_run(ambiguous_series, 1, n_particles=200, grid_n=12, config=cfg, rng_seed=0)
    assert run.annihilated
    assert run.log_ml == -math.inf
    assert run.diagnostics.annihilated_at == ambiguous_series.tau + 1
