import numpy as np
import pytest

from smcmune import StimulusResponseSeries, smc_run


def make_series(baselines, supra, post):
    """Assemble a canonical series from (supramax stimulus, response) and
    an already-sorted list of (stimulus, response) ramp records."""
    stim = [0.0] * len(baselines) + [supra[0]] + [s for s, _ in post]
    resp = list(baselines) + [supra[1]] + [y for _, y in post]
    return StimulusResponseSeries(
        np.array(stim, dtype=float), np.array(resp, dtype=float),
        tau=len(baselines) + 1,
    )


@pytest.fixture(scope="session")
def tiny_series():
    """Two-unit texture: twitches near 30 mN each, thresholds near 12 and 20 V."""
    baselines = [0.21, -0.16, 0.08, -0.05, 0.30]
    post = [(10.0, 0.12), (14.0, 28.9), (18.0, 30.4), (22.0, 61.1)]
    return make_series(baselines, (30.0, 59.8), post)


@pytest.fixture(scope="session")
def ambiguous_series():
    """One unit, responses sitting half way between baseline and the twitch,
    so the firing indicator stays genuinely uncertain at every ramp record."""
    baselines = [0.10, -0.20, 0.15, 0.05, -0.10]
    post = [(12.0, 16.8), (15.0, 17.5), (18.0, 18.1)]
    return make_series(baselines, (30.0, 35.2), post)


@pytest.fixture(scope="session")
def staircase_series():
    """Three units with well-separated thresholds and twitches 30/50/80 mN;
    the ramp walks the full staircase 0 -> 30 -> 80 -> 160."""
    baselines = [0.02, -0.11, 0.23, 0.08, -0.03, 0.14]
    post = [
        (8.0, 0.07),
        (12.0, 30.2),
        (16.0, 29.9),
        (22.0, 80.3),
        (26.0, 79.8),
        (34.0, 160.1),
        (36.0, 159.7),
    ]
    return make_series(baselines, (40.0, 160.2), post)


@pytest.fixture(scope="session")
def two_unit_run(tiny_series):
    run = smc_run(tiny_series, 2, 2000, 24, rng_seed=11)
    assert not run.annihilated
    return run


@pytest.fixture(scope="session")
def staircase_run(staircase_series):
    run = smc_run(staircase_series, 3, 3000, 24, rng_seed=5)
    assert not run.annihilated
    return run
