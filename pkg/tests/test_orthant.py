import math

import numpy as np
import pytest
from scipy.special import stdtr
from scipy.stats import multivariate_normal

from smcmune import NumericalError, ValidationError
from smcmune.orthant import OrthantQuery, student_t_orthant

from oracles import mc_student_orthant


def _query(loc, shape, dof, lower):
    return OrthantQuery(np.asarray(loc, float), np.asarray(shape, float), dof, lower)


# Monte Carlo references, 4e6 draws each (tests/oracles.py mc_student_orthant):
# three-dimensional: 0.86406 (se 1.7e-4); heavy-tailed Cauchy pair: 0.86240
# (se 1.7e-4). The QMC estimate must land within a few joint standard errors.
Q3 = _query(
    [20.0, 25.0, 32.0],
    [[16.0, 6.0, 2.0], [6.0, 25.0, 5.0], [2.0, 5.0, 36.0]],
    21.0,
    15.0,
)
Q3_REF = 0.8639216

Q_CAUCHY = _query([50.0, 45.0], [[100.0, 40.0], [40.0, 80.0]], 1.0, 15.0)
Q_CAUCHY_REF = 0.8625022


def test_three_dimensional_reference():
    p, se = student_t_orthant(Q3, np.random.default_rng(1))
    assert p == pytest.approx(Q3_REF, abs=5e-4)
    assert 0.0 < se <= 2e-4


def test_cauchy_reference():
    p, _ = student_t_orthant(Q_CAUCHY, np.random.default_rng(2))
    assert p == pytest.approx(Q_CAUCHY_REF, abs=5e-4)


def test_one_dimension_is_exact():
    q = _query([22.0], [[9.0]], 7.0, 15.0)
    p, se = student_t_orthant(q)
    assert se == 0.0
    assert p == stdtr(7.0, (22.0 - 15.0) / 3.0)


def test_diagonal_shape_is_product():
    q = _query([20.0, 30.0, 18.0], np.diag([16.0, 4.0, 25.0]), 11.0, 15.0)
    p, se = student_t_orthant(q)
    assert se == 0.0
    want = np.prod([stdtr(11.0, z) for z in ((20.0 - 15.0) / 4.0,
                                             (30.0 - 15.0) / 2.0,
                                             (18.0 - 15.0) / 5.0)])
    assert p == pytest.approx(want, rel=1e-14)


def test_infinite_lower_bound_is_certain():
    q = _query([20.0, 30.0], [[16.0, 5.0], [5.0, 4.0]], 3.0, -math.inf)
    assert student_t_orthant(q) == (1.0, 0.0)


def test_monotone_in_lower_bound():
    rng = np.random.default_rng(3)
    probs = []
    for lower in (5.0, 15.0, 25.0):
        q = _query(Q3.location, Q3.shape_matrix, Q3.dof, lower)
        probs.append(student_t_orthant(q, rng)[0])
    assert probs[0] > probs[1] > probs[2]


def test_coordinate_permutation_invariant():
    perm = [2, 0, 1]
    q = _query(
        Q3.location[perm], Q3.shape_matrix[np.ix_(perm, perm)], Q3.dof, Q3.lower_bound
    )
    p1, _ = student_t_orthant(Q3, np.random.default_rng(4))
    p2, _ = student_t_orthant(q, np.random.default_rng(5))
    assert p1 == pytest.approx(p2, abs=1e-3)


def test_large_dof_approaches_gaussian():
    loc = np.array([20.0, 25.0, 32.0])
    shape = Q3.shape_matrix
    q = _query(loc, shape, 1e4, 15.0)
    p, _ = student_t_orthant(q, np.random.default_rng(6))
    # P(X >= l) = P(-X <= -l) with -X ~ N(-loc, shape)
    want = multivariate_normal(mean=-loc, cov=shape).cdf(np.full(3, -15.0))
    assert p == pytest.approx(want, abs=1.5e-3)


def test_matches_monte_carlo_on_random_query():
    rng = np.random.default_rng(9)
    root = rng.normal(size=(4, 4))
    shape = root @ root.T + 2.0 * np.eye(4)
    loc = rng.uniform(18.0, 40.0, size=4)
    q = _query(loc, shape, 9.0, 12.0)
    p, se = student_t_orthant(q, np.random.default_rng(10))
    ref, ref_se = mc_student_orthant(loc, shape, 9.0, 12.0, 400_000, np.random.default_rng(11))
    assert abs(p - ref) <= 4 * math.hypot(se, ref_se)


def test_query_validation():
    with pytest.raises(ValidationError):
        _query([1.0, 2.0], [[1.0]], 3.0, 0.0)
    with pytest.raises(ValidationError):
        _query([1.0], [[np.inf]], 3.0, 0.0)
    with pytest.raises(ValidationError):
        _query([1.0, 2.0], [[1.0, 0.5], [0.2, 1.0]], 3.0, 0.0)
    with pytest.raises(ValidationError):
        _query([1.0], [[1.0]], 0.0, 0.0)
    with pytest.raises(ValidationError):
        _query([1.0], [[1.0]], 3.0, math.inf)
    with pytest.raises(ValidationError):
        _query([1.0], [[1.0]], 3.0, math.nan)


def test_degenerate_shapes_raise():
    with pytest.raises(NumericalError):
        student_t_orthant(_query([1.0, 2.0], [[1.0, 0.0], [0.0, 0.0]], 3.0, 0.0))
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # symmetric but indefinite
    with pytest.raises(NumericalError):
        student_t_orthant(_query([1.0, 2.0], bad, 3.0, 0.0))
