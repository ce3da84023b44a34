import math

import numpy as np
import pytest

from novikov_lab.exceptions import ConfigError, DegenerateZeroError
from novikov_lab.manifold import ModelManifold, cosine_model, product, torus_distance

PI = math.pi


def positions(zeros):
    return [tuple(np.round(z.position, 9)) for z in zeros]


def test_exact_torus_zeros():
    zeros = cosine_model((0, 0)).find_zeros()
    expected = {(0, 0): 2, (0, PI): 1, (PI, 0): 1, (PI, PI): 0}
    assert len(zeros) == 4
    for z in zeros:
        key = min(expected, key=lambda e: torus_distance(e, z.position))
        assert torus_distance(key, z.position) < 1e-9
        assert z.index == expected[key]
        assert np.allclose(np.diag(z.hessian), -np.cos(z.position))


def test_no_zeros_for_nonvanishing_form():
    assert cosine_model((1.0, math.sqrt(2)), amplitude=0.0).find_zeros() == []


def test_shifted_zeros():
    zeros = ModelManifold((0.5, 0), (((1, 0), 1, 0), ((0, 1), 1, 0))).find_zeros()
    a = math.asin(0.5)
    expected = {(a, 0), (a, PI), (PI - a, 0), (PI - a, PI)}
    assert len(zeros) == 4
    for z in zeros:
        assert min(torus_distance(e, z.position) for e in expected) < 1e-9


def test_zeros_sorted_and_satisfy_invariants():
    m = ModelManifold((0.1, 0.0), (((1, 0), 0.3, 0), ((0, 1), 0.3, 0), ((1, 1), 0.05, 0.2)))
    zeros = m.find_zeros()
    assert positions(zeros) == sorted(positions(zeros))
    for z in zeros:
        assert np.linalg.norm(m.omega(z.position)) < m.newton_tol
        assert abs(np.linalg.det(z.hessian)) > m.degeneracy_tol
        assert z.index == int(np.sum(np.linalg.eigvalsh(z.hessian) < 0))


@pytest.mark.parametrize(
    "p, index",
    [((0.0, 0.0), 2), ((PI, PI), 0)],
)
def test_hessian_index(p, index):
    m = cosine_model((0, 0))
    assert m.hessian_index(p)[0] == index


def test_degenerate_zero():
    m = ModelManifold((0, 0), (((1, 0), 1, 0),))
    with pytest.raises(DegenerateZeroError):
        m.hessian_index((0.0, 0.0))
    with pytest.raises(DegenerateZeroError):
        m.find_zeros()


def test_h_lift_deck_shift():
    m = ModelManifold((1.0, math.sqrt(2)))
    assert m.h_lift(np.array([2 * PI, 0])) - m.h_lift(np.zeros(2)) == pytest.approx(2 * PI)
    shift = m.h_lift(np.array([2 * PI, 2 * PI])) - m.h_lift(np.zeros(2))
    assert shift == pytest.approx(2 * PI * (1 + math.sqrt(2)))


def test_h_lift_exact_difference():
    m = cosine_model((0, 0))
    assert m.h_lift(np.zeros(2)) - m.h_lift(np.array([PI, PI])) == pytest.approx(4)


def test_deck_equivariance_of_h():
    m = ModelManifold((0.3, -0.5 * math.sqrt(2)), (((1, 1), 0.2, 0.4),))
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.uniform(-5, 5, 2)
        off = rng.integers(-3, 4, 2)
        lhs = m.h_lift(x + 2 * PI * off) - m.h_lift(x)
        assert lhs == pytest.approx(m.translation_action(off))
        assert m.lattice.action(m.deck_element(off)) == pytest.approx(-lhs)


def test_dh_equals_omega():
    m = ModelManifold((0.3, 0.1 * math.sqrt(3)), (((1, 0), 0.4, 0.1), ((1, 2), 0.2, 1.0)))
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 2 * PI, (100, 2))
    eps = 1e-6
    fd = np.stack([(m.h_lift(x + eps * e) - m.h_lift(x - eps * e)) / (2 * eps) for e in np.eye(2)], axis=-1)
    assert np.max(np.abs(fd - m.omega(x))) < 1e-6


@pytest.mark.parametrize(
    "m",
    [
        cosine_model((0, 0)),
        cosine_model((0.1, 0), 0.3),
        cosine_model((0.2,), 1.0),
        ModelManifold((0.1, 0.0), (((1, 0), 0.3, 0), ((0, 1), 0.3, 0), ((1, 1), 0.05, 0.2))),
        product(cosine_model((0, 0)), cosine_model((0.1,), 0.5)),
    ],
)
def test_euler_characteristic_vanishes(m):
    zeros = m.find_zeros(grid_per_axis=12)
    assert sum((-1) ** z.index for z in zeros) == 0
    assert len(zeros) > 0


def test_lattice_rank_and_periods():
    m = cosine_model((0.1, 0), 0.3)
    assert m.lattice.rank == 1
    assert m.lattice.periods == pytest.approx((2 * PI * 0.1,))
    assert cosine_model((0, 0)).lattice.rank == 0


def test_section_h_window():
    m = cosine_model((0.1, 0), 0.3)
    period = m.lattice.periods[0]
    for z in m.find_zeros():
        assert 0 <= m.lift(z).h_value < period


def test_config_roundtrip_and_rejects_unknown():
    m = ModelManifold((0.1, 0.0), (((1, 0), 0.3, 0.0),), metric=[[2.0, 0.1], [0.1, 1.0]])
    m2 = ModelManifold.from_dict(m.to_dict())
    assert m2.fingerprint() == m.fingerprint()
    with pytest.raises(ConfigError):
        ModelManifold.from_dict({"periods": [0.1], "amplitude": 3})
    with pytest.raises(ConfigError):
        ModelManifold.from_dict({"periods": [0.1, 0.2], "metric": [[1, 0], [0, -1]]})


def test_metric_must_be_positive_definite():
    with pytest.raises(ValueError):
        ModelManifold((0.0,), metric=[[0.0]])
