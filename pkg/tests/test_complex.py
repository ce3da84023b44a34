import math
import warnings

import numpy as np
import pytest

from novikov_lab.complex import (
    BelowRhoWarning,
    IllConditionedRankWarning,
    NovikovComplex,
    assemble,
    compose,
    export_json,
    homology_ranks,
    numerical_rank,
    specialize,
    verify_d_squared,
)
from novikov_lab.exceptions import CoverageError, DSquaredError
from novikov_lab.flow import IncidenceTable, incidence_table
from novikov_lab.manifold import cosine_model
from novikov_lab.ring import Lattice, RingElement


def test_empty_complex():
    m = cosine_model((0.3, 0.3 * math.sqrt(2)), 0.1)
    c = assemble(incidence_table(m, 1.0), m)
    assert all(len(g) == 0 for g in c.generators.values())
    assert verify_d_squared(c).passed
    sc = specialize(c, 1.0)
    assert all(sc.matrix(q).shape == (0, 0) for q in range(2))
    assert homology_ranks(sc) == (0, 0, 0)


def test_circle_zero_boundary():
    m = cosine_model((0,))
    c = assemble(incidence_table(m, 1.0), m)
    assert c.shape(0) == (1, 1)
    assert c.matrix(0)[0][0].is_zero()
    assert homology_ranks(specialize(c, 0)) == (1, 1)


def test_exact_torus(exact_t2):
    m, table = exact_t2
    c = assemble(table, m)
    assert [len(c.generators[q]) for q in range(3)] == [1, 2, 1]
    assert all(e.is_zero() for q in range(2) for row in c.matrix(q) for e in row)
    assert verify_d_squared(c).passed
    assert homology_ranks(specialize(c, 0)) == (1, 2, 1)
    assert c.euler_characteristic() == 0


def test_novikov_complex(novikov):
    m, table = novikov
    c = assemble(table, m)
    rep = verify_d_squared(c)
    assert rep.passed and rep.bound >= table.action_bound
    for s in [2, 3, 4, 2.5 + 1j, 3 - 2j]:
        sc = specialize(c, s)
        assert homology_ranks(sc) == (0, 0, 0)
        assert sc.composition_residual() < 1e-8
    assert homology_ranks(specialize(c, 0)) == (1, 2, 1)


def test_conjugation_symmetry(novikov):
    m, table = novikov
    c = assemble(table, m)
    a, b = specialize(c, 2 + 0.7j), specialize(c, 2 - 0.7j)
    for q in range(2):
        assert np.allclose(a.matrix(q), np.conj(b.matrix(q)), atol=1e-14)


def test_specialize_commutes_with_composition(novikov):
    m, table = novikov
    c = assemble(table, m)
    s = 1.3 + 0.4j
    sc = specialize(c, s)
    comp = compose(c, 0)
    lhs = sc.matrix(1) @ sc.matrix(0)
    z, y = c.generators[2][0], c.generators[0][0]
    from novikov_lab.ring import evaluate

    rhs = evaluate(comp[0][0], s) * np.exp(-s * (c.heights[z] - c.heights[y]))
    assert abs(lhs[0, 0] - rhs) <= 1e-12


def test_exact_entries_are_counts_times_exponential():
    lat = Lattice(())
    c = NovikovComplex(
        lat,
        {0: [1], 1: [0]},
        {0: [[RingElement(lat, {(): 3})]]},
        {0: 2.0, 1: 0.5},
        1.0,
        1,
    )
    sc = specialize(c, 0.7)
    assert sc.matrix(0)[0, 0] == pytest.approx(3 * math.exp(-0.7 * 1.5))
    assert specialize(c, 0).matrix(0)[0, 0] == 3


def test_d_squared_violation_witness():
    lat = Lattice((1.0,))
    one = RingElement(lat, {0: 1}, action_bound=5.0)
    c = NovikovComplex(lat, {0: [2], 1: [1], 2: [0]}, {0: [[one]], 1: [[one]]}, {0: 0.0, 1: 0.0, 2: 0.0}, 5.0, 2)
    with pytest.raises(DSquaredError) as err:
        verify_d_squared(c)
    assert err.value.witness[:3] == (0, 2, (0,))


def test_missing_coverage(novikov):
    m, table = novikov
    partial = IncidenceTable.from_dict(table.to_dict())
    partial.sources = partial.sources[:1]
    with pytest.raises(CoverageError):
        assemble(partial, m)


def test_rank_threshold_warning():
    with pytest.warns(IllConditionedRankWarning):
        assert numerical_rank(np.diag([1.0, 2e-8])) == 2
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert numerical_rank(np.diag([1.0, 1e-14])) == 1


def test_below_rho_warning(novikov):
    m, table = novikov
    with pytest.warns(BelowRhoWarning):
        specialize(assemble(table, m), 0.05, rho_hat=0.1)


def test_betti_constant_over_s_grid(novikov):
    m, table = novikov
    c = assemble(table, m)
    assert {homology_ranks(specialize(c, s)) for s in np.linspace(1.1, 5, 5)} == {(0, 0, 0)}


def test_serialization(novikov):
    m, table = novikov
    c = assemble(table, m)
    again = NovikovComplex.from_dict(c.to_dict())
    assert again.to_text() == c.to_text()
    assert export_json(specialize(c, 2)) == export_json(specialize(again, 2))
