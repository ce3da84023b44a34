import math

import numpy as np
import pytest

from novikov_lab.bridge import (
    Interpolant,
    build_chart,
    build_charts,
    build_small_basis,
    fit_recovered_counts,
    int_s,
    int_s_batch,
    recover_incidence,
    verify_chain_map,
)
from novikov_lab.complex import BelowRhoWarning, assemble
from novikov_lab.exceptions import BasisError, ChainMapError, ExhaustionError, LeakageError
from novikov_lab.flow import incidence_table
from novikov_lab.manifold import ModelManifold, cosine_model
from novikov_lab.spectral import FormField, grid

from test_spectral import band_limited

PI = math.pi


@pytest.fixture(scope="module")
def exact_charts(exact_t2):
    m, _ = exact_t2
    return build_charts(m)


@pytest.fixture(scope="module")
def circle():
    m = cosine_model((0,))
    c = assemble(incidence_table(m, 1.0), m)
    return m, c, build_charts(m)


def test_interpolant_exact_on_trig_polynomials():
    f = lambda x: np.cos(3 * x[..., 0] - x[..., 1]) + 0.5 * np.sin(2 * x[..., 1])
    form = FormField.from_function(2, 0, 16, f)
    pts = np.random.default_rng(0).uniform(0, 2 * PI, (50, 2))
    assert np.allclose(Interpolant([form])(pts)[0, 0], f(pts), atol=1e-12)


def test_upsample_matches_pointwise():
    form = band_limited(np.random.default_rng(1), 2, 2, 16)
    ip = Interpolant([form])
    up = ip.upsample(48, 0.5)[0, 0].ravel()
    x = (grid(2, 48) + 0.5 * 2 * PI / 48).reshape(-1, 2)
    assert np.allclose(up, ip(x)[0, 0], atol=1e-12)


def test_minimum_chart_is_a_point(exact_t2, exact_charts):
    m, _ = exact_t2
    x = m.by_index(0)[0]
    one = FormField(0, np.ones((1, 16, 16)))
    assert int_s(m, one, x, 0.0, exact_charts[x.id]).value == pytest.approx(1.0, abs=1e-14)


def test_top_chart_has_full_volume(exact_t2, exact_charts):
    m, _ = exact_t2
    x = m.by_index(2)[0]
    area = FormField(2, np.ones((1, 16, 16)))
    res = int_s(m, area, x, 0.0, exact_charts[x.id])
    assert abs(res.value) == pytest.approx(4 * PI**2, rel=1e-12)
    assert res.tail == 0.0


def test_saddle_curve_wraps_once(exact_t2, exact_charts):
    m, _ = exact_t2
    for x in m.by_index(1):
        e = x.unstable[:, 0]
        dtheta = FormField(1, np.stack([np.full((16, 16), e[0]), np.full((16, 16), e[1])]))
        assert int_s(m, dtheta, x, 0.0, exact_charts[x.id]).value.real == pytest.approx(2 * PI, rel=1e-9)


def test_linearity(exact_t2, exact_charts):
    m, _ = exact_t2
    rng = np.random.default_rng(2)
    for x in m.critical_points():
        a, b = band_limited(rng, 2, x.index, 24), band_limited(rng, 2, x.index, 24)
        ia, ib, iab = int_s_batch(m, [a, b, a * 2.0 + b * (-3.0)], x, 1.5, exact_charts[x.id])
        assert abs(iab.value - (2 * ia.value - 3 * ib.value)) <= 1e-10 * max(1.0, iab.magnitude)


def test_bump_family_concentrates():
    m = ModelManifold((0.0,), (((2,), 1.0, 0.0),))
    maxima = m.by_index(1)
    assert len(maxima) == 2
    x, other = maxima
    chart = build_charts(m, grid_size=1024)
    N = 512
    th = grid(1, N)[..., 0]
    values = []
    for lam in (0.3, 0.15, 0.075):
        d = np.mod(th - x.position[0] + PI, 2 * PI) - PI
        bump = np.exp(-0.5 * (d / (lam / 3)) ** 2)
        bump /= bump.sum() * 2 * PI / N
        alpha = FormField(1, bump[None] * chart[x.id].orientation)
        values.append(int_s(m, alpha, x, 1.0, chart[x.id]).value.real)
        assert abs(int_s(m, alpha, other, 1.0, chart[other.id]).value) < 1e-6
    assert values[0] < values[1] < values[2] < 1
    assert 1 - values[2] < 2e-3


def test_below_rho_warns(exact_t2, exact_charts):
    m, _ = exact_t2
    x = m.by_index(0)[0]
    with pytest.warns(BelowRhoWarning):
        int_s(m, FormField(0, np.ones((1, 8, 8))), x, 0.0, exact_charts[x.id], rho_hat=0.0)


def test_short_chart_is_insufficient(exact_t2):
    m, _ = exact_t2
    x = m.by_index(1)[0]
    chart = build_chart(m, x, max_time=1.0)
    with pytest.raises(ExhaustionError):
        int_s(m, FormField(1, np.ones((2, 16, 16))), x, 0.0, chart)


# -- chain map -----------------------------------------------------------------------


def test_chain_map_exact_torus(exact_t2, exact_charts):
    m, table = exact_t2
    c = assemble(table, m)
    rng = np.random.default_rng(3)
    alphas = [band_limited(rng, 2, j % 2, 32) for j in range(10)]
    rep = verify_chain_map(alphas, 2.0, m, c, exact_charts)
    assert rep.max_residual < 1e-3


def test_chain_map_novikov(novikov):
    m, table = novikov
    c = assemble(table, m)
    rng = np.random.default_rng(4)
    alphas = [band_limited(rng, 2, j % 2, 32) for j in range(6)]
    rep = verify_chain_map(alphas, 2.0, m, c, build_charts(m))
    assert rep.max_residual < 1e-3
    # the right-hand side is genuinely nonzero here
    assert max(abs(v) for v in rep.rhs.values()) > 1e-3


def test_chain_map_kernel_element(exact_t2, exact_charts):
    m, table = exact_t2
    s = 2.0
    # e^{-sh} dtheta_1 is d_s-closed when omega = dh
    x = grid(2, 32)
    w = np.exp(-s * m.h_lift(x))
    alpha = FormField(1, np.stack([w, np.zeros_like(w)]))
    rep = verify_chain_map([alpha], s, m, assemble(table, m), exact_charts)
    assert all(abs(v) < 1e-8 for v in rep.lhs.values())
    assert all(abs(v) < 1e-8 for v in rep.rhs.values())


def test_chain_map_failure_has_breakdown(exact_t2, exact_charts):
    m, table = exact_t2
    c = assemble(table, m)
    # corrupt the complex: a saddle-to-minimum entry that the flow does not produce
    c.boundary[0][0][0] = c.boundary[0][0][0] + type(c.boundary[0][0][0]).delta(c.lattice, ())
    alpha = band_limited(np.random.default_rng(5), 2, 0, 32)
    with pytest.raises(ChainMapError) as err:
        verify_chain_map([alpha], 2.0, m, c, exact_charts)
    assert err.value.breakdown


# -- small complex and recovery -------------------------------------------------------


def test_circle_basis_and_recovery(circle):
    m, c, charts = circle
    b = build_small_basis(m, 12.0, 64, charts=charts)
    for q in (0, 1):
        assert b.int_matrix[q].shape == (1, 1) and abs(b.int_matrix[q][0, 0]) > 1e-3
    assert b.reproduction < 1e-12
    rec = recover_incidence(m, b, c)
    assert abs(rec.matrices[0][0, 0]) < 1e-3


def test_quasimode_comparison_improves(circle):
    m, _, charts = circle
    dev = [build_small_basis(m, t, 64, charts=charts).quasimode_deviation for t in (8.0, 12.0, 16.0)]
    for q in (0, 1):
        assert dev[0][q] > dev[1][q] > dev[2][q]


def test_exact_torus_recovers_zero(exact_t2, exact_charts):
    m, table = exact_t2
    rec = recover_incidence(m, build_small_basis(m, 12.0, 32, charts=exact_charts), assemble(table, m))
    for mat in rec.matrices.values():
        assert np.max(np.abs(mat)) < 1e-3


def test_no_zeros_gives_empty_basis():
    b = build_small_basis(ModelManifold((0.7, 0.7 * math.sqrt(2))), 10.0, 16)
    assert b.empty
    assert recover_incidence(ModelManifold((0.7, 0.7 * math.sqrt(2))), b).matrices == {}


def test_novikov_recovery_matches_trajectories(novikov):
    m, table = novikov
    c = assemble(table, m)
    charts = build_charts(m)
    recs = [recover_incidence(m, build_small_basis(m, t, 48, charts=charts, quasimodes=False), c) for t in (12.0, 16.0)]
    for r in recs:
        assert all(err < 0.05 for err in r.relative_error.values())
        assert any(np.max(np.abs(o)) > 1e-3 for o in r.oracle.values())
    fits = fit_recovered_counts(recs, table, m)
    assert fits and all(f.exact for f in fits)


def test_ill_conditioned_basis_raises(circle):
    m, _, charts = circle
    with pytest.raises(BasisError):
        build_small_basis(m, 12.0, 64, charts=charts, max_condition=0.5, quasimodes=False)


def test_leakage_tolerance_enforced(circle):
    m, c, charts = circle
    b = build_small_basis(m, 12.0, 64, charts=charts, quasimodes=False)
    with pytest.raises(LeakageError):
        recover_incidence(m, b, c, leakage_tol=0.0)
