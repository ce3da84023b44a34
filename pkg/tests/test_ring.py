import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from novikov_lab.exceptions import (
    ActionCollisionError,
    IllConditionedError,
    InsufficientDataError,
    LatticeMismatchError,
    NoIntegerFitError,
)
from novikov_lab.ring import (
    DirichletSeries,
    Lattice,
    RingElement,
    abscissa_estimate,
    convolve,
    evaluate,
    fit_integer_coefficients,
    product_tail,
    to_dirichlet,
)

L1 = Lattice((1.0,))
L2 = Lattice((1.0, math.sqrt(2)))


def brute_convolve(f, g):
    # independent oracle: enumerate every lattice point in the Minkowski box
    out = {}
    pts_f, pts_g = list(f.support), list(g.support)
    if not pts_f or not pts_g:
        return {}
    r = f.lattice.rank
    lo = [min(p[i] for p in pts_f) + min(q[i] for q in pts_g) for i in range(r)]
    hi = [max(p[i] for p in pts_f) + max(q[i] for q in pts_g) for i in range(r)]
    for c in np.ndindex(*[h - l + 1 for l, h in zip(lo, hi)]):
        c = tuple(int(x) + l for x, l in zip(c, lo))
        total = Fraction(0)
        for a in pts_f:
            b = tuple(ci - ai for ci, ai in zip(c, a))
            total += f.coefficient(a) * g.coefficient(b) if b in g.support else 0
        if total:
            out[c] = total
    return out


def elements(lattice, max_size=8):
    r = lattice.rank
    point = st.tuples(*[st.integers(-3, 3)] * r)
    coef = st.fractions(min_value=-5, max_value=5, max_denominator=6)
    return st.dictionaries(point, coef, max_size=max_size).map(lambda d: RingElement(lattice, d))


def test_delta_zero_is_identity():
    f = RingElement(L2, {(1, 0): 2, (0, -1): Fraction(1, 3)})
    assert convolve(RingElement.delta(L2), f) == f


def test_translation():
    out = convolve(RingElement.delta(L2, (1, 0)), RingElement.delta(L2, (0, 1)))
    assert out == RingElement.delta(L2, (1, 1))


def test_square_of_binomial():
    f = RingElement(L1, {0: 1, 1: 1})
    assert convolve(f, f).support == brute_convolve(f, f) == {(0,): 1, (1,): 2, (2,): 1}


def test_lattice_mismatch():
    with pytest.raises(LatticeMismatchError):
        convolve(RingElement.delta(L1), RingElement.delta(Lattice((2.0,))))


def test_zero_coefficients_dropped():
    f = RingElement(L1, {0: 0, 1: 3})
    assert list(f.support) == [(1,)]


@settings(max_examples=60, deadline=None)
@given(elements(L1), elements(L1), elements(L1))
def test_rank1_commutative_associative(f, g, h):
    assert convolve(f, g) == convolve(g, f)
    assert convolve(convolve(f, g), h) == convolve(f, convolve(g, h))
    assert convolve(f, g).support == brute_convolve(f, g)


@settings(max_examples=60, deadline=None)
@given(elements(L2), elements(L2), elements(L2))
def test_rank2_associative(f, g, h):
    assert convolve(convolve(f, g), h) == convolve(f, convolve(g, h))
    assert convolve(f, g).support == brute_convolve(f, g)


@settings(max_examples=40, deadline=None)
@given(elements(L2), elements(L2), st.complex_numbers(max_magnitude=2, allow_nan=False, allow_infinity=False))
def test_evaluation_multiplicative(f, g, s):
    direct = sum(
        complex(ca * cb) * np.exp(-s * (L2.action(a) + L2.action(b)))
        for a, ca in f.support.items()
        for b, cb in g.support.items()
    )
    lhs = evaluate(convolve(f, g), s)
    assert abs(lhs - direct) <= 1e-9 * (1 + abs(direct))
    assert abs(lhs - evaluate(f, s) * evaluate(g, s)) <= 1e-9 * (1 + abs(direct))


def test_truncated_product_tail_bound():
    f = RingElement(L1, {0: 1, 1: 1, 2: 1}, action_bound=2.5)
    g = RingElement(L1, {0: 1, 1: -1}, action_bound=1.5)
    fg = convolve(f, g)
    # unknown g terms start above 1.5, known f starts at 0 -> bound 1.5
    assert fg.action_bound == 1.5
    s = 0.7
    gap = abs(evaluate(fg, s) - evaluate(f, s) * evaluate(g, s))
    assert gap <= product_tail(f, g, s) + 1e-14
    assert product_tail(f, g, s) > 0


def test_evaluate_single_term():
    assert evaluate(RingElement.delta(L1, 1), 1.0) == pytest.approx(0.367879441, abs=1e-9)


def test_evaluate_geometric_series():
    f = RingElement(L1, {n: 1 for n in range(101)})
    assert abs(evaluate(f, 1.0) - 1 / (1 - math.exp(-1))) < 1e-12
    assert abs(evaluate(f, 1.0) - 1.581976707) < 1e-9


@pytest.mark.parametrize("s", [0.0, 1.5, 2 - 3j, -1j])
def test_evaluate_unit(s):
    assert evaluate(RingElement.delta(L2), s) == 1


def test_to_dirichlet_cases():
    d = to_dirichlet(RingElement.delta(L1, 2))
    assert d.exponents == (2.0,) and d.coefficients == (1,)
    d = to_dirichlet(RingElement(L2, {(1, 0): 1, (0, 1): 1}))
    assert d.exponents == pytest.approx((1.0, math.sqrt(2)))
    assert d.coefficients == (1, 1)


def test_to_dirichlet_collision_policy():
    f = RingElement(Lattice((1.0, 2.0)), {(2, 0): 1, (0, 1): -1})
    with pytest.raises(ActionCollisionError):
        to_dirichlet(f)
    merged = to_dirichlet(f, collision="merge")
    assert len(merged) == 0


@settings(max_examples=40, deadline=None)
@given(elements(L2), st.floats(-1, 2))
def test_to_dirichlet_preserves_evaluation(f, s):
    assert abs(to_dirichlet(f)(s) - evaluate(f, s)) <= 1e-14 * max(1.0, sum(abs(float(c)) * math.exp(-s * L2.action(p)) for p, c in f.support.items()))


def test_dirichlet_requires_increasing():
    with pytest.raises(ValueError):
        DirichletSeries((1.0, 1.0), (1, 1))


def test_abscissa_finite_series():
    assert abscissa_estimate(DirichletSeries((1.0, 2.0), (1, 1))) == -math.inf


def test_abscissa_zeta_like():
    gen = lambda: ((n, 1.0) for n in range(1, 201))
    assert abs(abscissa_estimate(DirichletSeries((), ()), gen)) < 0.05


def test_abscissa_exponential_growth():
    gen = lambda: ((n, math.exp(2 * n)) for n in range(1, 51))
    assert abscissa_estimate(DirichletSeries((), ()), gen) == pytest.approx(2, abs=0.05)


def test_abscissa_insufficient():
    with pytest.raises(InsufficientDataError):
        abscissa_estimate(DirichletSeries((), ()), [(1.0, 1.0), (2.0, 1.0)])


def test_fit_single_exponent():
    samples = [(t, 3 * math.exp(-2 * t)) for t in range(1, 11)]
    assert fit_integer_coefficients(samples, [2.0]).coefficients == (3,)


def test_fit_two_exponents():
    samples = [(t, math.exp(-t) - 2 * math.exp(-3 * t)) for t in range(1, 11)]
    fit = fit_integer_coefficients(samples, [1.0, 3.0])
    assert fit.coefficients == (1, -2)
    assert fit.rounded_residual < 1e-12


def test_fit_with_noise():
    rng = np.random.default_rng(0)
    samples = [(t, math.exp(-t) - 2 * math.exp(-3 * t) + 1e-6 * rng.standard_normal()) for t in range(1, 11)]
    fit = fit_integer_coefficients(samples, [1.0, 3.0])
    assert fit.coefficients == (1, -2)
    assert fit.residual < 1e-4


def test_fit_ill_conditioned():
    samples = [(t, math.exp(-t)) for t in range(1, 11)]
    with pytest.raises(IllConditionedError):
        fit_integer_coefficients(samples, [1.0, 1.0 + 1e-11])


def test_fit_non_integer():
    samples = [(t, 0.5 * math.exp(-t)) for t in range(1, 11)]
    with pytest.raises(NoIntegerFitError):
        fit_integer_coefficients(samples, [1.0])


def test_serialization_roundtrip():
    f = RingElement(L2, {(1, -1): Fraction(-3, 7), (0, 2): 5}, action_bound=4.0)
    assert RingElement.from_json(f.to_json()) == f
    d = to_dirichlet(RingElement(L1, {1: 2, 3: -1}))
    assert DirichletSeries.from_dict(d.to_dict()) == DirichletSeries(d.exponents, tuple(complex(c) for c in d.coefficients))
