"""Truncated Novikov ring elements and their Dirichlet series.

An element of the Novikov ring is a function on a lattice Z^r (the deck
group) whose support is finite below every action level.  We only ever hold
finitely many coefficients, so each element also records the action level
``action_bound`` above which its coefficients are unknown.  Exact elements
(complete supports) use ``math.inf``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Number
from typing import Callable, Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .exceptions import (
    ActionCollisionError,
    IllConditionedError,
    InsufficientDataError,
    LatticeMismatchError,
    NoIntegerFitError,
)

COLLISION_TOL = 1e-12


@dataclass(frozen=True)
class Lattice:
    """The deck group Z^r with positive periods ``[omega](e_i)``.

    Rank 0 is allowed and stands for an exact form (trivial deck group).
    """

    periods: tuple[float, ...]

    def __post_init__(self):
        periods = tuple(float(p) for p in self.periods)
        object.__setattr__(self, "periods", periods)
        if any(not p > 0 for p in periods):
            raise ValueError(f"lattice periods must be positive, got {periods}")

    @property
    def rank(self) -> int:
        return len(self.periods)

    def action(self, point: Sequence[int]) -> float:
        return float(sum(p * n for p, n in zip(self.periods, point)))

    def check_collisions(self, points: Iterable[Sequence[int]], tol: float = COLLISION_TOL):
        """Raise if two distinct points share an action within ``tol``.

        Q-independence of the periods cannot be decided on floats, so this
        is the operational substitute.
        """
        pts = sorted({tuple(p) for p in points}, key=self.action)
        for a, b in zip(pts, pts[1:]):
            if abs(self.action(a) - self.action(b)) < tol:
                raise ActionCollisionError(
                    f"lattice points {a} and {b} have equal action {self.action(a):.15g}"
                )


def _as_point(key, rank: int) -> tuple[int, ...]:
    if isinstance(key, (int, np.integer)):
        key = (int(key),)
    pt = tuple(int(k) for k in key)
    if len(pt) != rank:
        raise ValueError(f"lattice point {pt} does not have rank {rank}")
    return pt


def _coerce(c):
    if isinstance(c, (int, np.integer)):
        return Fraction(int(c))
    if isinstance(c, Fraction):
        return c
    if isinstance(c, (float, np.floating)):
        return float(c)
    if isinstance(c, (complex, np.complexfloating)):
        return complex(c)
    if isinstance(c, Number):
        return c
    raise TypeError(f"unsupported coefficient type {type(c).__name__}")


@dataclass(frozen=True)
class RingElement:
    """Finite-support truncation of a Novikov ring element.

    ``support`` maps lattice points to nonzero coefficients; integer input
    is stored as :class:`fractions.Fraction` so that products stay exact.
    """

    lattice: Lattice
    support: Mapping[tuple[int, ...], object] = field(default_factory=dict)
    action_bound: float = math.inf

    def __post_init__(self):
        clean = {}
        for k, v in dict(self.support).items():
            v = _coerce(v)
            if v != 0:
                clean[_as_point(k, self.lattice.rank)] = v
        object.__setattr__(self, "support", clean)
        object.__setattr__(self, "action_bound", float(self.action_bound))

    # -- constructors -------------------------------------------------
    @classmethod
    def zero(cls, lattice: Lattice, action_bound: float = math.inf) -> "RingElement":
        return cls(lattice, {}, action_bound)

    @classmethod
    def delta(cls, lattice: Lattice, point=None, coefficient=1) -> "RingElement":
        if point is None:
            point = (0,) * lattice.rank
        return cls(lattice, {_as_point(point, lattice.rank): coefficient})

    # -- basic queries ------------------------------------------------
    def __len__(self):
        return len(self.support)

    def __iter__(self) -> Iterator[tuple[tuple[int, ...], object]]:
        return iter(sorted(self.support.items(), key=lambda kv: (self.lattice.action(kv[0]), kv[0])))

    def coefficient(self, point) -> object:
        return self.support.get(_as_point(point, self.lattice.rank), 0)

    def min_action(self) -> float:
        if not self.support:
            return math.inf
        return min(self.lattice.action(p) for p in self.support)

    def is_exact(self) -> bool:
        return all(isinstance(v, Fraction) for v in self.support.values())

    def is_zero(self) -> bool:
        return not self.support

    def restricted(self, bound: float) -> "RingElement":
        """Drop coefficients above ``bound`` and lower the action bound."""
        bound = min(bound, self.action_bound)
        kept = {p: c for p, c in self.support.items() if self.lattice.action(p) <= bound}
        return RingElement(self.lattice, kept, bound)

    def __eq__(self, other):
        if not isinstance(other, RingElement):
            return NotImplemented
        return (
            self.lattice == other.lattice
            and self.support == other.support
            and self.action_bound == other.action_bound
        )

    def __hash__(self):
        return hash((self.lattice, tuple(sorted(self.support.items())), self.action_bound))

    # -- arithmetic ---------------------------------------------------
    def _check(self, other: "RingElement"):
        if self.lattice != other.lattice:
            raise LatticeMismatchError(f"{self.lattice} vs {other.lattice}")

    def __add__(self, other: "RingElement") -> "RingElement":
        self._check(other)
        out = dict(self.support)
        for p, c in other.support.items():
            out[p] = out.get(p, 0) + c
        bound = min(self.action_bound, other.action_bound)
        return RingElement(self.lattice, out, bound).restricted(bound)

    def __neg__(self):
        return RingElement(self.lattice, {p: -c for p, c in self.support.items()}, self.action_bound)

    def __sub__(self, other):
        return self + (-other)

    def scale(self, factor) -> "RingElement":
        factor = _coerce(factor)
        return RingElement(self.lattice, {p: c * factor for p, c in self.support.items()}, self.action_bound)

    def __mul__(self, other):
        if isinstance(other, RingElement):
            return convolve(self, other)
        return self.scale(other)

    __rmul__ = scale

    def __repr__(self):
        terms = ", ".join(f"{p}: {c}" for p, c in self)
        return f"RingElement({{{terms}}}, bound={self.action_bound:g})"

    # -- serialization ------------------------------------------------
    def to_dict(self) -> dict:
        entries = []
        for p, c in self:
            if not isinstance(c, Fraction):
                raise TypeError("only rational coefficients serialize exactly")
            entries.append([list(p), c.numerator, c.denominator])
        bound = None if math.isinf(self.action_bound) else self.action_bound
        return {
            "rank": self.lattice.rank,
            "periods": list(self.lattice.periods),
            "entries": entries,
            "action_bound": bound,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RingElement":
        lattice = Lattice(tuple(data["periods"]))
        if int(data["rank"]) != lattice.rank:
            raise ValueError("rank does not match number of periods")
        support = {tuple(e[0]): Fraction(int(e[1]), int(e[2])) for e in data["entries"]}
        bound = data.get("action_bound")
        return cls(lattice, support, math.inf if bound is None else bound)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RingElement":
        return cls.from_dict(json.loads(text))


def convolve(f: RingElement, g: RingElement) -> RingElement:
    """Product in the Novikov ring, ``(f*g)(c) = sum_a f(a) g(c - a)``.

    The result bound is the lowest action at which an unknown coefficient
    of either factor could contribute.
    """
    f._check(g)
    lat = f.lattice
    mf = min(f.min_action(), f.action_bound)
    mg = min(g.min_action(), g.action_bound)
    bound = min(f.action_bound + mg, g.action_bound + mf)
    out: dict = {}
    for a, ca in f.support.items():
        for b, cb in g.support.items():
            p = tuple(x + y for x, y in zip(a, b))
            out[p] = out.get(p, 0) + ca * cb
    return RingElement(lat, out, bound).restricted(bound)


def evaluate(f: RingElement, s: complex) -> complex:
    """Dirichlet evaluation ``sum_c f(c) exp(-s [omega](c))`` over the stored support."""
    total = 0j
    for p, c in f.support.items():
        total += complex(c) * np.exp(-s * f.lattice.action(p))
    return complex(total)


def product_tail(f: RingElement, g: RingElement, s: complex) -> float:
    """Bound on ``|ev(f) ev(g) - ev(f*g)|`` from terms dropped by truncation."""
    bound = convolve(f, g).action_bound
    tail = 0.0
    for a, ca in f.support.items():
        for b, cb in g.support.items():
            act = f.lattice.action(a) + f.lattice.action(b)
            if act > bound:
                tail += abs(complex(ca) * complex(cb)) * math.exp(-complex(s).real * act)
    return tail


@dataclass(frozen=True)
class DirichletSeries:
    """``sum_k a_k exp(-s lambda_k)`` with strictly increasing exponents."""

    exponents: tuple[float, ...]
    coefficients: tuple[complex, ...]

    def __post_init__(self):
        exps = tuple(float(e) for e in self.exponents)
        if len(exps) != len(self.coefficients):
            raise ValueError("exponents and coefficients differ in length")
        if any(b - a < COLLISION_TOL for a, b in zip(exps, exps[1:])):
            raise ValueError("exponents must be strictly increasing")
        object.__setattr__(self, "exponents", exps)
        object.__setattr__(self, "coefficients", tuple(self.coefficients))

    def __len__(self):
        return len(self.exponents)

    def __call__(self, s: complex) -> complex:
        if not self.exponents:
            return 0j
        lam = np.asarray(self.exponents)
        a = np.asarray([complex(c) for c in self.coefficients])
        return complex(np.sum(a * np.exp(-s * lam)))

    def to_dict(self) -> dict:
        return {
            "exponents": list(self.exponents),
            "coefficients": [[complex(c).real, complex(c).imag] for c in self.coefficients],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "DirichletSeries":
        return cls(tuple(data["exponents"]), tuple(complex(re, im) for re, im in data["coefficients"]))


def to_dirichlet(f: RingElement, collision: str = "error") -> DirichletSeries:
    """Group the support by action and sort.

    ``collision='error'`` (default) raises on two distinct lattice points with
    equal action; ``'merge'`` sums their coefficients instead (zeros dropped).
    """
    if collision not in ("error", "merge"):
        raise ValueError(f"unknown collision policy {collision!r}")
    items = sorted(f.support.items(), key=lambda kv: f.lattice.action(kv[0]))
    exps: list[float] = []
    coefs: list = []
    for p, c in items:
        act = f.lattice.action(p)
        if exps and act - exps[-1] < COLLISION_TOL:
            if collision == "error":
                raise ActionCollisionError(f"lattice point {p} collides at action {act:.15g}")
            coefs[-1] = coefs[-1] + c
            continue
        exps.append(act)
        coefs.append(c)
    kept = [(e, c) for e, c in zip(exps, coefs) if c != 0]
    return DirichletSeries(tuple(e for e, _ in kept), tuple(c for _, c in kept))


def abscissa_estimate(
    d: DirichletSeries,
    generator: Callable[[], Iterable[tuple[float, complex]]] | Iterable[tuple[float, complex]] | None = None,
    n_terms: int | None = None,
    window: int = 50,
) -> float:
    """Estimate the abscissa of convergence.

    A finite series without a generator is entire, so ``-inf`` is returned.
    With a generator of ``(exponent, coefficient)`` pairs, the limsup of
    ``log|A_n| / lambda_n`` (``A_n`` the partial coefficient sums) is
    estimated by the maximum over the trailing ``window`` terms, capped at
    half the available terms.  This is an estimate only; it assumes the
    series does not converge at ``s = 0``.
    """
    if generator is None:
        return -math.inf
    stream = generator() if callable(generator) else generator
    terms = []
    for i, term in enumerate(stream):
        if n_terms is not None and i >= n_terms:
            break
        terms.append(term)
    if len(terms) < 3:
        raise InsufficientDataError("need at least 3 exponents to estimate an abscissa")
    lam = np.array([float(t[0]) for t in terms])
    a = np.array([complex(t[1]) for t in terms])
    partial = np.abs(np.cumsum(a))
    w = max(1, min(window, len(terms) // 2))
    lam_t, part_t = lam[-w:], partial[-w:]
    ok = (lam_t > 0) & (part_t > 0)
    if not ok.any():
        raise InsufficientDataError("no usable terms in the estimation window")
    return float(np.max(np.log(part_t[ok]) / lam_t[ok]))


class IntegerFit(NamedTuple):
    coefficients: tuple[int, ...]
    residual: float
    rounded_residual: float
    condition: float
    raw: tuple[float, ...]


def fit_integer_coefficients(
    samples: Sequence[tuple[float, complex]],
    exponents: Sequence[float],
    max_condition: float = 1e10,
    round_tol: float = 0.25,
) -> IntegerFit:
    """Recover integer ``c_k`` from samples of ``sum_k c_k exp(-t lambda_k)``.

    Least squares on the column-normalised design matrix, then rounding.
    Raises :class:`IllConditionedError` when the normalised condition number
    exceeds ``max_condition`` and :class:`NoIntegerFitError` when a fitted
    coefficient is further than ``round_tol`` from an integer.
    """
    ts = np.array([float(np.real(t)) for t, _ in samples])
    y = np.array([complex(v) for _, v in samples])
    lam = np.asarray(exponents, dtype=float)
    if len(ts) < len(lam):
        raise InsufficientDataError("fewer samples than exponents")
    if len(set(ts.tolist())) != len(ts):
        raise ValueError("sample points must be distinct")
    if lam.size == 0:
        return IntegerFit((), float(np.linalg.norm(y)), float(np.linalg.norm(y)), 1.0, ())
    A = np.exp(-np.outer(ts, lam))
    scale = np.linalg.norm(A, axis=0)
    An = A / scale
    cond = float(np.linalg.cond(An))
    if not np.isfinite(cond) or cond > max_condition:
        raise IllConditionedError(f"design matrix condition {cond:.3g} exceeds {max_condition:.3g}")
    sol, *_ = np.linalg.lstsq(An.astype(complex), y, rcond=None)
    c = sol / scale
    if np.max(np.abs(c.imag), initial=0.0) > round_tol:
        raise NoIntegerFitError(f"fitted coefficients have imaginary parts {c.imag}")
    residual = float(np.linalg.norm(A @ c - y))
    rounded = np.rint(c.real)
    dev = np.abs(c.real - rounded)
    if np.max(dev) > round_tol:
        raise NoIntegerFitError(f"coefficients {c.real} are not within {round_tol} of integers")
    rounded_residual = float(np.linalg.norm(A @ rounded - y))
    return IntegerFit(tuple(int(v) for v in rounded), residual, rounded_residual, cond, tuple(c.real.tolist()))
