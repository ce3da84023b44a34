"""Novikov cochain complexes built from incidence tables.

Cochain convention: ``boundary[q]`` maps degree q to q+1, with rows
indexed by Cr_{q+1}, columns by Cr_q and entry (x, y) equal to the ring
element ``gamma -> I(gamma sigma x, sigma y)``.
"""

from __future__ import annotations

import cmath
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CoverageError, DSquaredError
from .flow import IncidenceTable
from .manifold import ModelManifold
from .ring import Lattice, RingElement, convolve, evaluate


class IllConditionedRankWarning(UserWarning):
    """A singular value sits within a decade of the rank threshold."""


class BelowRhoWarning(UserWarning):
    """Specialization requested at Re(s) not above the rho estimate."""


@dataclass
class NovikovComplex:
    lattice: Lattice
    generators: dict  # q -> list of critical point ids
    boundary: dict  # q -> list of rows of RingElement (Cr_{q+1} x Cr_q)
    heights: dict  # id -> h(sigma(id))
    action_bound: float
    dim: int

    def matrix(self, q: int) -> list:
        return self.boundary.get(q, [])

    def shape(self, q: int) -> tuple[int, int]:
        return len(self.generators.get(q + 1, [])), len(self.generators.get(q, []))

    def euler_characteristic(self) -> int:
        return sum((-1) ** q * len(g) for q, g in self.generators.items())

    def to_dict(self) -> dict:
        return {
            "periods": list(self.lattice.periods),
            "dim": self.dim,
            "action_bound": self.action_bound,
            "generators": {str(q): list(g) for q, g in sorted(self.generators.items())},
            "heights": {str(k): v for k, v in sorted(self.heights.items())},
            "boundary": {
                str(q): [[e.to_dict() for e in row] for row in rows] for q, rows in sorted(self.boundary.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NovikovComplex":
        return cls(
            Lattice(tuple(data["periods"])),
            {int(q): [int(v) for v in g] for q, g in data["generators"].items()},
            {int(q): [[RingElement.from_dict(e) for e in row] for row in rows] for q, rows in data["boundary"].items()},
            {int(k): float(v) for k, v in data["heights"].items()},
            float(data["action_bound"]),
            int(data["dim"]),
        )

    def to_text(self) -> str:
        out = [f"# novikov complex  R={self.action_bound!r}  rank={self.lattice.rank}"]
        for q in range(self.dim + 1):
            out.append(f"C^{q}: {self.generators.get(q, [])}")
        for q in range(self.dim):
            rows, cols = self.shape(q)
            out.append(f"d^{q}: {rows}x{cols}")
            for i, row in enumerate(self.matrix(q)):
                for j, e in enumerate(row):
                    terms = " + ".join(f"{c}*[{','.join(map(str, g))}]" for g, c in sorted(e.support.items()))
                    out.append(f"  ({self.generators[q + 1][i]},{self.generators[q][j]}): {terms or '0'}")
        return "\n".join(out) + "\n"


@dataclass
class SpecializedComplex:
    s: complex
    generators: dict
    matrices: dict  # q -> complex ndarray (Cr_{q+1} x Cr_q)
    dim: int

    def matrix(self, q: int) -> np.ndarray:
        n_rows = len(self.generators.get(q + 1, []))
        n_cols = len(self.generators.get(q, []))
        return self.matrices.get(q, np.zeros((n_rows, n_cols), dtype=complex))

    def composition_residual(self) -> float:
        """max over q of |d^{q+1} d^q| / (|d^{q+1}| |d^q|)."""
        worst = 0.0
        for q in range(self.dim - 1):
            a, b = self.matrix(q + 1), self.matrix(q)
            if a.size == 0 or b.size == 0:
                continue
            scale = max(np.linalg.norm(a) * np.linalg.norm(b), 1e-300)
            worst = max(worst, float(np.linalg.norm(a @ b)) / scale)
        return worst

    def to_text(self) -> str:
        out = [f"# specialized complex  s={self.s!r}"]
        for q in range(self.dim):
            m = self.matrix(q)
            out.append(f"d^{q}: {m.shape[0]}x{m.shape[1]}")
            for row in m:
                out.append("  " + " ".join(f"({z.real:.12e},{z.imag:.12e})" for z in row))
        return "\n".join(out) + "\n"


@dataclass
class DSquaredReport:
    max_violation: float
    bound: float
    checked: int
    above_bound: int = 0
    per_degree: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_violation == 0


def assemble(table: IncidenceTable, m: ModelManifold) -> NovikovComplex:
    """Boundary matrices with entries sum_gamma I(x, y, gamma) delta_gamma."""
    cps = m.critical_points()
    ids = {c.id for c in cps}
    missing = [c.id for c in cps if c.index >= 1 and c.id not in table.sources]
    if missing:
        raise CoverageError(f"incidence table has no data for sources {missing}")
    stray = {k[0] for k in table.entries} | {k[1] for k in table.entries}
    if not stray <= ids:
        raise CoverageError(f"incidence table mentions unknown critical points {sorted(stray - ids)}")
    gens = {q: [c.id for c in cps if c.index == q] for q in range(m.dim + 1)}
    boundary = {
        q: [[table.ring_element(x, y) for y in gens[q]] for x in gens[q + 1]] for q in range(m.dim)
    }
    heights = {c.id: table.height(c.id) for c in cps}
    return NovikovComplex(m.lattice, gens, boundary, heights, table.action_bound, m.dim)


def compose(c: NovikovComplex, q: int) -> list:
    """Entries of d^{q+1} o d^q by exact ring convolution."""
    a, b = c.matrix(q + 1), c.matrix(q)
    rows, mid = c.shape(q + 1)
    _, cols = c.shape(q)
    out = []
    for i in range(rows):
        row = []
        for j in range(cols):
            acc = RingElement.zero(c.lattice, action_bound=float("inf"))
            for k in range(mid):
                acc = acc + convolve(a[i][k], b[k][j])
            row.append(acc)
        out.append(row)
    return out


def verify_d_squared(c: NovikovComplex) -> DSquaredReport:
    """Check d^{q+1} d^q = 0 coefficientwise below the propagated bound.

    Raises ``DSquaredError`` carrying the (z, y, gamma) witness of the
    first nonzero coefficient found at action within the bound.
    """
    bound = float("inf")
    checked = above = 0
    per_degree = {}
    for q in range(c.dim - 1):
        comp = compose(c, q)
        deg_bound = float("inf")
        for i, row in enumerate(comp):
            for j, e in enumerate(row):
                deg_bound = min(deg_bound, e.action_bound)
                for g, coef in e.support.items():
                    if c.lattice.action(g) <= e.action_bound:
                        checked += 1
                        if coef != 0:
                            z, y = c.generators[q + 2][i], c.generators[q][j]
                            raise DSquaredError(
                                f"d^{q + 1} d^{q} has coefficient {coef} at ({z}, {y}, {g}) below bound {e.action_bound}",
                                witness=(z, y, g, coef),
                            )
                    else:
                        above += 1
        per_degree[q] = deg_bound
        bound = min(bound, deg_bound)
    return DSquaredReport(0.0, bound, checked, above, per_degree)


def specialize(c: NovikovComplex, s: complex, rho_hat: float | None = None) -> SpecializedComplex:
    """Entries e^{-s(h(sigma x) - h(sigma y))} ev_s(d(x, y))."""
    s = complex(s)
    if rho_hat is not None and s.real <= rho_hat:
        warnings.warn(f"Re(s)={s.real} is not above rho-hat={rho_hat}", BelowRhoWarning, stacklevel=2)
    mats = {}
    for q in range(c.dim):
        rows, cols = c.shape(q)
        out = np.zeros((rows, cols), dtype=complex)
        for i, x in enumerate(c.generators.get(q + 1, [])):
            for j, y in enumerate(c.generators.get(q, [])):
                e = c.boundary[q][i][j]
                if not e.is_zero():
                    out[i, j] = evaluate(e, s) * cmath.exp(-s * (c.heights[x] - c.heights[y]))
        mats[q] = out
    return SpecializedComplex(s, {q: list(g) for q, g in c.generators.items()}, mats, c.dim)


def numerical_rank(a: np.ndarray, rel_tol: float = 1e-8) -> int:
    if a.size == 0:
        return 0
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0:
        return 0
    thresh = rel_tol * sv[0]
    near = (sv > thresh / 10) & (sv < thresh * 10)
    if np.any(near):
        warnings.warn(f"singular values {sv[near]} within 10x of threshold {thresh:.3e}", IllConditionedRankWarning, stacklevel=2)
    return int(np.sum(sv > thresh))


def homology_ranks(sc: SpecializedComplex, rel_tol: float = 1e-8) -> tuple[int, ...]:
    """Betti_q = dim C^q - rank d^q - rank d^{q-1}."""
    ranks = {q: numerical_rank(sc.matrix(q), rel_tol) for q in range(sc.dim)}
    return tuple(
        len(sc.generators.get(q, [])) - ranks.get(q, 0) - ranks.get(q - 1, 0) for q in range(sc.dim + 1)
    )


def export_json(obj) -> str:
    if isinstance(obj, SpecializedComplex):
        data = {
            "s": [obj.s.real, obj.s.imag],
            "generators": {str(q): g for q, g in sorted(obj.generators.items())},
            "matrices": {
                str(q): [[[z.real, z.imag] for z in row] for row in obj.matrix(q)] for q in range(obj.dim)
            },
        }
    else:
        data = obj.to_dict()
    return json.dumps(data, sort_keys=True)


__all__ = [
    "BelowRhoWarning",
    "DSquaredReport",
    "IllConditionedRankWarning",
    "NovikovComplex",
    "SpecializedComplex",
    "assemble",
    "compose",
    "export_json",
    "homology_ranks",
    "numerical_rank",
    "specialize",
    "verify_d_squared",
]
