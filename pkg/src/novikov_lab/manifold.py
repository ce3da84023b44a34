"""Model systems (T^n, omega, g) with omega = sum kappa_i dtheta_i + dF.

F is a trigonometric polynomial ``sum a cos(k.theta + phi)`` and g a
constant positive-definite matrix.  The universal cover is R^n; a lifted
point differs from its box representative by ``2 pi m`` with ``m`` in Z^n,
and ``m`` projects onto the deck group through the coordinates with
nonzero period.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, DegenerateZeroError
from .ring import Lattice

TWO_PI = 2 * math.pi


@dataclass(frozen=True, eq=False)
class CriticalPoint:
    """A zero of omega with its Hessian data.

    ``unstable`` holds the ordered basis (columns) orienting the unstable
    eigenspace; ``local_scale`` is the constant c of the quadratic model.
    """

    id: int
    position: np.ndarray
    index: int
    hessian: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    local_scale: float

    @property
    def unstable(self) -> np.ndarray:
        return self.eigenvectors[:, : self.index]

    @property
    def stable(self) -> np.ndarray:
        return self.eigenvectors[:, self.index :]

    def __repr__(self):
        pos = ", ".join(f"{p:.6f}" for p in self.position)
        return f"CriticalPoint(id={self.id}, index={self.index}, position=({pos}))"


@dataclass(frozen=True, eq=False)
class LiftedCriticalPoint:
    base: CriticalPoint
    offset: tuple[int, ...]
    h_value: float

    @property
    def position(self) -> np.ndarray:
        return self.base.position + TWO_PI * np.asarray(self.offset, dtype=float)


@dataclass(frozen=True, eq=False)
class ModelManifold:
    periods: tuple[float, ...]
    terms: tuple[tuple[tuple[int, ...], float, float], ...] = ()
    metric: np.ndarray | None = None
    base_point: tuple[float, ...] | None = None
    newton_tol: float = 1e-10
    degeneracy_tol: float = 1e-8
    dedupe_tol: float = 1e-6
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        n = len(self.periods)
        if n < 1:
            raise ValueError("dimension must be at least 1")
        object.__setattr__(self, "periods", tuple(float(k) for k in self.periods))
        terms = []
        for freq, amp, phase in self.terms:
            freq = tuple(int(f) for f in freq)
            if len(freq) != n:
                raise ValueError(f"frequency {freq} does not match dimension {n}")
            terms.append((freq, float(amp), float(phase)))
        object.__setattr__(self, "terms", tuple(terms))
        g = np.eye(n) if self.metric is None else np.array(self.metric, dtype=float)
        if g.shape != (n, n) or not np.allclose(g, g.T, atol=1e-14):
            raise ValueError("metric must be a symmetric n x n matrix")
        if np.linalg.eigvalsh(g).min() <= 1e-10:
            raise ValueError("metric must be positive definite")
        g.setflags(write=False)
        object.__setattr__(self, "metric", g)
        base = (0.0,) * n if self.base_point is None else tuple(float(b) for b in self.base_point)
        object.__setattr__(self, "base_point", base)
        if self.lattice.rank >= 2:
            box = np.array(np.meshgrid(*[np.arange(-12, 13)] * self.lattice.rank)).reshape(self.lattice.rank, -1).T
            self.lattice.check_collisions(box.tolist())

    # -- structure ------------------------------------------------------
    @property
    def dim(self) -> int:
        return len(self.periods)

    @property
    def kappa(self) -> np.ndarray:
        return np.asarray(self.periods)

    @property
    def deck_axes(self) -> tuple[int, ...]:
        return tuple(i for i, k in enumerate(self.periods) if k != 0)

    @property
    def lattice(self) -> Lattice:
        return Lattice(tuple(TWO_PI * abs(self.periods[i]) for i in self.deck_axes))

    @property
    def is_exact(self) -> bool:
        return not self.deck_axes

    @property
    def metric_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.metric)

    @property
    def volume(self) -> float:
        return TWO_PI**self.dim * math.sqrt(np.linalg.det(self.metric))

    def deck_element(self, offset: Sequence[int]) -> tuple[int, ...]:
        """Deck group coordinates of the translation taking ``x + 2 pi m`` back to ``x``.

        The action of the result equals ``h(x) - h(x + 2 pi m)``.
        """
        return tuple(-int(offset[i]) * int(np.sign(self.periods[i])) for i in self.deck_axes)

    def translation_action(self, offset: Sequence[int]) -> float:
        """``h(x + 2 pi m) - h(x)``."""
        return float(TWO_PI * np.dot(self.kappa, np.asarray(offset, dtype=float)))

    # -- pointwise fields ---------------------------------------------
    def _phases(self, x):
        x = np.asarray(x, dtype=float)
        freqs = np.array([t[0] for t in self.terms], dtype=float).reshape(-1, self.dim)
        amps = np.array([t[1] for t in self.terms])
        phases = np.array([t[2] for t in self.terms])
        arg = x @ freqs.T + phases
        return freqs, amps, arg

    def F(self, x) -> np.ndarray:
        if not self.terms:
            return np.zeros(np.shape(x)[:-1])
        _, amps, arg = self._phases(x)
        return np.cos(arg) @ amps

    def omega(self, x) -> np.ndarray:
        """Components of omega at points ``x`` of shape (..., n)."""
        x = np.asarray(x, dtype=float)
        out = np.broadcast_to(self.kappa, x.shape).copy()
        if self.terms:
            freqs, amps, arg = self._phases(x)
            out -= (np.sin(arg) * amps) @ freqs
        return out

    def hessian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (self.dim,))
        if self.terms:
            freqs, amps, arg = self._phases(x)
            out -= np.einsum("...t,ti,tj->...ij", np.cos(arg) * amps, freqs, freqs)
        return out

    def laplacian_of_h(self, x) -> np.ndarray:
        """``sum g^{ij} d_i d_j h`` (the metric divergence of grad omega)."""
        return np.einsum("...ij,ij->...", self.hessian(x), self.metric_inverse)

    def omega_norm2(self, x) -> np.ndarray:
        w = self.omega(x)
        return np.einsum("...i,ij,...j->...", w, self.metric_inverse, w)

    def flow_field(self, x) -> np.ndarray:
        """X = -grad_g omega."""
        return -self.omega(x) @ self.metric_inverse

    def h_lift(self, x) -> np.ndarray:
        """Primitive on the cover, normalised to vanish at ``base_point``."""
        x = np.asarray(x, dtype=float)
        base = np.asarray(self.base_point)
        h0 = float(self.kappa @ base + self.F(base))
        return x @ self.kappa + self.F(x) - h0

    # -- critical points ------------------------------------------------
    def hessian_index(self, p) -> tuple[int, np.ndarray]:
        p = np.asarray(p, dtype=float)
        if np.linalg.norm(self.omega(p)) >= max(self.newton_tol, 1e-8):
            raise ValueError(f"omega does not vanish at {p}")
        H = self.hessian(p)
        lam = _generalized_eigvalsh(H, self.metric)
        if np.min(np.abs(lam)) < self.degeneracy_tol:
            raise DegenerateZeroError(f"degenerate zero at {p}: Hessian eigenvalues {lam}")
        return int(np.sum(lam < 0)), H

    def _critical_point(self, cid: int, p: np.ndarray) -> CriticalPoint:
        index, H = self.hessian_index(p)
        lam, vec = _generalized_eigh(H, self.metric)
        for j in range(vec.shape[1]):
            col = vec[:, j]
            lead = col[np.argmax(np.abs(col) > 1e-12)]
            if lead < 0:
                vec[:, j] = -col
        c = float(np.exp(np.mean(np.log(np.abs(lam) / 2))))
        return CriticalPoint(cid, p, index, H, lam, vec, c)

    def find_zeros(self, grid_per_axis: int = 16, max_iter: int = 60) -> list[CriticalPoint]:
        """Newton iterations on omega = 0 seeded from every grid cell."""
        key = ("zeros", grid_per_axis)
        if key in self._cache:
            return self._cache[key]
        if grid_per_axis < 8:
            raise ValueError("grid_per_axis must be at least 8")
        n = self.dim
        axis = (np.arange(grid_per_axis) + 0.5) * TWO_PI / grid_per_axis
        x = np.array(np.meshgrid(*[axis] * n, indexing="ij")).reshape(n, -1).T
        converged = np.zeros(len(x), dtype=bool)
        for _ in range(max_iter):
            w = self.omega(x)
            res = np.linalg.norm(w, axis=-1)
            converged = res < self.newton_tol
            if converged.all():
                break
            H = self.hessian(x)
            step = np.zeros_like(x)
            for i in np.flatnonzero(~converged):
                step[i] = np.linalg.lstsq(H[i], -w[i], rcond=None)[0]
            norm = np.linalg.norm(step, axis=-1, keepdims=True)
            step = np.where(norm > 0.5, step * 0.5 / np.maximum(norm, 1e-300), step)
            x = x + step
        x = np.mod(x, TWO_PI)
        found: list[np.ndarray] = []
        for p in x[converged]:
            # polish once more after wrapping
            if not any(torus_distance(p, q) < self.dedupe_tol for q in found):
                found.append(p)
        found.sort(key=lambda p: tuple(np.round(p, 9)))
        found = [np.where(np.abs(p - TWO_PI) < 1e-12, 0.0, p) for p in found]
        zeros = [self._critical_point(i, p) for i, p in enumerate(found)]
        self._cache[key] = zeros
        return zeros

    def critical_points(self) -> list[CriticalPoint]:
        return self.find_zeros()

    def by_index(self, q: int) -> list[CriticalPoint]:
        return [c for c in self.critical_points() if c.index == q]

    def section_offset(self, cp: CriticalPoint) -> tuple[int, ...]:
        """Lift chosen as the basis element for ``cp``.

        With a rank-one lattice the lift has h in ``[0, period)``; otherwise
        the box representative (offset zero) is used.
        """
        off = [0] * self.dim
        if self.lattice.rank == 1:
            i = self.deck_axes[0]
            step = TWO_PI * abs(self.periods[i])
            off[i] = -int(math.copysign(1, self.periods[i])) * int(math.floor(float(self.h_lift(cp.position)) / step))
        return tuple(off)

    def lift(self, cp: CriticalPoint, offset: Sequence[int] | None = None) -> LiftedCriticalPoint:
        if offset is None:
            offset = self.section_offset(cp)
        offset = tuple(int(o) for o in offset)
        pos = cp.position + TWO_PI * np.asarray(offset, dtype=float)
        return LiftedCriticalPoint(cp, offset, float(self.h_lift(pos)))

    # -- config ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "periods": list(self.periods),
            "metric": self.metric.tolist(),
            "terms": [[list(f), a, p] for f, a, p in self.terms],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelManifold":
        allowed = {"dim", "periods", "metric", "terms", "base_point"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown manifold keys: {sorted(unknown)}")
        if "periods" not in data:
            raise ConfigError("manifold needs 'periods'")
        periods = tuple(data["periods"])
        if "dim" in data and int(data["dim"]) != len(periods):
            raise ConfigError("dim does not match the number of periods")
        terms = tuple((tuple(f), float(a), float(p)) for f, a, p in data.get("terms", []))
        try:
            return cls(periods, terms, data.get("metric"), data.get("base_point"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def torus_distance(p, q) -> float:
    d = np.mod(np.asarray(p) - np.asarray(q) + math.pi, TWO_PI) - math.pi
    return float(np.linalg.norm(d))


def _generalized_eigh(H, G):
    from scipy.linalg import eigh

    return eigh(H, G)


def _generalized_eigvalsh(H, G):
    return _generalized_eigh(H, G)[0]


def cosine_model(kappa: Sequence[float], amplitude: float = 1.0) -> ModelManifold:
    """``sum kappa_i dtheta_i + amplitude * d(sum cos theta_i)``."""
    n = len(kappa)
    terms = tuple((tuple(int(i == j) for j in range(n)), amplitude, 0.0) for i in range(n))
    return ModelManifold(tuple(kappa), terms)


def product(m1: ModelManifold, m2: ModelManifold) -> ModelManifold:
    """Product system with the pulled-back forms and block metric."""
    n1, n2 = m1.dim, m2.dim
    terms = [(f + (0,) * n2, a, p) for f, a, p in m1.terms]
    terms += [((0,) * n1 + f, a, p) for f, a, p in m2.terms]
    g = np.zeros((n1 + n2, n1 + n2))
    g[:n1, :n1] = m1.metric
    g[n1:, n1:] = m2.metric
    return ModelManifold(m1.periods + m2.periods, tuple(terms), g)
