"""Gradient flow of X = -grad_g omega on the universal cover.

Shooting from a sphere in the unstable eigenspace, bisection on the
capture outcome to isolate connecting trajectories, and a flow-chart
estimate of the exponential-growth invariant rho.

Sign convention.  The unstable frame O_x of every zero is its ordered
generalized eigenbasis (columns of ``CriticalPoint.unstable``).  The
frame is transported along a trajectory by the variational equation;
at capture near y the tangent space of W^-(x) is spanned, to first
order, by the flow direction nu and the unstable frame O_y.  The sign
of a trajectory is the sign of the determinant of [nu, O_y] expressed
in the transported frame.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .exceptions import IntegrationFailure, NumericalInstability, TransversalityViolation
from .manifold import TWO_PI, CriticalPoint, LiftedCriticalPoint, ModelManifold
from .ring import Lattice, RingElement

CAPTURE_RADIUS = 1e-3
BISECTION_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A connecting trajectory between two lifts; ``sign`` is its orientation sign."""

    start: LiftedCriticalPoint
    end: LiftedCriticalPoint
    samples: np.ndarray
    action: float
    sign: int
    deck: tuple[int, ...]
    parameter: float = 0.0

    def check(self, m: ModelManifold, capture_radius: float = CAPTURE_RADIUS) -> None:
        h = m.h_lift(self.samples)
        if self.action <= 0:
            raise NumericalInstability(f"non-positive action {self.action}")
        if abs(self.action - (self.start.h_value - self.end.h_value)) > 1e-6:
            raise NumericalInstability("action does not match the endpoint heights")
        slack = capture_radius * (1 + 1e-6)
        if np.linalg.norm(self.samples[0] - self.start.position) > slack:
            raise NumericalInstability("first sample is not near the start")
        if np.linalg.norm(self.samples[-1] - self.end.position) > slack:
            raise NumericalInstability("last sample is not near the end")
        if np.any(np.diff(h) >= 0):
            raise NumericalInstability("h does not decrease along the trajectory")


@dataclass(eq=False)
class Shot:
    """One integration run from the unstable sphere of ``source``."""

    source: CriticalPoint
    parameter: np.ndarray
    status: str  # "captured", "h_drop" or "cap"
    target: CriticalPoint | None
    offset: tuple[int, ...] | None
    samples: np.ndarray
    frame: np.ndarray
    velocity: np.ndarray

    @property
    def outcome(self):
        if self.status != "captured":
            return (self.status,)
        return (self.target.id, self.offset)


@dataclass
class IncidenceTable:
    """Quotient incidence data: (x id, y id, deck element) -> integer count."""

    lattice: Lattice
    action_bound: float
    entries: dict = field(default_factory=dict)
    actions: dict = field(default_factory=dict)
    orientation: dict = field(default_factory=dict)
    indices: dict = field(default_factory=dict)
    mesh: dict = field(default_factory=dict)
    sources: list = field(default_factory=list)

    def add(self, traj: Trajectory) -> None:
        key = (traj.start.base.id, traj.end.base.id, traj.deck)
        self.entries[key] = self.entries.get(key, 0) + traj.sign
        self.actions.setdefault(key, traj.action)

    def pair(self, x_id: int, y_id: int) -> dict:
        return {g: c for (a, b, g), c in self.entries.items() if a == x_id and b == y_id and c != 0}

    def ring_element(self, x_id: int, y_id: int) -> RingElement:
        """I(gamma sigma x, sigma y) as an element of the Novikov ring."""
        return RingElement(self.lattice, self.pair(x_id, y_id), action_bound=self.action_bound)

    def height(self, cid: int) -> float:
        """h at the section lift sigma(cid)."""
        return self.indices[("h", cid)]

    def to_text(self) -> str:
        lines = [f"# incidence table  R={self.action_bound!r}  rank={self.lattice.rank}"]
        lines.append("# x  y  deck  count  action")
        for key in sorted(self.entries):
            x, y, g = key
            deck = ",".join(str(v) for v in g) or "-"
            lines.append(f"{x} {y} [{deck}] {self.entries[key]} {self.actions[key]:.12f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "periods": list(self.lattice.periods),
            "action_bound": self.action_bound,
            "entries": [[x, y, list(g), c, self.actions[(x, y, g)]] for (x, y, g), c in sorted(self.entries.items())],
            "orientation": {str(k): v for k, v in sorted(self.orientation.items())},
            "heights": {str(k[1]): v for k, v in sorted(self.indices.items()) if k[0] == "h"},
            "mesh": self.mesh,
            "sources": list(self.sources),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IncidenceTable":
        table = cls(Lattice(tuple(data["periods"])), float(data["action_bound"]), mesh=dict(data.get("mesh", {})))
        for x, y, g, c, act in data["entries"]:
            key = (int(x), int(y), tuple(int(v) for v in g))
            table.entries[key] = int(c)
            table.actions[key] = float(act)
        table.orientation = {int(k): v for k, v in data.get("orientation", {}).items()}
        table.indices = {("h", int(k)): float(v) for k, v in data.get("heights", {}).items()}
        table.sources = [int(v) for v in data.get("sources", [])]
        return table


def cache_key(m: ModelManifold, action_bound: float, **mesh) -> str:
    blob = json.dumps({"m": m.fingerprint(), "R": action_bound, "mesh": mesh}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- integration --------------------------------------------------------------


def _fields(m: ModelManifold):
    """Fast closures ``x -> (X, DX)`` for the flow field and its Jacobian."""
    n = m.dim
    ginv = m.metric_inverse
    freqs = np.array([t[0] for t in m.terms], dtype=float).reshape(-1, n)
    amps = np.array([t[1] for t in m.terms])
    phases = np.array([t[2] for t in m.terms])
    ga_freqs = (amps[:, None] * freqs) @ ginv
    g_freqs = freqs @ ginv
    g_kappa = ginv @ m.kappa

    def fields(x):
        arg = freqs @ x + phases
        X = np.sin(arg) @ ga_freqs - g_kappa
        # DX = -G^{-1} Hess, Hess = -sum a cos(arg) k k^T
        DX = g_freqs.T @ ((np.cos(arg) * amps)[:, None] * freqs)
        return X, DX

    return fields


def _rhs(m: ModelManifold, k: int):
    n = m.dim
    fields = _fields(m)

    def f(_, y):
        X, DX = fields(y[:n])
        out = np.empty_like(y)
        out[:n] = X
        if k:
            out[n:] = (DX @ y[n:].reshape(n, k)).ravel()
        return out

    return f


def sphere_directions(k: int, n_directions: int) -> np.ndarray:
    """Deterministic, roughly uniform points on S^{k-1} (rows)."""
    if k == 1:
        return np.array([[1.0], [-1.0]])
    if k == 2:
        a = TWO_PI * np.arange(n_directions) / n_directions
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    # Fibonacci-like lattice via quasi-random normals
    rng = np.random.default_rng(12345 + k)
    v = rng.standard_normal((n_directions, k))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _direction(k: int, param) -> np.ndarray:
    if k == 2 and np.ndim(param) == 0:
        return np.array([math.cos(param), math.sin(param)])
    return np.atleast_1d(np.asarray(param, dtype=float))


def shoot(
    m: ModelManifold,
    x: CriticalPoint,
    param,
    *,
    start_offset: Sequence[int] | None = None,
    max_h_drop: float = 10.0,
    capture_radius: float = CAPTURE_RADIUS,
    r0: float | None = None,
    capture_ids: set[int] | None = None,
    max_time: float = 400.0,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> Shot:
    """Integrate one trajectory leaving ``x`` along ``param``.

    ``param`` is an angle on the unstable circle when ind(x) = 2, or a
    vector of unstable-frame coordinates otherwise.  Only critical points
    with ids in ``capture_ids`` (default: all) terminate the run.
    """
    n, k = m.dim, x.index
    if k == 0:
        raise ValueError("minima have no unstable directions")
    if r0 is None:
        r0 = 1e-4 * min(1.0, float(np.min(np.abs(x.eigenvalues))))
    u = _direction(k, param)
    u = u / np.linalg.norm(u)
    lift = m.lift(x, start_offset)
    p0 = lift.position + r0 * (x.unstable @ u)
    y0 = np.concatenate([p0, x.unstable.ravel()])
    h_stop = lift.h_value - max_h_drop
    cps = [c for c in m.critical_points() if capture_ids is None or c.id in capture_ids]

    events = []
    for c in cps:

        def ev(_, y, c=c):
            d = np.mod(y[:n] - c.position + math.pi, TWO_PI) - math.pi
            return float(np.linalg.norm(d)) - capture_radius

        ev.terminal, ev.direction = True, -1
        events.append(ev)

    def ev_h(_, y):
        return float(m.h_lift(y[:n])) - h_stop

    ev_h.terminal, ev_h.direction = True, -1
    events.append(ev_h)

    sol = solve_ivp(_rhs(m, k), (0.0, max_time), y0, method="DOP853", rtol=rtol, atol=atol, events=events)
    if sol.status == -1:
        raise IntegrationFailure(f"integration from critical point {x.id} failed: {sol.message}")
    # a terminal event leaves the event state as the last column
    samples = sol.y[:n].T.copy()
    end = samples[-1]
    frame = sol.y[n:, -1].reshape(n, k)
    velocity = m.flow_field(end)
    status, target, offset = "cap", None, None
    hit = [i for i, e in enumerate(sol.t_events[:-1]) if len(e)]
    if hit:
        status, target = "captured", cps[hit[0]]
        offset = tuple(int(v) for v in np.round((end - target.position) / TWO_PI))
    elif len(sol.t_events[-1]):
        status = "h_drop"
    h = m.h_lift(samples)
    if np.any(np.diff(h) > 1e-13 * max(1.0, float(np.max(np.abs(h))))):
        raise NumericalInstability(f"h increased along a trajectory from critical point {x.id}")
    return Shot(x, np.asarray(param, dtype=float), status, target, offset, samples, frame, velocity)


def shoot_unstable(
    m: ModelManifold,
    x: CriticalPoint,
    n_directions: int = 16,
    max_h_drop: float = 10.0,
    **kwargs,
) -> list[Shot]:
    """Shots from ``n_directions`` points on the unstable sphere of ``x``."""
    if x.index == 0:
        return []
    if n_directions < 2 * x.index:
        raise ValueError("need at least two directions per unstable dimension")
    dirs = sphere_directions(x.index, n_directions)
    params = TWO_PI * np.arange(len(dirs)) / len(dirs) if x.index == 2 else dirs
    return [shoot(m, x, p, max_h_drop=max_h_drop, **kwargs) for p in params]


# -- connecting trajectories --------------------------------------------------


def _orientation_sign(shot: Shot, y: CriticalPoint) -> int:
    nu = shot.velocity / np.linalg.norm(shot.velocity)
    target = np.column_stack([nu, y.unstable])
    W = shot.frame
    if W.shape[0] == W.shape[1]:
        return int(np.sign(np.linalg.det(W)) * np.sign(np.linalg.det(target)))
    Q, R = np.linalg.qr(W)
    coords = np.linalg.solve(R, Q.T @ target)
    leak = np.linalg.norm(target - Q @ (Q.T @ target)) / np.linalg.norm(target)
    if leak > 0.1:
        raise TransversalityViolation(
            f"transported frame of {shot.source.id} does not span [flow, O_{y.id}] at capture (leak {leak:.2e})"
        )
    return int(np.sign(np.linalg.det(coords)))


def _trajectory(m: ModelManifold, shot: Shot, start_offset) -> Trajectory:
    y = shot.target
    start = m.lift(shot.source, start_offset)
    end = m.lift(y, shot.offset)
    rel = np.asarray(shot.offset) - np.asarray(m.section_offset(y))
    deck = m.deck_element(rel)
    param = float(shot.parameter) if shot.parameter.ndim == 0 else float(shot.parameter.ravel()[0])
    return Trajectory(start, end, shot.samples, start.h_value - end.h_value, _orientation_sign(shot, y), deck, param)


def _h_window(m: ModelManifold) -> float:
    hs = [m.lift(c).h_value for c in m.critical_points()]
    return max(hs) - min(hs) if hs else 0.0


def connecting_trajectories(
    m: ModelManifold,
    x: CriticalPoint,
    action_bound: float,
    n_directions: int = 16,
    *,
    capture_radius: float = CAPTURE_RADIUS,
    bisection_tol: float = BISECTION_TOL,
    r0: float | None = None,
) -> list[Trajectory]:
    """All trajectories from sigma(x) to lifts of index-(ind x - 1) zeros.

    Only deck elements of action at most ``action_bound`` are kept.  Index
    one sources need no search (two branches); index two sources bisect on
    the unstable circle between adjacent directions whose capture outcome
    (lower zero, lift) differs.
    """
    k = x.index
    if k == 0:
        return []
    if k > 2:
        raise NotImplementedError("connection search supports unstable dimension at most 2")
    start_offset = m.section_offset(x)
    opts = dict(
        start_offset=start_offset,
        max_h_drop=action_bound + _h_window(m) + 1.0,
        capture_radius=capture_radius,
        r0=r0,
    )
    lower = {c.id for c in m.critical_points() if c.index == k - 1}
    found: list[Trajectory] = []

    def accept(shot):
        if shot.status != "captured":
            return
        if shot.target.id not in lower:
            raise TransversalityViolation(
                f"trajectory from {x.id} captured by {shot.target.id} of index {shot.target.index}"
            )
        traj = _trajectory(m, shot, start_offset)
        if m.lattice.action(traj.deck) <= action_bound + 1e-12:
            found.append(traj)

    if k == 1:
        for p in sphere_directions(1, 2):
            accept(shoot(m, x, p, **opts))
        return found

    below = {c.id for c in m.critical_points() if c.index < k - 1}
    angles = 0.1234 + TWO_PI * np.arange(n_directions) / n_directions
    coarse = [shoot(m, x, a, capture_ids=below, **opts) for a in angles]
    for j in range(n_directions):
        lo, hi = float(angles[j]), float(angles[j]) + TWO_PI / n_directions
        o_lo, o_hi = coarse[j].outcome, coarse[(j + 1) % n_directions].outcome
        if o_lo == o_hi:
            continue
        while hi - lo > bisection_tol:
            mid = 0.5 * (lo + hi)
            o = shoot(m, x, mid, capture_ids=below, **opts).outcome
            if o == o_lo:
                lo = mid
            else:
                hi, o_hi = mid, o
        shot = shoot(m, x, 0.5 * (lo + hi), capture_ids=lower | below, **opts)
        if shot.status == "captured" and shot.target.id in lower:
            accept(shot)
        elif "h_drop" in (o_lo[0], o_hi[0]):
            continue  # boundary beyond the action window
        else:
            raise TransversalityViolation(
                f"non-isolated connection from {x.id}: bracket at angle {lo:.12f} not captured by an index-{k - 1} zero"
            )
    return found


def _aggregate(trajs) -> dict:
    out: dict = {}
    for t in trajs:
        key = (t.end.base.id, t.deck)
        out[key] = out.get(key, 0) + t.sign
    return out


def count_connecting_orbits(
    m: ModelManifold,
    x: CriticalPoint,
    y: CriticalPoint | None,
    action_bound: float,
    n_directions: int = 16,
    max_refinements: int = 3,
    **kwargs,
) -> dict:
    """Signed counts ``{deck: I}`` from sigma(x) to y (all lower zeros if ``y`` is None).

    The direction mesh is doubled until the aggregated counts agree on two
    consecutive meshes; with ``y`` None the result is keyed by (y id, deck).
    """
    if y is not None and x.index != y.index + 1:
        raise ValueError("count_connecting_orbits needs ind(x) = ind(y) + 1")
    prev = None
    for _ in range(max_refinements + 1):
        trajs = connecting_trajectories(m, x, action_bound, n_directions, **kwargs)
        counts = _aggregate(trajs)
        if x.index < 2 or counts == prev:
            break
        prev, n_directions = counts, 2 * n_directions
    else:
        raise TransversalityViolation(f"counts from {x.id} do not stabilize under mesh refinement")
    if y is None:
        return counts
    return {g: c for (yid, g), c in counts.items() if yid == y.id}


def incidence_table(
    m: ModelManifold,
    action_bound: float,
    n_directions: int = 16,
    max_refinements: int = 3,
    **kwargs,
) -> IncidenceTable:
    """Incidence numbers for every adjacent-index pair of zeros."""
    table = IncidenceTable(m.lattice, float(action_bound), mesh={"n_directions": n_directions, **kwargs})
    for c in m.critical_points():
        table.orientation[c.id] = c.unstable.T.tolist()
        table.indices[("h", c.id)] = m.lift(c).h_value
    for x in m.critical_points():
        if x.index == 0:
            continue
        counts = count_connecting_orbits(m, x, None, action_bound, n_directions, max_refinements, **kwargs)
        table.sources.append(x.id)
        for (yid, g), c in sorted(counts.items()):
            key = (x.id, yid, g)
            table.entries[key] = c
            lift_y = m.lift(m.critical_points()[yid])
            table.actions[key] = m.lift(x).h_value - lift_y.h_value + m.lattice.action(g)
    return table


# -- rho ----------------------------------------------------------------------


@dataclass
class RhoEstimate:
    """Partial integrals ``integrals[a][j]`` over flow-time radius ``radii[j]``."""

    critical_point: int
    a_grid: tuple[float, ...]
    radii: tuple[float, ...]
    integrals: dict
    stabilized: dict
    rho: float

    def to_dict(self) -> dict:
        return {
            "critical_point": self.critical_point,
            "a_grid": list(self.a_grid),
            "radii": list(self.radii),
            "integrals": {repr(a): list(v) for a, v in self.integrals.items()},
            "stabilized": {repr(a): bool(v) for a, v in self.stabilized.items()},
            "rho": self.rho,
        }


def _sphere_chart(k: int, n_directions: int):
    """Points, unit tangent frames and quadrature weights on S^{k-1}."""
    if k == 1:
        return np.array([[1.0], [-1.0]]), np.zeros((2, 1, 0)), np.ones(2)
    if k == 2:
        a = TWO_PI * (np.arange(n_directions) + 0.5) / n_directions
        pts = np.stack([np.cos(a), np.sin(a)], axis=1)
        tan = np.stack([-np.sin(a), np.cos(a)], axis=1)[:, :, None]
        return pts, tan, np.full(n_directions, TWO_PI / n_directions)
    pts = sphere_directions(k, n_directions)
    tans = []
    for u in pts:
        q, _ = np.linalg.qr(np.column_stack([u, np.eye(k)]))
        tans.append(q[:, 1:k])
    area = 2 * math.pi ** (k / 2) / math.gamma(k / 2)
    return pts, np.array(tans), np.full(len(pts), area / len(pts))


def stabilized(values: Sequence[float], rel_tol: float = 5e-3, run: int = 3) -> bool:
    """True when ``run`` consecutive radii each change the value by < ``rel_tol``."""
    v = np.asarray(values, dtype=float)
    if len(v) < run + 1 or not np.all(np.isfinite(v)):
        return False
    change = np.abs(np.diff(v[-run - 1 :])) / np.maximum(np.abs(v[-run:]), 1e-300)
    return bool(np.all(change < rel_tol))


def estimate_rho(
    m: ModelManifold,
    x: CriticalPoint,
    a_grid: Sequence[float] = (0.0, 0.1, 0.2, 0.5, 1.0),
    radius_grid: Sequence[float] | None = None,
    n_directions: int = 64,
    r0: float = 1e-4,
    rtol: float = 1e-8,
) -> RhoEstimate:
    """Exhaust W^-(x) by flow time and integrate e^{a h^x} against its volume.

    W^-(x) is charted by (direction u on the unit sphere, flow time tau)
    starting from an ellipsoid in the unstable eigenspace (semi-axis r0
    along the fastest direction); the induced
    volume is sqrt(det J^T G J) with J = [X, transported tangent vectors].
    The enclosed ellipsoid contributes its flat volume.  rho-hat is the least
    a in the grid whose partial integrals stabilize.  The default radii
    are flow times 4, 8, ..., 40 in units of the slowest Hessian rate.
    """
    k, n = x.index, m.dim
    if k == 0:
        raise ValueError("estimate_rho needs ind(x) >= 1")
    a = np.asarray(a_grid, dtype=float)
    if radius_grid is None:
        rate = min(float(np.min(np.abs(c.eigenvalues))) for c in m.critical_points())
        radius_grid = np.arange(4, 44, 4) / min(rate, 1.0)
    radii = np.sort(np.asarray(radius_grid, dtype=float))
    fields = _fields(m)
    G = m.metric
    O = x.unstable
    h0 = float(m.h_lift(x.position))
    # ellipsoidal start: unequal rates reach unit size together under the linear flow
    lam = np.abs(x.eigenvalues[:k])
    radii0 = r0 ** (lam / lam.max())
    O = O * radii0
    pts, tans, weights = _sphere_chart(k, n_directions)
    na = len(a)

    def rhs(_, y):
        p = y[:n]
        V = y[n : n + n * (k - 1)].reshape(n, k - 1)
        X, DX = fields(p)
        J = np.column_stack([X, V])
        vol = math.sqrt(max(np.linalg.det(J.T @ G @ J), 0.0))
        hx = float(m.h_lift(p)) - h0
        out = np.empty_like(y)
        out[:n] = X
        out[n : n + n * (k - 1)] = (DX @ V).ravel()
        out[n + n * (k - 1) :] = np.exp(a * hx) * vol
        return out

    total = np.zeros((na, len(radii)))
    for u, t, w in zip(pts, tans, weights):
        p0 = x.position + O @ u
        V0 = O @ t
        y0 = np.concatenate([p0, V0.ravel(), np.zeros(na)])
        sol = solve_ivp(rhs, (0.0, radii[-1]), y0, method="DOP853", rtol=rtol, atol=1e-12, t_eval=radii)
        if sol.status != 0:
            raise IntegrationFailure(f"rho chart integration from {x.id} failed: {sol.message}")
        total += w * sol.y[n + n * (k - 1) :]
    disc = math.pi ** (k / 2) / math.gamma(k / 2 + 1) * math.sqrt(np.linalg.det(O.T @ G @ O))
    total += disc
    if np.any(np.diff(total, axis=1) < -1e-6 * np.abs(total[:, 1:])):
        raise NumericalInstability(f"exhaustion integrals from {x.id} are not monotone")
    integrals = {float(ai): tuple(float(v) for v in row) for ai, row in zip(a, total)}
    stab = {ai: stabilized(v) for ai, v in integrals.items()}
    good = [ai for ai, ok in stab.items() if ok and ai >= 0]
    return RhoEstimate(x.id, tuple(float(v) for v in a), tuple(float(r) for r in radii), integrals, stab, min(good) if good else math.inf)


def estimate_rho_all(m: ModelManifold, **kwargs) -> tuple[float, list[RhoEstimate]]:
    """rho-hat of the pair: the largest per-zero estimate over ind >= 1."""
    ests = [estimate_rho(m, x, **kwargs) for x in m.critical_points() if x.index >= 1]
    return (max(e.rho for e in ests) if ests else 0.0), ests
