"""Integration over unstable manifolds and the spectral side of the bridge.

``Int_s(alpha)(x) = int_{W^-_x} e^{s h^x} alpha`` with ``h^x = h - h(x)`` on
the lifted unstable manifold, oriented by the unstable frame of ``x``.
Three chart types cover dimension <= 2 completely:

* index 0  -- a point, the integral is evaluation;
* index 1  -- two flow branches, integrated in flow time with
  Gauss-Legendre nodes on the solver's own steps;
* index n  -- the unstable manifold is open and dense; every node of a
  quadrature grid is flowed *up* until it is captured by a lift of ``x``,
  which fixes the branch of h^x at that node.

Grid forms are pulled back by trigonometric interpolation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import sqrtm

from .complex import BelowRhoWarning, NovikovComplex, specialize
from .exceptions import BasisError, ChainMapError, ExhaustionError, GapError, IntegrationFailure, LeakageError
from .manifold import TWO_PI, CriticalPoint, ModelManifold
from .ring import fit_integer_coefficients
from .spectral import FormField, build_d_t, build_delta_t, build_quasimode, inner, min_separation, norm, spectrum

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


# -- trigonometric interpolation ------------------------------------------------


class Interpolant:
    """Band-limited extension of grid forms to arbitrary points.

    The Nyquist coefficient is dropped, matching the projection used by the
    discrete operators.
    """

    def __init__(self, forms):
        forms = list(forms)
        if not forms:
            raise ValueError("need at least one form")
        n, N = forms[0].n, forms[0].N
        if any(f.n != n or f.N != N or f.degree != forms[0].degree for f in forms):
            raise ValueError("forms must share dimension, grid and degree")
        axes = tuple(range(2, 2 + n))
        c = np.fft.fftn(np.stack([f.components for f in forms]), axes=axes) / N**n
        if N % 2 == 0:
            for ax in axes:
                idx = [slice(None)] * c.ndim
                idx[ax] = N // 2
                c[tuple(idx)] = 0
        self.n, self.N, self.degree = n, N, forms[0].degree
        self.coef = c
        self.k = np.fft.fftfreq(N, 1.0 / N)

    def __call__(self, points) -> np.ndarray:
        """Values at ``points`` (P, n): array (forms, components, P)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        out = self.coef
        # contract the last grid axis first, keeping a running point axis
        E = np.exp(1j * p[:, -1, None] * self.k[None, :])
        out = out @ E.T
        for ax in range(self.n - 2, -1, -1):
            E = np.exp(1j * p[:, ax, None] * self.k[None, :])
            out = np.einsum("...ap,pa->...p", out, E)
        return out.real

    def upsample(self, M: int, shift: float = 0.0) -> np.ndarray:
        """Values on the grid ``(j + shift) 2pi/M`` (M a multiple of N): (forms, components, M, ...)."""
        if M % self.N:
            raise ValueError("target grid must be a multiple of the form grid")
        shape = self.coef.shape[:2] + (M,) * self.n
        big = np.zeros(shape, dtype=complex)
        idx = [np.r_[0 : (self.N + 1) // 2, M - self.N // 2 : M] for _ in range(self.n)]
        src = [np.r_[0 : (self.N + 1) // 2, self.N - self.N // 2 : self.N] for _ in range(self.n)]
        big[np.ix_(range(shape[0]), range(shape[1]), *idx)] = self.coef[np.ix_(range(shape[0]), range(shape[1]), *src)]
        if shift:
            kk = np.fft.fftfreq(M, 1.0 / M)
            phase = np.exp(1j * kk * shift * TWO_PI / M)
            for ax in range(self.n):
                big = big * phase.reshape((M,) + (1,) * (self.n - 1 - ax))
        return np.fft.ifftn(big * M**self.n, axes=tuple(range(2, 2 + self.n))).real


# -- charts -------------------------------------------------------------------------


@dataclass
class Branch:
    sign: int  # +1 when the branch leaves x along +e (the chart orientation)
    t_nodes: np.ndarray  # solver step boundaries
    dense: object  # dense output of the branch
    target: int | None
    end: np.ndarray  # lifted end point (position of the captured zero's lift)
    h_end: float  # h^x at the captured zero


@dataclass
class UnstableChart:
    """Parameterization of W^-_x used for quadrature."""

    x: CriticalPoint
    kind: str  # "point" | "curve" | "basin"
    orientation: int = 1
    branches: list = field(default_factory=list)
    r0: float = 0.0
    capture_radius: float = 0.0
    h_values: np.ndarray | None = None  # h^x at the uniform basin nodes, nan where replaced
    cell: float = 0.0
    grid_size: int = 0
    extra_points: np.ndarray | None = None  # refined nodes near the basin's internal boundaries
    extra_h: np.ndarray | None = None
    extra_weights: np.ndarray | None = None
    stuck_points: np.ndarray | None = None  # finest cells never captured, with h upper bounds
    stuck_h: np.ndarray | None = None
    stuck_weights: np.ndarray | None = None

    @property
    def uncaptured(self) -> int:
        return 0 if self.stuck_points is None else len(self.stuck_points)

    @property
    def exhaustion(self) -> float:
        """Lowest value of h^x reached by the chart."""
        if self.kind == "point":
            return 0.0
        if self.kind == "curve":
            return min(b.h_end for b in self.branches)
        return float(min(np.nanmin(self.h_values), np.min(self.extra_h, initial=np.inf)))


@dataclass(frozen=True)
class Integral:
    value: complex
    tail: float  # bound on the neglected part
    magnitude: float  # integral of |e^{s h} alpha|, the natural scale


def _curve_branch(m: ModelManifold, x: CriticalPoint, sign: int, r0: float, capture_radius: float, max_time: float):
    n = m.dim
    e = x.unstable[:, 0]
    others = [c for c in m.critical_points() if c.index < x.index]

    def rhs(_, y):
        return m.flow_field(y)

    events = []
    for c in others:

        def ev(_, y, c=c):
            d = np.mod(y - c.position + math.pi, TWO_PI) - math.pi
            return float(np.linalg.norm(d)) - capture_radius

        ev.terminal, ev.direction = True, -1
        events.append(ev)
    y0 = x.position + sign * r0 * e
    sol = solve_ivp(rhs, (0.0, max_time), y0, method="DOP853", rtol=1e-11, atol=1e-13, events=events, dense_output=True)
    if sol.status == -1:
        raise IntegrationFailure(f"unstable branch of {x.id} failed: {sol.message}")
    hit = [i for i, ev in enumerate(sol.t_events) if len(ev)]
    h0 = float(m.h_lift(x.position))
    last = sol.y[:n, -1]
    if not hit:
        return Branch(sign, sol.t, sol.sol, None, last, float(m.h_lift(last)) - h0)
    c = others[hit[0]]
    d = np.mod(last - c.position + math.pi, TWO_PI) - math.pi
    end = last - d
    return Branch(sign, sol.t, sol.sol, c.id, end, float(m.h_lift(end)) - h0)


def _flow_up(m: ModelManifold, x: CriticalPoint, pts: np.ndarray, max_time: float, capture_radius: float):
    """Ascend from ``pts`` until a lift of x captures each point.

    Returns h^x (nan if uncaptured), an integer label of the capturing
    lift (-1 if uncaptured) and an upper bound for h^x at uncaptured points.
    """
    n = m.dim
    ginv = m.metric_inverse
    dt = min(0.2, 0.5 / float(np.max(np.abs(x.eigenvalues))))

    def up(z):
        return m.omega(z) @ ginv

    y = pts.copy()
    active = np.ones(len(y), dtype=bool)
    captured = np.zeros(len(y), dtype=bool)
    elsewhere = np.zeros(len(y), dtype=bool)  # captured by another top-index zero
    rivals = [c.position for c in m.by_index(n) if c is not x]
    lift = np.zeros_like(y)
    t = 0.0
    while t < max_time and active.any():
        z = y[active]
        for _ in range(10):
            k1 = up(z)
            k2 = up(z + 0.5 * dt * k1)
            k3 = up(z + 0.5 * dt * k2)
            k4 = up(z + dt * k3)
            z = z + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        t += 10 * dt
        y[active] = z
        d = np.mod(z - x.position + math.pi, TWO_PI) - math.pi
        done = np.linalg.norm(d, axis=1) < capture_radius
        idx = np.flatnonzero(active)
        captured[idx[done]] = True
        lift[idx[done]] = z[done] - d[done]
        gone = np.zeros(len(z), dtype=bool)
        for r in rivals:
            gone |= np.linalg.norm(np.mod(z - r + math.pi, TWO_PI) - math.pi, axis=1) < capture_radius
        elsewhere[idx[gone & ~done]] = True
        active[idx[done | gone]] = False
    h = np.full(len(pts), np.nan)
    h[captured] = m.h_lift(pts[captured]) - m.h_lift(lift[captured])
    # lifts are told apart only along deck axes: elsewhere h^x is single-valued
    off = np.round((lift - x.position) / TWO_PI).astype(np.int64)
    off[:, [i for i in range(n) if i not in m.deck_axes]] = 0
    label = np.where(captured, (off + 1000) @ (2000 ** np.arange(n)), -1)
    label[elsewhere] = -2
    # an uncaptured point sits below where its ascent stopped
    bound = np.where(label == -1, m.h_lift(pts) - m.h_lift(y), np.nan)
    return h, label, bound


def _corner_offsets(n: int) -> np.ndarray:
    return np.array(np.meshgrid(*([[-0.5, 0.5]] * n), indexing="ij")).reshape(n, -1).T


def _refine(m, x, centers, size, levels, r, max_time, cap):
    """Midpoint rule on r^n subcells, recursing where corner labels disagree."""
    n = m.dim
    sub = (np.array(np.meshgrid(*([np.arange(r) + 0.5] * n), indexing="ij")).reshape(n, -1).T / r - 0.5) * size
    pts = (centers[:, None, :] + sub[None, :, :]).reshape(-1, n)
    h_sub = size / r
    h, label, bound = _flow_up(m, x, pts, max_time, cap)
    w = np.full(len(pts), h_sub**n)
    if levels <= 1:
        ok, stuck = label >= 0, label == -1
        return (pts[ok], h[ok], w[ok]), (pts[stuck], bound[stuck], w[stuck])
    # probes nudged off the grid so they do not sit on symmetric stable manifolds
    nudge = 1e-6 * h_sub * np.sqrt(np.arange(2, n + 2))
    corners = (pts[:, None, :] + _corner_offsets(n)[None] * h_sub + nudge).reshape(-1, n)
    _, clab, _ = _flow_up(m, x, corners, max_time, cap)
    clab = clab.reshape(len(pts), -1)
    mixed = (label == -1) | np.any(clab != label[:, None], axis=1)
    keep = ~mixed & (label >= 0)
    (p2, hh2, w2), stuck = _refine(m, x, pts[mixed], h_sub, levels - 1, r, max_time, cap) if mixed.any() else (
        (np.zeros((0, n)), np.zeros(0), np.zeros(0)),
        (np.zeros((0, n)), np.zeros(0), np.zeros(0)),
    )
    return (np.concatenate([pts[keep], p2]), np.concatenate([h[keep], hh2]), np.concatenate([w[keep], w2])), stuck


def _basin(m: ModelManifold, x: CriticalPoint, M: int, max_time: float, capture_radius: float, levels: int, r: int):
    """Uniform midpoint grid, refined adaptively across jumps of h^x."""
    n = m.dim
    # half-cell offset keeps nodes off the symmetric stable manifolds of the examples
    axes = np.meshgrid(*([TWO_PI * (np.arange(M) + 0.5) / M] * n), indexing="ij")
    pts = np.stack([a.ravel() for a in axes], axis=1)
    h, label, _ = _flow_up(m, x, pts, max_time, capture_radius)
    lab = label.reshape((M,) * n)
    mixed = lab == -1
    for ax in range(n):
        for sh in (1, -1):
            mixed |= np.roll(lab, sh, axis=ax) != lab
    mixed = mixed.ravel()
    empty = (np.zeros((0, n)), np.zeros(0), np.zeros(0))
    if mixed.any() and levels > 0:
        extra, stuck = _refine(m, x, pts[mixed], TWO_PI / M, levels, r, max_time, capture_radius)
    else:
        extra, stuck = empty, empty
        bad = label == -1
        stuck = (pts[bad], np.zeros(int(bad.sum())), np.full(int(bad.sum()), (TWO_PI / M) ** n))
    mixed = mixed | (label == -2)
    h = h.copy()
    h[mixed] = np.nan
    return h, extra, stuck


def build_chart(
    m: ModelManifold,
    x: CriticalPoint,
    *,
    grid_size: int = 96,
    levels: int = 3,
    refine: int = 4,
    r0: float = 1e-7,
    capture_radius: float = 1e-6,
    max_time: float = 800.0,
    basin_time: float = 150.0,
) -> UnstableChart:
    """Chart of W^-_x for indices 0, 1 and n."""
    k, n = x.index, m.dim
    if k == 0:
        return UnstableChart(x, "point")
    if k == n:
        orient = int(np.sign(np.linalg.det(x.unstable)))
        h, extra, stuck = _basin(m, x, grid_size, basin_time, 1e-2 * min(1.0, x.local_scale), levels, refine)
        return UnstableChart(
            x, "basin", orient, h_values=h, cell=(TWO_PI / grid_size) ** n, grid_size=grid_size,
            extra_points=extra[0], extra_h=extra[1], extra_weights=extra[2],
            stuck_points=stuck[0], stuck_h=stuck[1], stuck_weights=stuck[2],
        )
    if k == 1:
        branches = [_curve_branch(m, x, s, r0, capture_radius, max_time) for s in (1, -1)]
        return UnstableChart(x, "curve", 1, branches, r0=r0, capture_radius=capture_radius)
    raise NotImplementedError(f"unstable charts of index {k} in dimension {n} are not implemented")


def _flow_nodes(branch: Branch, subdiv: int = 2):
    t = branch.t_nodes
    a = np.repeat(t[:-1], subdiv) + np.tile(np.arange(subdiv), len(t) - 1) * np.repeat(np.diff(t), subdiv) / subdiv
    hstep = np.repeat(np.diff(t), subdiv) / subdiv
    nodes = (a[:, None] + 0.5 * hstep[:, None] * (_GL_NODES[None, :] + 1)).ravel()
    weights = (0.5 * hstep[:, None] * _GL_WEIGHTS[None, :]).ravel()
    return nodes, weights


def _integrate_curve(m, chart: UnstableChart, interp: Interpolant, s: complex):
    x = chart.x
    h0 = float(m.h_lift(x.position))
    e = x.unstable[:, 0]
    val = np.zeros(interp.coef.shape[0], dtype=complex)
    mag = np.zeros(interp.coef.shape[0])
    tail = np.zeros(interp.coef.shape[0])
    a_x = interp(x.position[None, :])[:, :, 0]
    sup = np.max(np.abs(interp.coef).sum(axis=tuple(range(2, interp.coef.ndim))), axis=1)
    for b in chart.branches:
        # short segment x -> x + sign r0 e, then the flow
        seg = chart.r0 * (a_x @ (b.sign * e))
        nodes, w = _flow_nodes(b)
        pos = b.dense(nodes).T
        vel = m.flow_field(pos)
        alpha = interp(pos)  # (K, n, P)
        pair = np.einsum("kip,pi->kp", alpha, vel)
        weight = np.exp(s * (m.h_lift(pos) - h0))
        contrib = seg + (pair * weight) @ w
        absc = abs(seg) + (np.abs(pair * weight)) @ w
        if b.target is not None:
            last = b.dense(b.t_nodes[-1])
            mid = 0.5 * (last + b.end)
            step = b.end - last
            wmid = np.exp(s * (m.h_lift(mid) - h0))
            contrib = contrib + wmid * (interp(mid[None, :])[:, :, 0] @ step)
            tail += sup * abs(np.exp(s * b.h_end)) * chart.capture_radius**2
        else:
            # heuristic: the unexplored remainder is charged one circuit of the torus
            tail += sup * abs(np.exp(s * b.h_end)) * TWO_PI * math.sqrt(m.dim)
        # orientation: +branch runs along the chart orientation, -branch against it
        val += b.sign * contrib
        mag += absc
    return val, tail, mag


def _integrate_basin(m, chart: UnstableChart, forms, interp: Interpolant, s: complex):
    M = chart.grid_size
    if interp.n != m.dim or interp.degree != m.dim:
        raise ValueError("basin charts integrate top-degree forms")
    if M % interp.N == 0:
        vals = interp.upsample(M, 0.5)[:, 0].reshape(len(forms), -1)
    else:
        axes = np.meshgrid(*([TWO_PI * (np.arange(M) + 0.5) / M] * m.dim), indexing="ij")
        vals = interp(np.stack([a.ravel() for a in axes], axis=1))[:, 0]
    ok = ~np.isnan(chart.h_values)
    weight = np.zeros(len(chart.h_values), dtype=complex)
    weight[ok] = np.exp(s * chart.h_values[ok]) * chart.cell
    val = vals @ weight
    mag = np.abs(vals) @ np.abs(weight)
    if len(chart.extra_points):
        ev = interp(chart.extra_points)[:, 0]
        we = np.exp(s * chart.extra_h) * chart.extra_weights
        val = val + ev @ we
        mag = mag + np.abs(ev) @ np.abs(we)
    tail = np.zeros(len(forms))
    if chart.uncaptured:
        ev = interp(chart.stuck_points)[:, 0]
        tail = np.abs(ev) @ (np.exp(s.real * chart.stuck_h) * chart.stuck_weights)
    return chart.orientation * val, tail, mag


def int_s_batch(
    m: ModelManifold,
    forms,
    x: CriticalPoint,
    s: complex,
    chart: UnstableChart | None = None,
    *,
    rho_hat: float | None = None,
    tail_tol: float = 1e-6,
) -> list[Integral]:
    """``Int_s`` of several forms of degree ind(x) at the same critical point."""
    forms = list(forms)
    s = complex(s)
    if rho_hat is not None and s.real <= rho_hat:
        warnings.warn(f"Re(s)={s.real} is not above rho-hat={rho_hat}", BelowRhoWarning, stacklevel=2)
    if any(f.degree != x.index for f in forms):
        raise ValueError(f"Int_s at a zero of index {x.index} needs forms of that degree")
    chart = chart or build_chart(m, x)
    if chart.kind == "point":
        vals = Interpolant(forms)(x.position[None, :])[:, 0, 0]
        return [Integral(complex(v), 0.0, abs(v)) for v in vals]
    interp = Interpolant(forms)
    if chart.kind == "curve":
        val, tail, mag = _integrate_curve(m, chart, interp, s)
    else:
        val, tail, mag = _integrate_basin(m, chart, forms, interp, s)
    worst = float(np.max(tail))
    if worst > tail_tol:
        raise ExhaustionError(f"tail bound {worst:.2e} at critical point {x.id} exceeds {tail_tol:.1e}")
    return [Integral(complex(v), float(t), float(a)) for v, t, a in zip(val, tail, mag)]


def int_s(m: ModelManifold, alpha: FormField, x: CriticalPoint, s: complex, chart: UnstableChart | None = None, **kw) -> Integral:
    """``int_{W^-_x} e^{s h^x} alpha`` with a tail bound."""
    return int_s_batch(m, [alpha], x, s, chart, **kw)[0]


def build_charts(m: ModelManifold, **kw) -> dict:
    return {c.id: build_chart(m, c, **kw) for c in m.critical_points()}


def int_vector(m: ModelManifold, forms, q: int, s: complex, charts: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Matrix ``[x, j] = Int_s(forms[j])(x)`` over Cr_q, plus tails and magnitudes."""
    cps = m.by_index(q)
    vals = np.zeros((len(cps), len(forms)), dtype=complex)
    tails = np.zeros(vals.shape)
    mags = np.zeros(vals.shape)
    for i, c in enumerate(cps):
        for j, r in enumerate(int_s_batch(m, forms, c, s, charts.get(c.id))):
            vals[i, j], tails[i, j], mags[i, j] = r.value, r.tail, r.magnitude
    return vals, tails, mags


# -- chain map ---------------------------------------------------------------------


@dataclass
class ChainMapReport:
    s: complex
    max_residual: float
    residuals: dict  # (form index, x id) -> relative residual
    lhs: dict
    rhs: dict

    @property
    def passed(self) -> bool:
        return self.max_residual < 1e-3


def verify_chain_map(
    alphas,
    s: float,
    m: ModelManifold,
    complex_: NovikovComplex,
    charts: dict | None = None,
    *,
    tol: float = 1e-3,
    strict: bool = True,
) -> ChainMapReport:
    """Compare ``Int_s(d_s alpha)(x)`` with ``sum_y C_s(x, y) Int_s(alpha)(y)``.

    ``C_s`` is the specialization of the assembled complex.  The residual
    at x is relative to the larger of the two sides' absolute integrals,
    so that cancelling contributions are measured against their size.
    """
    alphas = list(alphas)
    if isinstance(s, complex) and s.imag:
        raise ValueError("the discrete d_s is implemented for real s")
    s = float(np.real(s))
    charts = charts if charts is not None else build_charts(m)
    sc = specialize(complex_, s)
    residuals, lhs_all, rhs_all = {}, {}, {}
    by_degree: dict = {}
    for j, a in enumerate(alphas):
        by_degree.setdefault(a.degree, []).append(j)
    for q, idx in sorted(by_degree.items()):
        if q >= m.dim or not m.by_index(q + 1):
            continue
        forms = [alphas[j] for j in idx]
        d = build_d_t(m, q, s, forms[0].N)
        dforms = [d(f) for f in forms]
        L, _, Lmag = int_vector(m, dforms, q + 1, s, charts)
        A, _, Amag = int_vector(m, forms, q, s, charts)
        C = sc.matrix(q)
        R = C @ A if A.size else np.zeros_like(L)
        Rmag = np.abs(C) @ Amag if A.size else np.zeros(L.shape)
        for i, x in enumerate(m.by_index(q + 1)):
            for jj, j in enumerate(idx):
                scale = max(Lmag[i, jj], Rmag[i, jj], 1e-300)
                residuals[(j, x.id)] = float(abs(L[i, jj] - R[i, jj]) / scale)
                lhs_all[(j, x.id)] = complex(L[i, jj])
                rhs_all[(j, x.id)] = complex(R[i, jj])
    worst = max(residuals.values(), default=0.0)
    rep = ChainMapReport(s, worst, residuals, lhs_all, rhs_all)
    if strict and worst > tol:
        bad = {k: v for k, v in residuals.items() if v > tol}
        raise ChainMapError(f"chain-map residual {worst:.2e} exceeds {tol:.1e}", breakdown=bad)
    return rep


# -- small complex basis and recovery ---------------------------------------------


@dataclass
class SmallComplexBasis:
    t: float
    N: int
    generators: dict  # q -> ids
    eigenvalues: dict  # q -> array
    eigenforms: dict  # q -> list[FormField] (orthonormal)
    int_matrix: dict  # q -> M[x, j] = Int_t(eigenform_j)(x)
    condition: dict
    basis: dict  # q -> list[FormField] E_{t,x}
    reproduction: float  # max |Int_t(E_y)(x) - delta|
    quasimode_deviation: dict = field(default_factory=dict)  # q -> |Int_t R - id| after normalization
    charts: dict = field(default_factory=dict, repr=False)

    @property
    def empty(self) -> bool:
        return not any(self.generators.values())


def build_small_basis(
    m: ModelManifold,
    t: float,
    N: int = 48,
    *,
    threshold: float = 1.0,
    n_extra: int = 2,
    max_condition: float = 1e6,
    eta: float | None = None,
    charts: dict | None = None,
    quasimodes: bool = True,
) -> SmallComplexBasis:
    """Eigenforms below ``threshold``, their integrals and E_{t,x} = Int_t^{-1}(delta_x)."""
    charts = charts if charts is not None else build_charts(m)
    gens, vals, forms, mats, conds, basis, qdev = {}, {}, {}, {}, {}, {}, {}
    worst = 0.0
    for q in range(m.dim + 1):
        cps = m.by_index(q)
        gens[q] = [c.id for c in cps]
        if not cps:
            vals[q], forms[q], basis[q] = np.zeros(0), [], []
            continue
        res = spectrum(build_delta_t(m, q, t, N), len(cps) + n_extra, return_forms=True)
        small = int(np.sum(res.values < threshold))
        if small != len(cps):
            raise GapError(f"degree {q} at t={t}: {small} eigenvalues below {threshold}, expected {len(cps)}", spectrum=res)
        vals[q] = res.values[:small]
        forms[q] = res.forms[:small]
        M, _, _ = int_vector(m, forms[q], q, t, charts)
        M = M.real
        cond = float(np.linalg.cond(M))
        if not np.isfinite(cond) or cond > max_condition:
            raise BasisError(f"Int_t matrix in degree {q} at t={t} has condition {cond:.3g}")
        mats[q], conds[q] = M, cond
        Minv = np.linalg.inv(M)
        basis[q] = [_combine(forms[q], Minv[:, i]) for i in range(len(cps))]
        worst = max(worst, float(np.max(np.abs(M @ Minv - np.eye(len(cps))))))
        if quasimodes:
            qdev[q] = _quasimode_deviation(m, q, t, N, eta, forms[q], M, charts)
    return SmallComplexBasis(t, N, gens, vals, forms, mats, conds, basis, worst, qdev, charts)


def _combine(forms, coeffs) -> FormField:
    comp = sum(c * f.components for c, f in zip(coeffs, forms))
    return FormField(forms[0].degree, np.asarray(comp))


def _quasimode_deviation(m, q, t, N, eta, eig, M, charts) -> float:
    """|diag(Int_t J)^{-1} Int_t R - id| for the symmetric orthonormalization R of projected quasimodes."""
    cps = m.by_index(q)
    if eta is None:
        eta = 0.45 * min(min_separation(m), TWO_PI) / max(float(np.linalg.norm(c.eigenvectors, 2)) for c in m.critical_points())
    J = [build_quasimode(m, y, t, eta, N, degree=q) for y in cps]
    A = np.array([[inner(m, v, j).real for j in J] for v in eig])  # (small, Cr_q)
    S = A.T @ A
    R = A @ np.linalg.inv(np.real(sqrtm(S)))
    IntR = M @ R
    own = np.array([int_s(m, j, y, t, charts.get(y.id)).value.real for j, y in zip(J, cps)])
    return float(np.max(np.abs(IntR / own[:, None] - np.eye(len(cps)))))


@dataclass
class Recovery:
    t: float
    matrices: dict  # q -> I_{q+1,t} (Cr_{q+1} x Cr_q)
    leakage: dict  # q -> max relative residual outside the small subspace
    oracle: dict = field(default_factory=dict)  # q -> specialized trajectory matrix
    relative_error: dict = field(default_factory=dict)  # (q, x, y) -> relative error (or None)


def recover_incidence(
    m: ModelManifold,
    basis: SmallComplexBasis,
    complex_: NovikovComplex | None = None,
    *,
    leakage_tol: float = 1e-4,
    leakage_floor: float = 1e-8,
    zero_tol: float = 0.05,
) -> Recovery:
    """Expand ``d_t E_{t,y}`` in the basis ``E_{t,x}``.

    With the eigenforms u_k of degree q+1, ``D[k, j] = <u_k, d_t v_j>`` and
    ``I_{q+1,t} = M_{q+1} D M_q^{-1}``.  When a complex is given its
    specialization at s = t is recorded as the oracle; entries where the
    oracle vanishes are compared against ``zero_tol`` times the largest
    entry of that matrix.
    """
    t = basis.t
    mats, leak, oracle, rel = {}, {}, {}, {}
    sc = specialize(complex_, t) if complex_ is not None else None
    for q in range(m.dim):
        rows, cols = basis.generators.get(q + 1, []), basis.generators.get(q, [])
        if not rows or not cols:
            continue
        d = build_d_t(m, q, t, basis.N)
        u, v = basis.eigenforms[q + 1], basis.eigenforms[q]
        D = np.zeros((len(u), len(v)))
        worst = 0.0
        for j, vj in enumerate(v):
            dv = d(vj)
            D[:, j] = [inner(m, uk, dv).real for uk in u]
            rest = dv - _combine(u, D[:, j])
            # eigenforms have unit norm; below the floor d_t v is round-off
            worst = max(worst, norm(m, rest) / max(norm(m, dv), leakage_floor))
        if worst > leakage_tol:
            raise LeakageError(f"d_t of small eigenforms leaves the small subspace (relative {worst:.2e}) at t={t}")
        leak[q] = worst
        I = basis.int_matrix[q + 1] @ D @ np.linalg.inv(basis.int_matrix[q])
        mats[q] = I
        if sc is not None:
            C = sc.matrix(q).real
            oracle[q] = C
            big = float(np.max(np.abs(C))) if C.size else 0.0
            for i, x in enumerate(rows):
                for j, y in enumerate(cols):
                    if C[i, j] != 0:
                        rel[(q, x, y)] = float(abs(I[i, j] - C[i, j]) / abs(C[i, j]))
                    else:
                        rel[(q, x, y)] = float(abs(I[i, j]) / big) if big else float(abs(I[i, j]))
    return Recovery(t, mats, leak, oracle, rel)


@dataclass
class CountFit:
    pair: tuple  # (q, x, y)
    exponents: tuple
    expected: tuple
    fitted: tuple
    raw: tuple
    condition: float

    @property
    def exact(self) -> bool:
        return self.fitted == self.expected


def fit_recovered_counts(recoveries, table, m: ModelManifold) -> list[CountFit]:
    """Integer counts from recovered ``I_t`` samples, exponents from trajectory actions.

    For every pair with trajectories in ``table`` the samples over the
    recovery t-grid are fitted to ``sum_gamma c_gamma e^{-t H_gamma}``.
    """
    cps = {c.id: c for c in m.critical_points()}
    out = []
    for (x, y) in sorted({(k[0], k[1]) for k in table.entries}):
        q = cps[y].index
        terms = sorted(((table.actions[(x, y, g)], c) for (a, b, g), c in table.entries.items() if (a, b) == (x, y)))
        if not terms:
            continue
        exps = tuple(h for h, _ in terms)
        expected = tuple(int(c) for _, c in terms)
        samples = []
        for r in recoveries:
            i = m.by_index(q + 1).index(cps[x])
            j = m.by_index(q).index(cps[y])
            samples.append((r.t, complex(r.matrices[q][i, j])))
        try:
            fit = fit_integer_coefficients(samples, exps)
            out.append(CountFit((q, x, y), exps, expected, tuple(fit.coefficients), tuple(fit.raw), fit.condition))
        except Exception as exc:  # reported, not swallowed: fitted stays empty
            out.append(CountFit((q, x, y), exps, expected, (), (str(exc),), float("nan")))
    return out


__all__ = [
    "Branch",
    "ChainMapReport",
    "CountFit",
    "Integral",
    "Interpolant",
    "Recovery",
    "SmallComplexBasis",
    "UnstableChart",
    "build_chart",
    "build_charts",
    "build_small_basis",
    "fit_recovered_counts",
    "int_s",
    "int_s_batch",
    "int_vector",
    "recover_incidence",
    "verify_chain_map",
]
