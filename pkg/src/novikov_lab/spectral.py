"""Witten-deformed de Rham complex d_t = d + t omega^ on the flat torus.

Forms are sampled on the uniform grid ``theta_i = 2 pi j / N``; a q-form
stores one array per increasing multi-index I (lexicographic).  d is
Fourier differentiation with the Nyquist mode dropped, which makes the
derivative a real antisymmetric matrix; the adjoint uses the constant
metric through Gram matrices on Lambda^q.  Every operator accepts a
leading batch axis, so the same code serves matrix-free Lanczos and
dense assembly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cholesky, eigh, solve_triangular
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .exceptions import ConvergenceError, GapError, QuasimodeError
from .manifold import TWO_PI, CriticalPoint, ModelManifold, torus_distance

DENSE_MAX = 600


@lru_cache(maxsize=None)
def multi_indices(n: int, q: int) -> tuple[tuple[int, ...], ...]:
    return tuple(combinations(range(n), q))


@lru_cache(maxsize=None)
def wedge_table(n: int, q: int) -> tuple:
    """Entries (j, J position, I position, sign) of dx^j ^ : Lambda^q -> Lambda^{q+1}."""
    src = {I: a for a, I in enumerate(multi_indices(n, q))}
    out = []
    for b, J in enumerate(multi_indices(n, q + 1)):
        for pos, j in enumerate(J):
            I = J[:pos] + J[pos + 1 :]
            out.append((j, b, src[I], (-1) ** pos))
    return tuple(out)


def grid(n: int, N: int) -> np.ndarray:
    """Node coordinates, shape (N,)*n + (n,)."""
    axis = TWO_PI * np.arange(N) / N
    return np.stack(np.meshgrid(*[axis] * n, indexing="ij"), axis=-1)


@dataclass
class FormField:
    """A q-form on the N^n grid; ``components`` has shape (C(n,q),) + (N,)*n."""

    degree: int
    components: np.ndarray

    def __post_init__(self):
        self.components = np.asarray(self.components)
        n = self.components.ndim - 1
        if self.components.shape[0] != math.comb(n, self.degree):
            raise ValueError(f"a {self.degree}-form on T^{n} needs {math.comb(n, self.degree)} components")
        if len(set(self.components.shape[1:])) > 1:
            raise ValueError("all axes must share one resolution")

    @property
    def n(self) -> int:
        return self.components.ndim - 1

    @property
    def N(self) -> int:
        return self.components.shape[1]

    @property
    def indices(self):
        return multi_indices(self.n, self.degree)

    @classmethod
    def zeros(cls, n: int, q: int, N: int, dtype=float) -> "FormField":
        return cls(q, np.zeros((math.comb(n, q),) + (N,) * n, dtype=dtype))

    @classmethod
    def from_function(cls, n: int, q: int, N: int, fn: Callable) -> "FormField":
        """``fn(x)`` returns components stacked on the last axis for nodes ``x``."""
        vals = np.asarray(fn(grid(n, N)))
        if vals.ndim == n:
            vals = vals[..., None]
        return cls(q, np.moveaxis(vals, -1, 0))

    def flat(self) -> np.ndarray:
        return self.components.ravel()

    def __add__(self, other):
        return FormField(self.degree, self.components + other.components)

    def __sub__(self, other):
        return FormField(self.degree, self.components - other.components)

    def __mul__(self, a):
        return FormField(self.degree, self.components * a)

    __rmul__ = __mul__


# -- metric data ---------------------------------------------------------------


@lru_cache(maxsize=None)
def _gram_cached(metric_key: tuple, n: int, q: int) -> np.ndarray:
    ginv = np.linalg.inv(np.array(metric_key).reshape(n, n))
    idx = multi_indices(n, q)
    out = np.empty((len(idx), len(idx)))
    for a, I in enumerate(idx):
        for b, J in enumerate(idx):
            out[a, b] = np.linalg.det(ginv[np.ix_(I, J)]) if q else 1.0
    return out


def gram(metric: np.ndarray, q: int) -> np.ndarray:
    """Pointwise inner product on Lambda^q induced by g (compound of g^{-1})."""
    metric = np.asarray(metric, dtype=float)
    return _gram_cached(tuple(metric.ravel()), metric.shape[0], q)


def inner(m: ModelManifold, a: FormField, b: FormField) -> complex:
    """L^2 product <a, b> (conjugate-linear in a)."""
    G = gram(m.metric, a.degree)
    cell = (TWO_PI / a.N) ** a.n * math.sqrt(np.linalg.det(m.metric))
    prod = np.einsum("i...,ij,j...->...", np.conj(a.components), G, b.components).sum()
    return complex(prod * cell) if np.iscomplexobj(prod) else float(prod * cell)


def norm(m: ModelManifold, a: FormField) -> float:
    return math.sqrt(abs(inner(m, a, a)))


# -- spectral differentiation -----------------------------------------------------


def spectral_derivative(u: np.ndarray, axis: int) -> np.ndarray:
    """d/dtheta along ``axis`` with the Nyquist mode removed."""
    N = u.shape[axis]
    k = np.fft.rfftfreq(N, 1.0 / N)
    if N % 2 == 0:
        k[-1] = 0.0
    shape = [1] * u.ndim
    shape[axis] = len(k)
    mult = (1j * k).reshape(shape)
    if np.iscomplexobj(u):
        return spectral_derivative(u.real, axis) + 1j * spectral_derivative(u.imag, axis)
    return np.fft.irfft(np.fft.rfft(u, axis=axis) * mult, n=N, axis=axis)


def nyquist_filter(u: np.ndarray, n: int) -> np.ndarray:
    """Remove the Nyquist mode along each of the last ``n`` axes (even N only)."""
    N = u.shape[-1]
    if N % 2:
        return u
    if np.iscomplexobj(u):
        return nyquist_filter(u.real, n) + 1j * nyquist_filter(u.imag, n)
    for ax in range(u.ndim - n, u.ndim):
        uh = np.fft.rfft(u, axis=ax)
        uh[(slice(None),) * ax + (-1,)] = 0.0
        u = np.fft.irfft(uh, n=N, axis=ax)
    return u


@dataclass
class _Geometry:
    n: int
    N: int
    omega: np.ndarray  # (n,) + (N,)*n
    metric: np.ndarray
    sigma: float  # eigenvalue assigned to Nyquist content

    @classmethod
    def of(cls, m: ModelManifold, N: int, t: float = 0.0) -> "_Geometry":
        x = grid(m.dim, N)
        w = m.omega(x)
        top = float(np.linalg.eigvalsh(m.metric_inverse).max())
        sigma = m.dim * (N / 2) ** 2 * top + t * t * float(m.omega_norm2(x).max())
        return cls(m.dim, N, np.moveaxis(w, -1, 0), m.metric, sigma)


def _apply_d(geo: _Geometry, q: int, t: float, u: np.ndarray) -> np.ndarray:
    """d_t on arrays of shape batch + (C(n,q),) + (N,)*n (Nyquist-free)."""
    n = geo.n
    u = nyquist_filter(u, n)
    batch = u.shape[: u.ndim - n - 1]
    out = np.zeros(batch + (math.comb(n, q + 1),) + (geo.N,) * n, dtype=u.dtype)
    cache = {}
    for j, b, a, sgn in wedge_table(n, q):
        key = (j, a)
        if key not in cache:
            comp = u[(Ellipsis, a) + (slice(None),) * n]
            cache[key] = spectral_derivative(comp, comp.ndim - n + j) + t * geo.omega[j] * comp
        out[(Ellipsis, b) + (slice(None),) * n] += sgn * cache[key]
    return nyquist_filter(out, n)


def _apply_dT(geo: _Geometry, q: int, t: float, v: np.ndarray) -> np.ndarray:
    """Euclidean transpose of d_t (Lambda^{q+1} -> Lambda^q)."""
    n = geo.n
    v = nyquist_filter(v, n)
    batch = v.shape[: v.ndim - n - 1]
    out = np.zeros(batch + (math.comb(n, q),) + (geo.N,) * n, dtype=v.dtype)
    for j, b, a, sgn in wedge_table(n, q):
        comp = v[(Ellipsis, b) + (slice(None),) * n]
        out[(Ellipsis, a) + (slice(None),) * n] += sgn * (-spectral_derivative(comp, comp.ndim - n + j) + t * geo.omega[j] * comp)
    return nyquist_filter(out, n)


def _components(G: np.ndarray, u: np.ndarray, n: int) -> np.ndarray:
    """Apply a component matrix to axis -(n+1)."""
    return np.moveaxis(np.tensordot(G, np.moveaxis(u, -(n + 1), 0), axes=(1, 0)), 0, -(n + 1))


def _apply_dsharp(geo: _Geometry, q: int, t: float, v: np.ndarray) -> np.ndarray:
    """Adjoint of d_t : Lambda^q -> Lambda^{q+1} in the metric L^2 product."""
    Gq, Gq1 = gram(geo.metric, q), gram(geo.metric, q + 1)
    w = _apply_dT(geo, q, t, _components(Gq1, v, geo.n))
    return _components(np.linalg.inv(Gq), w, geo.n)


def _apply_laplacian(geo: _Geometry, q: int, t: float, u: np.ndarray) -> np.ndarray:
    """d_t# d_t + d_t d_t#, with Nyquist content sent to the eigenvalue sigma."""
    out = geo.sigma * (u - nyquist_filter(u, geo.n))
    if q < geo.n:
        out += _apply_dsharp(geo, q, t, _apply_d(geo, q, t, u))
    if q > 0:
        out += _apply_d(geo, q - 1, t, _apply_dsharp(geo, q - 1, t, u))
    return out


# -- operator handles -------------------------------------------------------------


@dataclass
class OperatorHandle:
    """Matrix-free operator on forms; ``apply`` acts on batch + component arrays."""

    kind: str  # "d_t", "d_t#", "laplacian" or "local-model"
    t: float
    degree: int
    out_degree: int
    n: int
    N: int
    apply: Callable[[np.ndarray], np.ndarray]
    metric: np.ndarray = field(default=None)
    extent: float = TWO_PI  # side length of the periodic box

    @property
    def shape_in(self) -> tuple:
        return (math.comb(self.n, self.degree),) + (self.N,) * self.n

    @property
    def dimension(self) -> int:
        return int(np.prod(self.shape_in))

    def __call__(self, form: FormField) -> FormField:
        if form.degree != self.degree:
            raise ValueError(f"operator acts on {self.degree}-forms, got a {form.degree}-form")
        return FormField(self.out_degree, self.apply(form.components))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x.reshape(self.shape_in)).ravel()

    def to_dense(self, block: int = 512) -> np.ndarray:
        dim = self.dimension
        cols = []
        for s in range(0, dim, block):
            e = np.zeros((min(block, dim - s), dim))
            e[np.arange(e.shape[0]), s + np.arange(e.shape[0])] = 1.0
            cols.append(self.apply(e.reshape((-1,) + self.shape_in)).reshape(e.shape[0], -1))
        return np.concatenate(cols, axis=0).T

    def symmetrizer(self) -> tuple[np.ndarray, np.ndarray]:
        """Upper Cholesky factor W of the component Gram matrix and its inverse."""
        G = gram(self.metric if self.metric is not None else np.eye(self.n), self.degree)
        W = cholesky(G, lower=False)
        return W, solve_triangular(W, np.eye(len(W)), lower=False)


def build_d_t(m: ModelManifold, q: int, t: float, N: int) -> OperatorHandle:
    if N < 8:
        raise ValueError("N must be at least 8")
    if not 0 <= q < m.dim:
        raise ValueError(f"d_t on {q}-forms is not defined for dimension {m.dim}")
    geo = _Geometry.of(m, N)
    return OperatorHandle("d_t", float(t), q, q + 1, m.dim, N, lambda u: _apply_d(geo, q, t, u), m.metric)


def build_d_t_sharp(m: ModelManifold, q: int, t: float, N: int) -> OperatorHandle:
    """Adjoint of d_t acting Lambda^{q+1} -> Lambda^q."""
    geo = _Geometry.of(m, N)
    return OperatorHandle("d_t#", float(t), q + 1, q, m.dim, N, lambda v: _apply_dsharp(geo, q, t, v), m.metric)


def build_delta_t(m: ModelManifold, q: int, t: float, N: int) -> OperatorHandle:
    """Witten Laplacian d_t# d_t + d_t d_t# on q-forms."""
    if N < 8:
        raise ValueError("N must be at least 8")
    if not 0 <= q <= m.dim:
        raise ValueError(f"no {q}-forms in dimension {m.dim}")
    geo = _Geometry.of(m, N, t)
    return OperatorHandle("laplacian", float(t), q, q, m.dim, N, lambda u: _apply_laplacian(geo, q, t, u), m.metric)


# -- eigensolver ------------------------------------------------------------------


@dataclass
class EigenResult:
    values: np.ndarray
    forms: list  # FormField eigenforms, unit L^2 norm (empty unless requested)
    residuals: np.ndarray
    method: str


def _symmetric_apply(op: OperatorHandle):
    W, Winv = op.symmetrizer()
    n = op.n

    def apply(v):
        return _components(W, op.apply(_components(Winv, v, n)), n)

    return apply, W, Winv


def spectrum(
    op: OperatorHandle,
    k: int,
    *,
    return_forms: bool = False,
    dense_max: int = DENSE_MAX,
    tol: float = 1e-7,
    seed: int = 0,
) -> EigenResult:
    """The ``k`` smallest eigenvalues of a Laplacian-type handle.

    The operator is self-adjoint for the metric L^2 product; conjugating
    by the Cholesky factor of the component Gram matrix makes it
    symmetric in the Euclidean sense.  Small problems are solved densely,
    larger ones by implicitly restarted Lanczos with a seeded start vector.
    """
    if op.kind not in ("laplacian", "local-model"):
        raise ValueError("spectrum needs a Laplacian-type operator")
    dim = op.dimension
    if k < 1 or k > 0.1 * dim:
        raise ValueError(f"k={k} must lie in [1, 0.1 * dimension = {0.1 * dim:.0f}]")
    apply, W, Winv = _symmetric_apply(op)
    shape = op.shape_in
    if dim <= dense_max:
        A = np.empty((dim, dim))
        block = 512
        for s in range(0, dim, block):
            e = np.zeros((min(block, dim - s), dim))
            e[np.arange(e.shape[0]), s + np.arange(e.shape[0])] = 1.0
            A[:, s : s + e.shape[0]] = apply(e.reshape((-1,) + shape)).reshape(e.shape[0], -1).T
        A = 0.5 * (A + A.T)
        vals, vecs = eigh(A, subset_by_index=[0, k - 1])
        method = "dense"
    else:
        lin = LinearOperator((dim, dim), matvec=lambda x: apply(x.reshape(shape)).ravel(), dtype=float)
        v0 = np.random.default_rng(seed).standard_normal(dim)
        try:
            vals, vecs = eigsh(
                lin, k=k, which="SA", v0=v0, tol=1e-12, ncv=min(dim, max(4 * k, 60)),
                maxiter=max(int(10 * math.sqrt(dim)), 1000),
            )
        except ArpackNoConvergence as exc:
            raise ConvergenceError(f"Lanczos did not converge for k={k} at t={op.t}") from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        method = "lanczos"
    res = np.array(
        [np.linalg.norm(apply(vecs[:, i].reshape(shape)).ravel() - vals[i] * vecs[:, i]) for i in range(k)]
    )
    if np.any(res > tol * max(1.0, float(np.max(np.abs(vals))))):
        raise ConvergenceError(f"eigen-residuals {res.max():.2e} exceed tolerance at t={op.t}")
    forms = []
    if return_forms:
        cell = (op.extent / op.N) ** op.n * math.sqrt(np.linalg.det(op.metric if op.metric is not None else np.eye(op.n)))
        for i in range(k):
            u = _components(Winv, vecs[:, i].reshape(shape), op.n) / math.sqrt(cell)
            forms.append(FormField(op.degree, u))
    return EigenResult(vals, forms, res, method)


# -- harmonic local model ---------------------------------------------------------


@dataclass(frozen=True)
class LocalModel:
    """Witten Laplacian of h = c(-x_1^2 - ... - x_k^2 + x_{k+1}^2 + ... + x_n^2) on R^n."""

    n: int
    q: int
    k: int
    c: float
    t: float

    def __post_init__(self):
        if not (0 <= self.q <= self.n and 0 <= self.k <= self.n):
            raise ValueError("need 0 <= q, k <= n")
        if self.c <= 0 or self.t <= 0:
            raise ValueError("c and t must be positive")

    @property
    def quantum(self) -> float:
        return 4 * self.c * self.t

    def epsilon(self, I: Sequence[int]) -> int:
        """eps_I^k = -n + 2k - 2|I n {0..k-1}| + 2|I n {k..n-1}|."""
        low = sum(1 for i in I if i < self.k)
        return -self.n + 2 * self.k - 2 * low + 2 * (len(I) - low)

    def shift(self, I: Sequence[int]) -> int:
        """Lowest level of component I in units of 4ct."""
        return (self.n + self.epsilon(I)) // 2


def local_model_spectrum(lm: LocalModel, count: int) -> np.ndarray:
    """The ``count`` smallest eigenvalues (with multiplicity), in closed form.

    Component dx^I carries oscillator levels 2ct(2|m| + n) shifted by
    2ct eps_I^k, i.e. 4ct(|m| + s_I); the level |m| = j has multiplicity
    C(j + n - 1, n - 1).
    """
    levels = []
    for I in multi_indices(lm.n, lm.q):
        s = lm.shift(I)
        j = 0
        while len(levels) < count * 4 + 10 and j <= count:
            levels += [s + j] * math.comb(j + lm.n - 1, lm.n - 1)
            j += 1
    out = np.sort(np.array(levels, dtype=float))[:count]
    return lm.quantum * out


def local_model_levels(lm: LocalModel, n_levels: int) -> list[tuple[float, int]]:
    """First ``n_levels`` distinct eigenvalues with multiplicities."""
    counts: dict[int, int] = {}
    for I in multi_indices(lm.n, lm.q):
        s = lm.shift(I)
        for j in range(n_levels + 1):
            counts[s + j] = counts.get(s + j, 0) + math.comb(j + lm.n - 1, lm.n - 1)
    return [(lm.quantum * L, counts[L]) for L in sorted(counts)[:n_levels]]


def local_box(lm: LocalModel, width: float = 10.0) -> float:
    """Half-width of a periodic box holding the low eigenfunctions."""
    return width / math.sqrt(2 * lm.c * lm.t)


def local_grid(n: int, N: int, half_width: float) -> np.ndarray:
    axis = -half_width + 2 * half_width * np.arange(N) / N
    return np.stack(np.meshgrid(*[axis] * n, indexing="ij"), axis=-1)


def build_local_model(lm: LocalModel, N: int = 48, half_width: float | None = None) -> OperatorHandle:
    """Discretized Delta + 2ct M_{q,k} + 4c^2t^2|x|^2 on a periodic box."""
    L = local_box(lm) if half_width is None else half_width
    x = local_grid(lm.n, N, L)
    pot = 4 * lm.c**2 * lm.t**2 * np.sum(x**2, axis=-1)
    shifts = np.array([2 * lm.c * lm.t * lm.epsilon(I) for I in multi_indices(lm.n, lm.q)])
    k = np.fft.fftfreq(N, 2 * L / (TWO_PI * N))
    k2 = sum(np.meshgrid(*[k**2] * lm.n, indexing="ij"))
    n = lm.n

    def apply(u):
        axes = tuple(range(u.ndim - n, u.ndim))
        lap = np.fft.ifftn(np.fft.fftn(u, axes=axes) * k2, axes=axes)
        lap = lap if np.iscomplexobj(u) else lap.real
        return lap + pot * u + _components(np.diag(shifts), u, n)

    return OperatorHandle("local-model", lm.t, lm.q, lm.q, n, N, apply, np.eye(n), extent=2 * L)


def kernel_generator(lm: LocalModel, x: np.ndarray) -> np.ndarray:
    """(2ct/pi)^{n/4} exp(-ct|x|^2), the coefficient of dx^1 ^ ... ^ dx^q."""
    return (2 * lm.c * lm.t / math.pi) ** (lm.n / 4) * np.exp(-lm.c * lm.t * np.sum(x**2, axis=-1))


# -- quasimodes ---------------------------------------------------------------------


def cutoff(u: np.ndarray, eta: float) -> np.ndarray:
    """Smooth gamma_eta: 1 for u <= eta/2, 0 for u >= eta."""
    s = np.clip((np.asarray(u) - eta / 2) / (eta / 2), 0.0, 1.0)

    def bump(v):
        return np.where(v > 0, np.exp(-1.0 / np.maximum(v, 1e-300)), 0.0)

    return bump(1 - s) / (bump(1 - s) + bump(s))


def _quasimode_components(coords: np.ndarray, rates: np.ndarray, frame_inv: np.ndarray, q: int, t: float, eta: float):
    n = coords.shape[-1]
    z = coords @ frame_inv.T  # Morse coordinates
    radius = np.linalg.norm(z, axis=-1)
    profile = np.exp(-0.5 * t * np.sum(rates * z**2, axis=-1)) * cutoff(radius, eta)
    comps = []
    for I in multi_indices(n, q):
        # dz^1 ^ ... ^ dz^q on dtheta^I
        coef = np.linalg.det(frame_inv[np.ix_(range(q), I)]) if q else 1.0
        comps.append(coef * profile)
    return np.array(comps)


def min_separation(m: ModelManifold) -> float:
    cps = m.critical_points()
    d = [torus_distance(a.position, b.position) for i, a in enumerate(cps) for b in cps[i + 1 :]]
    return min(d) if d else math.inf


def build_quasimode(
    m: ModelManifold, y: CriticalPoint, t: float, eta: float, N: int, degree: int | None = None
) -> FormField:
    """Cut-off Gaussian q-form at y in its Hessian eigenframe, unit L^2 norm.

    The Gaussian is exp(-t sum |lambda_i| z_i^2 / 2) in G-orthonormal
    eigen-coordinates z, i.e. the kernel generator of the quadratic model
    at y.  ``degree`` defaults to ind(y); for other degrees the form uses
    the first q eigen-directions, the lowest local level in that degree.
    """
    q = y.index if degree is None else degree
    V = y.eigenvectors
    stretch = float(np.linalg.norm(V, 2))
    if eta * stretch >= 0.5 * min_separation(m) or eta * stretch >= math.pi:
        raise QuasimodeError(f"cutoff eta={eta} exceeds half the distance between zeros")
    x = grid(m.dim, N)
    d = np.mod(x - y.position + math.pi, TWO_PI) - math.pi
    comps = _quasimode_components(d, np.abs(y.eigenvalues), np.linalg.inv(V), q, t, eta)
    form = FormField(q, comps)
    return form * (1.0 / norm(m, form))


def local_quasimode(lm: LocalModel, eta: float, N: int = 48, half_width: float | None = None) -> FormField:
    """The cut-off kernel generator of the local model on its box, unit norm."""
    L = local_box(lm) if half_width is None else half_width
    if eta >= L:
        raise QuasimodeError("cutoff eta must fit inside the box")
    x = local_grid(lm.n, N, L)
    rates = np.full(lm.n, 2 * lm.c)
    comps = _quasimode_components(x, rates, np.eye(lm.n), lm.q, lm.t, eta)
    cell = (2 * L / N) ** lm.n
    nrm = math.sqrt(float(np.sum(comps**2)) * cell)
    return FormField(lm.q, comps / nrm)


def local_norm(op: OperatorHandle, form: FormField) -> float:
    cell = (op.extent / op.N) ** op.n
    return math.sqrt(float(np.sum(np.abs(form.components) ** 2)) * cell)


# -- gap verification ---------------------------------------------------------------


@dataclass
class SpectrumReport:
    """Low spectra of Delta_t^q over a t-grid, with the fitted gap behaviour."""

    fingerprint: str
    N: int
    t_grid: tuple
    threshold: float
    expected: dict  # q -> #Cr_q
    eigenvalues: dict = field(default_factory=dict)  # (q, t) -> tuple
    small_counts: dict = field(default_factory=dict)  # (q, t) -> int
    gap: dict = field(default_factory=dict)  # (q, t) -> (largest small or None, smallest large)
    decay: dict = field(default_factory=dict)  # q -> {"status", "slope"}
    growth: dict = field(default_factory=dict)  # q -> {"slope", "intercept", "deviation"}
    minimax: dict = field(default_factory=dict)  # q -> {"t", "max_small", "min_perp", "passed"}

    def counts_match(self, t_min: float = -math.inf) -> bool:
        return all(self.small_counts[(q, t)] == self.expected[q] for (q, t) in self.small_counts if t >= t_min)

    def table_rows(self) -> list[tuple]:
        rows = [(t, q, i, lam) for (q, t), vals in self.eigenvalues.items() for i, lam in enumerate(vals)]
        return sorted(rows, key=lambda r: (r[1], r[0], r[2]))

    def to_table(self) -> str:
        lines = ["t,q,idx,lambda"]
        lines += [f"{t!r},{q},{i},{lam:.12e}" for t, q, i, lam in self.table_rows()]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = [f"# spectrum report  model={self.fingerprint}  N={self.N}  threshold={self.threshold}"]
        for q in sorted(self.expected):
            out.append(f"[q={q}] #Cr_q={self.expected[q]}")
            for t in self.t_grid:
                if (q, t) not in self.eigenvalues:
                    continue
                lo, hi = self.gap[(q, t)]
                lo_s = "-" if lo is None else f"{lo:.6e}"
                out.append(f"  t={t:g} small={self.small_counts[(q, t)]} gap=({lo_s}, {hi:.6f})")
            d, g = self.decay.get(q, {}), self.growth.get(q, {})
            slope = d.get("slope")
            out.append(f"  decay: {d.get('status')} slope={'-' if slope is None else f'{slope:.6f}'}")
            if g:
                out.append(f"  growth: slope={g['slope']:.6f} intercept={g['intercept']:.6f} deviation={g['deviation']:.4f}")
            mm = self.minimax.get(q)
            if mm:
                out.append(
                    f"  minimax t={mm['t']:g}: max on quasimodes={mm['max_small']:.6e} "
                    f"min on complement={mm['min_perp']:.6f} passed={mm['passed']}"
                )
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "N": self.N,
            "t_grid": list(self.t_grid),
            "threshold": self.threshold,
            "expected": {str(q): v for q, v in self.expected.items()},
            "table": [list(r) for r in self.table_rows()],
            "small_counts": [[q, t, c] for (q, t), c in sorted(self.small_counts.items())],
            "decay": {str(q): v for q, v in self.decay.items()},
            "growth": {str(q): v for q, v in self.growth.items()},
            "minimax": {str(q): v for q, v in self.minimax.items()},
        }


def fit_decay(ts, values, floor: float = 1e-9) -> dict:
    """Slope of log(values) against t over the points above ``floor``.

    When every value sits below the floor the small spectrum is an exact
    kernel to round-off and no slope is fitted.
    """
    ts, values = np.asarray(ts, dtype=float), np.asarray(values, dtype=float)
    keep = values > floor
    if not keep.any():
        return {"status": "exact-kernel", "slope": None}
    if keep.sum() < 2:
        return {"status": "insufficient", "slope": None}
    slope = float(np.polyfit(ts[keep], np.log(values[keep]), 1)[0])
    return {"status": "decaying" if slope < 0 else "not-decaying", "slope": slope}


def fit_growth(ts, values) -> dict:
    ts, values = np.asarray(ts, dtype=float), np.asarray(values, dtype=float)
    slope, intercept = np.polyfit(ts, values, 1)
    fit = slope * ts + intercept
    dev = float(np.max(np.abs(values - fit) / np.abs(fit)))
    return {"slope": float(slope), "intercept": float(intercept), "deviation": dev}


def minimax_check(m: ModelManifold, q: int, t: float, N: int, eta: float | None = None, seed: int = 0) -> dict:
    """Lemma-4 style test with H1 = span of the degree-q quasimodes.

    Compares the largest Rayleigh quotient on H1 with the smallest
    eigenvalue of Delta_t compressed to the orthogonal complement.
    """
    op = build_delta_t(m, q, t, N)
    apply, W, Winv = _symmetric_apply(op)
    shape = op.shape_in
    cps = m.by_index(q)
    if eta is None and cps:
        eta = 0.45 * min(min_separation(m), TWO_PI) / max(float(np.linalg.norm(c.eigenvectors, 2)) for c in cps)
    Q = np.array([_components(W, build_quasimode(m, y, t, eta, N).components, op.n).ravel() for y in cps]).reshape(len(cps), -1).T
    if Q.size:
        Q, _ = np.linalg.qr(Q)
        AQ = np.array([apply(Q[:, i].reshape(shape)).ravel() for i in range(Q.shape[1])]).T
        max_small = float(np.linalg.eigvalsh(0.5 * (Q.T @ AQ + AQ.T @ Q)).max())
    else:
        max_small = 0.0
    big = _Geometry.of(m, N, t).sigma

    def deflated(x):
        x = x.ravel()
        px = x - Q @ (Q.T @ x) if Q.size else x
        y = apply(px.reshape(shape)).ravel()
        y = y - Q @ (Q.T @ y) if Q.size else y
        return y + (big * (Q @ (Q.T @ x)) if Q.size else 0.0)

    dim = op.dimension
    lin = LinearOperator((dim, dim), matvec=deflated, dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(dim)
    try:
        min_perp = float(eigsh(lin, k=1, which="SA", v0=v0, tol=1e-10, ncv=min(dim, 60), maxiter=5000)[0][0])
    except ArpackNoConvergence as exc:
        raise ConvergenceError("Lanczos did not converge on the quasimode complement") from exc
    return {"t": float(t), "max_small": max_small, "min_perp": min_perp, "passed": bool(max_small < min_perp), "eta": eta}


def verify_gap(
    m: ModelManifold,
    q: int | None,
    t_grid: Sequence[float] = (5.0, 8.0, 12.0, 16.0, 20.0),
    N: int | None = None,
    *,
    threshold: float = 1.0,
    n_extra: int = 4,
    floor: float = 1e-9,
    minimax: bool = True,
    strict: bool = True,
) -> SpectrumReport:
    """Small-eigenvalue counts, gap endpoints and their trends over ``t_grid``.

    ``q=None`` runs every degree.  With ``strict`` a count mismatch at the
    largest t raises ``GapError`` carrying the report.
    """
    t_grid = tuple(float(t) for t in t_grid)
    if len(t_grid) < 4 or any(b <= a for a, b in zip(t_grid, t_grid[1:])):
        raise ValueError("t_grid must be increasing with at least 4 points")
    if N is None:
        N = 192 if m.dim == 1 else 48
    degrees = range(m.dim + 1) if q is None else [q]
    expected = {d: len(m.by_index(d)) for d in degrees}
    rep = SpectrumReport(m.fingerprint(), N, t_grid, threshold, expected)
    for d in degrees:
        k = expected[d] + n_extra
        for t in t_grid:
            vals = spectrum(build_delta_t(m, d, t, N), k).values
            if np.any(vals < -1e-9 * max(1.0, float(np.max(np.abs(vals))))):
                raise ConvergenceError(f"negative eigenvalue {vals.min():.3e} at q={d}, t={t}")
            small = vals[vals < threshold]
            large = vals[vals >= threshold]
            rep.eigenvalues[(d, t)] = tuple(float(v) for v in vals)
            rep.small_counts[(d, t)] = int(len(small))
            rep.gap[(d, t)] = (float(small.max()) if len(small) else None, float(large.min()) if len(large) else math.inf)
        lows = [rep.gap[(d, t)][0] for t in t_grid]
        usable = [(t, lo) for t, lo in zip(t_grid, lows) if lo is not None]
        rep.decay[d] = fit_decay(*zip(*usable), floor=floor) if usable else {"status": "empty", "slope": None}
        rep.growth[d] = fit_growth(t_grid, [rep.gap[(d, t)][1] for t in t_grid])
        if minimax:
            rep.minimax[d] = minimax_check(m, d, t_grid[-1], N)
        if strict and rep.small_counts[(d, t_grid[-1])] != expected[d]:
            raise GapError(
                f"degree {d}: {rep.small_counts[(d, t_grid[-1])]} eigenvalues below {threshold} at t={t_grid[-1]}, "
                f"expected {expected[d]}",
                spectrum=rep,
            )
    return rep
