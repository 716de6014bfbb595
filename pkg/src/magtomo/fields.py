"""Scalar fields and 1-forms on the uniform chart grid.

The grid is N x N over [-R1, R1]^2 ('ij' indexing, axis 0 is x1).  Derivatives
use 4th-order central differences with zero extension, and the codifferential
is built from the same stencil so that <dA, v> and <A, delta v> pair exactly
in the discrete inner product sum(g^jk a_j b_k sqrt|g|) h^2.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .errors import DomainError, LinearSolveError, PreconditionError
from .geometry import M1_RADIUS, MetricField, PhasePoint


@dataclass(frozen=True)
class Grid:
    N: int = 128
    extent: float = M1_RADIUS

    @property
    def h(self):
        return 2 * self.extent / (self.N - 1)

    @property
    def x(self):
        return np.linspace(-self.extent, self.extent, self.N)

    @functools.cached_property
    def points(self):
        X1, X2 = np.meshgrid(self.x, self.x, indexing="ij")
        return np.stack([X1, X2], axis=-1)

    @property
    def r(self):
        return np.hypot(self.points[..., 0], self.points[..., 1])

    @functools.cached_property
    def mask_M(self):
        return self.r < 1.0

    def to_index(self, p):
        """Fractional array indices of chart points."""
        return (np.asarray(p, dtype=float) + self.extent) / self.h


@functools.lru_cache(maxsize=16)
def _metric_arrays(key, N, extent, m_ref):
    grid = Grid(N, extent)
    m = m_ref()
    g = m.g(grid.points)
    gi = m.ginv(grid.points)
    sq = np.sqrt(g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] ** 2)
    return g, gi, sq


class _Ref:
    """Hashable by metric key, carries the metric for lru_cache."""

    def __init__(self, m):
        self.m = m
        self.k = m.key()

    def __call__(self):
        return self.m

    def __hash__(self):
        return hash(self.k)

    def __eq__(self, other):
        return isinstance(other, _Ref) and self.k == other.k


def metric_on_grid(m: MetricField, grid: Grid):
    """(g, g^-1, sqrt|g|) sampled at the grid nodes, cached per metric."""
    return _metric_arrays(m.key(), grid.N, grid.extent, _Ref(m))


@dataclass
class ScalarField:
    grid: Grid
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (self.grid.N, self.grid.N):
            raise ValueError("field shape does not match the grid")
        if self.mask is not None:
            self.values = np.where(self.mask, self.values, 0)

    @classmethod
    def from_function(cls, grid, f, mask="M"):
        mk = grid.mask_M if isinstance(mask, str) and mask == "M" else mask
        return cls(grid, np.asarray(f(grid.points)), mk)

    @classmethod
    def zeros(cls, grid, dtype=float):
        return cls(grid, np.zeros((grid.N, grid.N), dtype=dtype))

    def __add__(self, other):
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - other.values)

    def scale(self, c):
        return ScalarField(self.grid, c * self.values, self.mask)


@dataclass
class OneForm:
    grid: Grid
    a1: np.ndarray
    a2: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.a1 = np.asarray(self.a1)
        self.a2 = np.asarray(self.a2)
        if self.a1.shape != (self.grid.N, self.grid.N) or self.a2.shape != self.a1.shape:
            raise ValueError("1-form components do not match the grid")
        if self.mask is not None:
            self.a1 = np.where(self.mask, self.a1, 0)
            self.a2 = np.where(self.mask, self.a2, 0)

    @classmethod
    def from_function(cls, grid, a, mask="M"):
        v = np.asarray(a(grid.points))
        mk = grid.mask_M if isinstance(mask, str) and mask == "M" else mask
        return cls(grid, v[..., 0], v[..., 1], mk)

    @classmethod
    def zeros(cls, grid, dtype=float):
        z = np.zeros((grid.N, grid.N), dtype=dtype)
        return cls(grid, z, z.copy())

    @property
    def stacked(self):
        return np.stack([self.a1, self.a2], axis=-1)

    def __add__(self, other):
        return OneForm(self.grid, self.a1 + other.a1, self.a2 + other.a2)

    def __sub__(self, other):
        return OneForm(self.grid, self.a1 - other.a1, self.a2 - other.a2)

    def scale(self, c):
        return OneForm(self.grid, c * self.a1, c * self.a2, self.mask)

    def masked(self, mask):
        return OneForm(self.grid, self.a1, self.a2, mask)


@dataclass
class HodgeSplit:
    solenoidal: OneForm
    potential: ScalarField
    residual: float


# ---------------------------------------------------------------------------
# interpolation


class Interpolator:
    """Cubic B-spline interpolation of grid values at arbitrary chart points."""

    def __init__(self, grid: Grid, values, order=3):
        self.grid = grid
        self.order = order
        v = np.asarray(values)
        self.complex = np.iscomplexobj(v)
        parts = [v.real, v.imag] if self.complex else [v]
        self.coef = [ndimage.spline_filter(p.astype(float), order=order, mode="nearest") for p in parts]

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        shp = pts.shape[:-1]
        c = self.grid.to_index(pts.reshape(-1, 2)).T
        out = [ndimage.map_coordinates(k, c, order=self.order, mode="nearest", prefilter=False)
               for k in self.coef]
        res = out[0] + 1j * out[1] if self.complex else out[0]
        return res.reshape(shp)


def sigma_symbol(A, p: PhasePoint, m: MetricField | None = None):
    """sigma_A(x, theta) = a_j(x) theta^j (= <A^sharp, theta>_g)."""
    x = np.asarray(p.x, dtype=float)
    th = np.asarray(p.theta, dtype=float)
    if callable(A):
        a = np.asarray(A(x))
        lim = m.chart_radius if m is not None else M1_RADIUS
    else:
        lim = A.grid.extent if m is None else m.chart_radius
        a = np.stack([Interpolator(A.grid, A.a1)(x), Interpolator(A.grid, A.a2)(x)], axis=-1)
    if np.any(np.sum(x * x, axis=-1) > lim ** 2):
        raise DomainError("symbol evaluated outside the chart")
    return np.sum(a * th, axis=-1)


def sharp(m: MetricField, A: OneForm):
    """Contravariant components a^j = g^jk a_k, shape (N, N, 2)."""
    _, gi, _ = metric_on_grid(m, A.grid)
    return np.einsum("...jk,...k->...j", gi, A.stacked)


def flat(m: MetricField, grid: Grid, X):
    g, _, _ = metric_on_grid(m, grid)
    v = np.einsum("...jk,...k->...j", g, X)
    return OneForm(grid, v[..., 0], v[..., 1])


# ---------------------------------------------------------------------------
# difference operators


def d4(arr, axis, h):
    """4th-order central first derivative with zero extension outside the array."""
    a = np.moveaxis(np.asarray(arr), axis, 0)
    p = np.zeros((a.shape[0] + 4,) + a.shape[1:], dtype=a.dtype)
    p[2:-2] = a
    out = (p[:-4] - 8 * p[1:-3] + 8 * p[3:-1] - p[4:]) / (12 * h)
    return np.moveaxis(out, 0, axis)


@functools.lru_cache(maxsize=8)
def _d4_matrix(N, h):
    c = np.array([1, -8, 0, 8, -1]) / (12 * h)
    return sp.diags([c[0], c[1], c[3], c[4]], [-2, -1, 1, 2], shape=(N, N), format="csr")


def exterior_d(phi: ScalarField) -> OneForm:
    h = phi.grid.h
    return OneForm(phi.grid, d4(phi.values, 0, h), d4(phi.values, 1, h))


def curl(A: OneForm):
    """Coefficient of dA = (d1 a2 - d2 a1) dx1^dx2."""
    h = A.grid.h
    return d4(A.a2, 0, h) - d4(A.a1, 1, h)


def curl_norm(m: MetricField, A: OneForm, mask=None):
    """L2 norm of the 2-form dA over M: the integral of c^2 / sqrt|g| for dA = c dx1^dx2."""
    _, _, sq = metric_on_grid(m, A.grid)
    mk = A.grid.mask_M if mask is None else mask
    c = curl(A)
    return float(np.sqrt(np.sum(np.abs(c) ** 2 / sq * mk) * A.grid.h ** 2))


def codifferential(m: MetricField, A: OneForm) -> ScalarField:
    """delta A = -|g|^-1/2 d_j(|g|^1/2 g^jk a_k), adjoint of d in the grid inner product."""
    _, gi, sq = metric_on_grid(m, A.grid)
    h = A.grid.h
    f1 = sq * (gi[..., 0, 0] * A.a1 + gi[..., 0, 1] * A.a2)
    f2 = sq * (gi[..., 1, 0] * A.a1 + gi[..., 1, 1] * A.a2)
    return ScalarField(A.grid, -(d4(f1, 0, h) + d4(f2, 1, h)) / sq)


def inner(m: MetricField, u, v, mask=None):
    """Grid L2 inner product (complex-conjugate in the second slot)."""
    grid = u.grid
    _, gi, sq = metric_on_grid(m, grid)
    w = sq * grid.h ** 2
    if mask is not None:
        w = w * mask
    if isinstance(u, ScalarField):
        return np.sum(u.values * np.conj(v.values) * w)
    a = u.stacked
    b = np.conj(v.stacked)
    return np.sum(np.einsum("...jk,...j,...k->...", gi, a, b) * w)


def norm(m: MetricField, u, mask=None):
    return float(np.sqrt(abs(inner(m, u, u, mask))))


def sup_norm(m: MetricField, u):
    if isinstance(u, ScalarField):
        return float(np.max(np.abs(u.values)))
    _, gi, _ = metric_on_grid(m, u.grid)
    a = u.stacked
    return float(np.sqrt(np.max(np.abs(np.einsum("...jk,...j,...k->...", gi, a, np.conj(a))))))


def h1_norm(u):
    """Discrete H^1 norm on the chart square, one-sided differences at its edges."""
    h = u.grid.h
    comps = [u.values] if isinstance(u, ScalarField) else [u.a1, u.a2]
    tot = 0.0
    for c in comps:
        g0, g1 = np.gradient(c, h, edge_order=2)
        tot += np.sum(np.abs(c) ** 2 + np.abs(g0) ** 2 + np.abs(g1) ** 2) * h * h
    return float(math.sqrt(tot))


# ---------------------------------------------------------------------------
# Hodge decomposition


class _HodgeSolver:
    def __init__(self, m: MetricField, grid: Grid):
        N, h = grid.N, grid.h
        _, gi, sq = metric_on_grid(m, grid)
        D = _d4_matrix(N, h)
        I = sp.identity(N, format="csr")
        D1 = sp.kron(D, I, format="csr")
        D2 = sp.kron(I, D, format="csr")
        S = sq.ravel()
        c11 = sp.diags(S * gi[..., 0, 0].ravel())
        c12 = sp.diags(S * gi[..., 0, 1].ravel())
        c22 = sp.diags(S * gi[..., 1, 1].ravel())
        Q = (D1.T @ c11 @ D1 + D1.T @ c12 @ D2 + D2.T @ c12 @ D1 + D2.T @ c22 @ D2)
        self.inside = np.flatnonzero(grid.mask_M.ravel())
        Qi = Q.tocsr()[self.inside][:, self.inside].tocsc()
        self.Q = Qi
        self.lu = spla.splu(Qi)
        self.sq = S
        self.grid = grid

    def solve(self, rhs):
        """phi on M with phi = 0 outside, from delta d phi = rhs on M."""
        b = (self.sq * np.ravel(rhs))[self.inside]
        if np.iscomplexobj(b):
            x = self.lu.solve(b.real) + 1j * self.lu.solve(b.imag)
        else:
            x = self.lu.solve(b)
        nb = np.linalg.norm(b)
        res = float(np.linalg.norm(self.Q @ x - b) / nb) if nb > 0 else 0.0
        phi = np.zeros(self.grid.N * self.grid.N, dtype=x.dtype)
        phi[self.inside] = x
        return phi.reshape(self.grid.N, self.grid.N), res


@functools.lru_cache(maxsize=8)
def _hodge_solver(key, N, extent, m_ref):
    return _HodgeSolver(m_ref(), Grid(N, extent))


def hodge_decompose(m: MetricField, A: OneForm, tol=1e-10) -> HodgeSplit:
    """A = A^s + d phi with phi = 0 on the boundary of M, delta A^s = 0 in M."""
    grid = A.grid
    solver = _hodge_solver(m.key(), grid.N, grid.extent, _Ref(m))
    rhs = codifferential(m, A).values
    phi, res = solver.solve(rhs)
    if res > tol:
        raise LinearSolveError(f"Hodge solve residual {res:.2e} exceeds {tol:.0e}")
    pot = ScalarField(grid, phi)
    dphi = exterior_d(pot)
    return HodgeSplit(A - dphi, pot, res)


def solenoidal_projection(m: MetricField, A: OneForm, restrict=True) -> OneForm:
    """A^s of the Hodge split, optionally cut back to the nodes of M."""
    s = hodge_decompose(m, A).solenoidal
    return s.masked(A.grid.mask_M) if restrict else s


def gauge_transform(A: OneForm, V: ScalarField, phi: ScalarField, dphi: OneForm | None = None):
    """(A + d phi, V).  phi must vanish on the boundary of M and outside it."""
    grid = A.grid
    outside = ~grid.mask_M
    scale = max(1.0, float(np.max(np.abs(phi.values))))
    if np.max(np.abs(phi.values[outside]), initial=0.0) > 1e-10 * scale:
        raise PreconditionError("gauge function has a nonzero boundary trace")
    dp = exterior_d(phi) if dphi is None else dphi
    return A + dp, V


# ---------------------------------------------------------------------------
# test-field factories


def smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
    b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1 - t, 1.0)), 0.0)
    return a / (a + b)


def _smooth_step_deriv(t):
    t = np.asarray(t, dtype=float)
    pos = (t > 0) & (t < 1)
    tt = np.where(pos, t, 0.5)
    a = np.exp(-1 / tt)
    b = np.exp(-1 / (1 - tt))
    da = a / tt ** 2
    db = -b / (1 - tt) ** 2
    out = (da * (a + b) - a * (da + db)) / (a + b) ** 2
    return np.where(pos, out, 0.0)


def cutoff(r0=0.7, r1=0.9):
    """Radial cutoff (1 inside r0, 0 outside r1) and its gradient, as callables."""
    def c(x):
        r = np.hypot(x[..., 0], x[..., 1])
        return 1 - smooth_step((r - r0) / (r1 - r0))

    def dc(x):
        r = np.hypot(x[..., 0], x[..., 1])
        dr = -_smooth_step_deriv((r - r0) / (r1 - r0)) / (r1 - r0)
        rr = np.where(r > 0, r, 1.0)
        return (dr / rr)[..., None] * x

    return c, dc


def gaussian(amplitude=1.0, width=0.2, center=(0.0, 0.0), r0=0.7, r1=0.9):
    """Gaussian bump times the radial cutoff, as (f, grad f) callables."""
    c0 = np.asarray(center, dtype=float)
    cf, dcf = cutoff(r0, r1)

    def f(x):
        d = x - c0
        return amplitude * np.exp(-np.sum(d * d, axis=-1) / (2 * width ** 2)) * cf(x)

    def df(x):
        d = x - c0
        gs = amplitude * np.exp(-np.sum(d * d, axis=-1) / (2 * width ** 2))
        return (-d / width ** 2) * (gs * cf(x))[..., None] + gs[..., None] * dcf(x)

    return f, df


def solenoidal_bump(amplitude=1.0, width=0.2, center=(0.0, 0.0), r0=0.7, r1=0.9):
    """A = (d2 chi, -d1 chi) for a cut-off Gaussian chi; divergence free in the flat sense."""
    _, dchi = gaussian(1.0, width, center, r0, r1)

    def a(x):
        g = dchi(x)
        return amplitude * np.stack([g[..., 1], -g[..., 0]], axis=-1)

    return a


def scaled_to_sup(m: MetricField, grid: Grid, fun, target, kind="scalar"):
    """Rescale a callable so its grid sup norm equals ``target``."""
    if kind == "scalar":
        v = ScalarField.from_function(grid, fun)
        s = sup_norm(m, v)
    else:
        v = OneForm.from_function(grid, fun)
        s = sup_norm(m, v)
    k = target / s

    def scaled(x):
        return k * np.asarray(fun(x))

    return scaled


@dataclass
class SpaceTimeField:
    """Complex values on a uniform time grid times the chart grid."""
    times: np.ndarray
    grid: Grid
    values: np.ndarray   # (nt, N, N)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if len(t) > 2 and not np.allclose(np.diff(t), t[1] - t[0], rtol=1e-9, atol=1e-14):
            raise ValueError("time grid must be uniform")
        self.times = t


def discrete_curl(chi: ScalarField) -> OneForm:
    """(D2 chi, -D1 chi): exactly co-closed under the flat discrete codifferential."""
    h = chi.grid.h
    return OneForm(chi.grid, d4(chi.values, 1, h), -d4(chi.values, 0, h))


def oneform_at(A, pts):
    """Covariant components of A (OneForm, callable or None) at chart points."""
    pts = np.asarray(pts, dtype=float)
    if A is None:
        return np.zeros(pts.shape)
    if callable(A):
        return np.asarray(A(pts), dtype=float)
    return np.stack([Interpolator(A.grid, A.a1)(pts), Interpolator(A.grid, A.a2)(pts)], axis=-1)


def as_oneform(A, grid: Grid) -> OneForm:
    if A is None:
        return OneForm.zeros(grid)
    if isinstance(A, OneForm):
        return A
    return OneForm.from_function(grid, A, mask=None)


def as_scalar(V, grid: Grid) -> ScalarField:
    if V is None:
        return ScalarField.zeros(grid)
    if isinstance(V, ScalarField):
        return V
    return ScalarField.from_function(grid, V, mask=None)
