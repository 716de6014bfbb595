"""Magnetic Schrodinger forward solver on the unit disk and its DN map.

The Hamiltonian is discretized in divergence form,

    H u = |g|^-1/2 (d_j - i a_j) |g|^1/2 g^jk (d_k - i a_k) u + V u,

on the graph of grid edges.  Each edge carries the weight sqrt|g| g^kk at its
midpoint and the Peierls phase exp(-i int_e a), so W H is Hermitian (W the
diagonal sqrt|g| h^2 mass) and gauge covariant edge by edge.  Edges leaving the
disk are cut at the circle (Shortley-Weller / Gibou style): the cut point carries
the Dirichlet value, the edge weight is divided by the cut fraction.  Mixed
metric terms g^12 use the two diagonals with weights +-g^12 sqrt|g| / 2.

For metrics with trivial edge weights (Euclidean and conformal in 2D) an
optional 4th-order interior correction K - (1/12) sum_axes K_a^H K_a is added,
with K_a the axis second differences restricted to all-interior triples.

Time stepping is Crank-Nicolson for i u_t + H u = F with the boundary lift
averaged over the two time levels.  The DN trace (d_nu - i A(nu)) u is taken at
the cut points whose grid line meets the circle at <= 45 degrees from the normal.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fields as F
from . import geometry as G
from .errors import LinearSolveError, PreconditionError
from .geometry import MetricField

log = logging.getLogger(__name__)

_GL_X = np.array([0.5 - math.sqrt(15) / 10, 0.5, 0.5 + math.sqrt(15) / 10])
_GL_W = np.array([5.0, 8.0, 5.0]) / 18.0
_THETA_MIN = 1e-8


_field_eval = F.oneform_at


def _scalar_eval(V, grid, pts=None):
    if V is None:
        return 0.0
    if callable(V):
        return np.asarray(V(grid.points if pts is None else pts), dtype=float)
    return np.asarray(V.values, dtype=float)


def _line_phase(A, p0, p1):
    """int_{p0}^{p1} a . dl by 3-point Gauss-Legendre."""
    d = p1 - p0
    acc = 0.0
    for s, w in zip(_GL_X, _GL_W):
        a = _field_eval(A, p0 + s * d)
        acc = acc + w * np.sum(a * d, axis=-1)
    return acc


@dataclass
class CutSet:
    """Edges from an interior node to the circle."""
    node: np.ndarray        # interior index
    direction: np.ndarray   # integer offsets (k1, k2)
    theta: np.ndarray       # fraction of the edge inside
    point: np.ndarray       # cut point on the circle
    phi: np.ndarray         # polar angle of the cut point
    weight: np.ndarray      # G / theta (times the diagonal factor)
    phase: np.ndarray       # exp(-i int from node to cut of a)


@dataclass
class DNLayout:
    """Output points of the discrete DN map, sorted by angle."""
    phi: np.ndarray
    point: np.ndarray
    cut_index: np.ndarray      # into the axis CutSet
    stencil_nodes: np.ndarray  # (n, p) interior indices along the inward grid line
    stencil_w: np.ndarray      # (n, p+1) derivative weights, column 0 is the cut value
    e_in: np.ndarray           # inward unit grid direction
    nu: np.ndarray             # outward g-unit normal (contravariant)
    tangent: np.ndarray        # d(point)/d(phi)
    a_nu: np.ndarray           # A(nu) at the cut point
    sigma_w: np.ndarray        # boundary arc-length quadrature weights


class MagneticHamiltonian:
    """Assembled W H = K + boundary lift, on the interior nodes of the unit disk."""

    def __init__(self, m: MetricField, A=None, V=None, grid: F.Grid | None = None, order=2,
                 dn_order=2):
        self.metric = m
        self.grid = grid = grid or F.Grid()
        self.A = A
        self.V = V
        self.order = order
        self.dn_order = dn_order
        N, h = grid.N, grid.h
        inside = grid.mask_M
        self.inside = inside
        self.flat_idx = np.flatnonzero(inside.ravel())
        self.n = len(self.flat_idx)
        lookup = -np.ones(N * N, dtype=int)
        lookup[self.flat_idx] = np.arange(self.n)
        self._lookup = lookup.reshape(N, N)
        I, J = np.nonzero(inside)
        self._ij = (I, J)
        pts = grid.points[I, J]
        self.points = pts

        _, gi, sq = F.metric_on_grid(m, grid)
        self.W = sq[I, J] * h * h
        Vv = _scalar_eval(V, grid)
        self.V_nodes = np.broadcast_to(Vv, (N, N))[I, J] if np.ndim(Vv) else np.full(self.n, float(Vv))

        rows, cols, vals = [], [], []
        diag = np.zeros(self.n, dtype=complex)
        cut_parts = []

        # test whether the mixed term is needed and whether edge weights are trivial
        mid_pts = pts + 0.5 * h * np.array([1.0, 0.0])
        G_test = [self._edge_G(mid_pts, 0), self._edge_G(pts + 0.5 * h * np.array([0.0, 1.0]), 1)]
        self.trivial_weights = all(np.allclose(gt, 1.0, atol=1e-12) for gt in G_test)
        gmix = m.ginv(pts)[..., 0, 1] * m.sqrt_det(pts)
        self.mixed = bool(np.max(np.abs(gmix)) > 1e-14)
        if order == 4 and not self.trivial_weights:
            raise ValueError("4th-order interior correction needs sqrt|g| g^kk = 1 (Euclidean or conformal)")

        dirs = [((1, 0), 1.0, 0), ((0, 1), 1.0, 1)]
        if self.mixed:
            dirs += [((1, 1), 0.5, "+"), ((1, -1), -0.5, "-")]
        for (k1, k2), sign, kind in dirs:
            for s in (1, -1):
                d = (s * k1, s * k2)
                r, c, v, dg, cuts = self._edges(d, kind, sign)
                rows.append(r), cols.append(c), vals.append(v)
                diag += dg
                cut_parts.append(cuts)

        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        K = sp.coo_matrix((vals, (rows, cols)), shape=(self.n, self.n)).tocsr()
        K = K + sp.diags(diag)
        if order == 4:
            K = K - self._fourth_order_correction() / 12.0
        self.K_kin = K.tocsr()
        self.K = (self.K_kin + sp.diags(self.W * self.V_nodes)).tocsr()
        self.cuts = CutSet(*[np.concatenate([getattr(c, f) for c in cut_parts])
                             for f in ("node", "direction", "theta", "point", "phi", "weight", "phase")])
        self.B = sp.csr_matrix((self.cuts.weight * self.cuts.phase,
                                (self.cuts.node, np.arange(len(self.cuts.node)))),
                               shape=(self.n, len(self.cuts.node)))
        self._dn = None
        self._eig = None

    # -- assembly helpers ---------------------------------------------------
    def _edge_G(self, x, kind):
        g = self.metric.ginv(x)
        sq = self.metric.sqrt_det(x)
        if kind in (0, 1):
            return sq * g[..., kind, kind]
        return sq * g[..., 0, 1]

    def _edges(self, d, kind, sign):
        grid = self.grid
        N, h = grid.N, grid.h
        I, J = self._ij
        In, Jn = I + d[0], J + d[1]
        ok = (In >= 0) & (In < N) & (Jn >= 0) & (Jn < N)
        nb = np.full(self.n, -1)
        nb[ok] = self._lookup[In[ok], Jn[ok]]
        x0 = self.points
        dvec = h * np.array(d, dtype=float)
        # regular edges, each pair enters once per row
        reg = nb >= 0
        p0, p1 = x0[reg], x0[reg] + dvec
        Gm = sign * self._edge_G(0.5 * (p0 + p1), kind)
        U = np.exp(-1j * _line_phase(self.A, p0, p1))
        r = np.flatnonzero(reg)
        dg = np.zeros(self.n, dtype=complex)
        dg[r] -= Gm
        # cut edges
        cut = ~reg
        c = np.flatnonzero(cut)
        q0 = x0[cut]
        a = dvec @ dvec
        b = q0 @ dvec
        cc = np.sum(q0 * q0, axis=1) - 1.0
        th = (-b + np.sqrt(b * b - a * cc)) / a
        th = np.maximum(th, _THETA_MIN)
        pc = q0 + th[:, None] * dvec
        pc = pc / np.linalg.norm(pc, axis=1, keepdims=True)
        Gc = sign * self._edge_G(0.5 * (q0 + pc), kind) / th
        Uc = np.exp(-1j * _line_phase(self.A, q0, pc))
        dg[c] -= Gc
        cuts = CutSet(c, np.broadcast_to(np.array(d), (len(c), 2)).copy(), th, pc,
                      np.arctan2(pc[:, 1], pc[:, 0]), Gc, Uc)
        return r, nb[reg], Gm * U, dg, cuts

    def _fourth_order_correction(self):
        """sum over axes of K_a^H K_a, K_a rows only for all-interior triples."""
        h = self.grid.h
        I, J = self._ij
        N = self.grid.N
        out = sp.csr_matrix((self.n, self.n), dtype=complex)
        for e in ((1, 0), (0, 1)):
            lo = self._neighbor(I - e[0], J - e[1])
            hi = self._neighbor(I + e[0], J + e[1])
            t = np.flatnonzero((lo >= 0) & (hi >= 0))
            x0 = self.points[t]
            dv = h * np.array(e, dtype=float)
            U_hi = np.exp(-1j * _line_phase(self.A, x0, x0 + dv))
            U_lo = np.exp(-1j * _line_phase(self.A, x0, x0 - dv))
            k = np.arange(len(t))
            S = sp.coo_matrix((np.concatenate([U_lo, -2 * np.ones(len(t)), U_hi]),
                               (np.concatenate([k, k, k]), np.concatenate([lo[t], t, hi[t]]))),
                              shape=(len(t), self.n)).tocsr()
            out = out + (S.conj().T @ S)
        return out

    def _neighbor(self, I, J):
        N = self.grid.N
        ok = (I >= 0) & (I < N) & (J >= 0) & (J < N)
        out = np.full(len(I), -1)
        out[ok] = self._lookup[I[ok], J[ok]]
        return out

    # -- public -------------------------------------------------------------
    @property
    def delta_A(self) -> F.ScalarField:
        if self.A is None:
            return F.ScalarField.zeros(self.grid)
        A = self.A if isinstance(self.A, F.OneForm) else F.OneForm.from_function(self.grid, self.A, mask=None)
        return F.codifferential(self.metric, A)

    def apply(self, u, f_cut=None):
        """H u at interior nodes; boundary values at the cut points default to zero."""
        y = self.K @ u
        if f_cut is not None:
            y = y + self.B @ f_cut
        return y / self.W

    def to_grid(self, u):
        out = np.zeros((self.grid.N, self.grid.N), dtype=np.result_type(u, complex))
        out[self._ij] = u
        return out

    def from_grid(self, arr):
        return np.asarray(arr)[self._ij]

    def inner(self, u, w):
        return np.sum(self.W * u * np.conj(w))

    def shifted(self, c):
        """Same operator with V + c (no reassembly of the kinetic part)."""
        H = object.__new__(MagneticHamiltonian)
        H.__dict__.update(self.__dict__)
        H.V_nodes = self.V_nodes + c
        H.K = (self.K_kin + sp.diags(self.W * H.V_nodes)).tocsr()
        H._eig = None
        return H

    def dn_layout(self) -> DNLayout:
        if self._dn is None:
            self._dn = self._build_dn_layout()
        return self._dn

    def _build_dn_layout(self):
        cs = self.cuts
        h = self.grid.h
        p = self.dn_order
        axis = (np.abs(cs.direction).sum(axis=1) == 1)
        e = cs.direction.astype(float)
        nrm = cs.point
        good = axis & (np.abs(np.sum(nrm * e, axis=1)) >= 1 / math.sqrt(2) - 1e-12)
        idx = np.flatnonzero(good)
        I, J = self._ij
        nodes, wts, keep = [], [], []
        for c in idx:
            node = cs.node[c]
            d = -cs.direction[c]
            i0, j0 = I[node], J[node]
            th = cs.theta[c]
            skip = 1 if th < 0.25 else 0
            chain, dist = [], []
            for k in range(skip, p + skip):
                ii, jj = i0 + k * d[0], j0 + k * d[1]
                if not (0 <= ii < self.grid.N and 0 <= jj < self.grid.N) or self._lookup[ii, jj] < 0:
                    break
                chain.append(self._lookup[ii, jj])
                dist.append((th + k) * h)
            if len(chain) < p:
                continue
            s = np.concatenate([[0.0], dist])
            # derivative at 0 of the Lagrange interpolant through (s_k, u_k)
            Vm = np.vander(s, increasing=True).T
            rhs = np.zeros(len(s))
            rhs[1] = 1.0
            w = np.linalg.solve(Vm, rhs)
            nodes.append(chain)
            wts.append(w)
            keep.append(c)
        keep = np.array(keep)
        order = np.argsort(cs.phi[keep])
        keep = keep[order]
        nodes = np.array(nodes)[order]
        wts = np.array(wts)[order]
        phi = cs.phi[keep]
        y, nu, _, speed = G.boundary_frame(self.metric, phi, 1.0)
        tangent = np.stack([-np.sin(phi), np.cos(phi)], axis=-1)
        a = _field_eval(self.A, y)
        a_nu = np.sum(a * nu, axis=-1)
        dphi = np.diff(np.concatenate([phi[-1:] - 2 * np.pi, phi, phi[:1] + 2 * np.pi]))
        sigma_w = speed * 0.5 * (dphi[:-1] + dphi[1:])
        e_in = -cs.direction[keep].astype(float)
        return DNLayout(phi, y, keep, nodes, wts, e_in, nu, tangent, a_nu, sigma_w)

    def lowest_eigenvalue(self):
        """Lowest Dirichlet eigenvalue (closest to zero from below) of H with f = 0."""
        if self._eig is None:
            s = 1 / np.sqrt(self.W)
            M = sp.diags(s) @ self.K @ sp.diags(s)
            M = M.astype(complex) if np.iscomplexobj(M.data) else M
            vals = spla.eigsh(M.tocsc(), k=1, sigma=0.0, which="LM", return_eigenvectors=False)
            self._eig = float(np.real(vals[0]))
        return self._eig


def assemble_hamiltonian(m: MetricField, A=None, V=None, grid: F.Grid | None = None, order=2,
                         dn_order=2) -> MagneticHamiltonian:
    return MagneticHamiltonian(m, A, V, grid, order=order, dn_order=dn_order)


# ---------------------------------------------------------------------------
# boundary data


class BoundaryData:
    """Dirichlet data f(t, phi) on the lateral boundary, phi the polar angle of the circle."""

    def __init__(self, fun, dphi_fun=None):
        self.fun = fun
        self.dphi_fun = dphi_fun

    def __call__(self, t, phi):
        return np.asarray(self.fun(t, phi), dtype=complex)

    def dphi(self, t, phi, eps=1e-3):
        if self.dphi_fun is not None:
            return np.asarray(self.dphi_fun(t, phi), dtype=complex)
        f = self.fun
        return (f(t, phi - 2 * eps) - 8 * f(t, phi - eps) + 8 * f(t, phi + eps) - f(t, phi + 2 * eps)) / (12 * eps)

    @classmethod
    def zero(cls):
        return cls(lambda t, phi: np.zeros(np.shape(phi), dtype=complex),
                   lambda t, phi: np.zeros(np.shape(phi), dtype=complex))

    @classmethod
    def from_samples(cls, times, values):
        """Uniform-angle samples values[n, k] at phi_k = 2 pi k / K, trigonometric in phi, linear in t."""
        times = np.asarray(times, dtype=float)
        vals = np.asarray(values, dtype=complex)
        K = vals.shape[1]
        coef = np.fft.fft(vals, axis=1) / K
        freq = np.fft.fftfreq(K, 1.0 / K)
        if K % 2 == 0:
            coef[:, K // 2] *= 0.5
            coef = np.concatenate([coef, coef[:, K // 2:K // 2 + 1]], axis=1)
            freq = np.concatenate([freq, [K / 2]])

        def row(t):
            j = np.clip(np.searchsorted(times, t) - 1, 0, len(times) - 2)
            w = np.clip((t - times[j]) / (times[j + 1] - times[j]), 0, 1)
            return (1 - w) * coef[j] + w * coef[j + 1]

        def f(t, phi):
            return np.exp(1j * np.multiply.outer(phi, freq)) @ row(t)

        def df(t, phi):
            return np.exp(1j * np.multiply.outer(phi, freq)) @ (1j * freq * row(t))

        return cls(f, df)


@dataclass
class DNTrace:
    times: np.ndarray
    phi: np.ndarray
    values: np.ndarray      # (nt, n_points)
    sigma_w: np.ndarray     # arc-length weights
    dt: float

    def time_weights(self):
        w = np.full(len(self.times), self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def pair(self, h_vals):
        """int int conj(h) * Lambda f, h sampled at the same (t, phi) points."""
        return np.sum(np.conj(h_vals) * self.values * self.time_weights()[:, None] * self.sigma_w[None, :])

    def l2(self):
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2 * self.time_weights()[:, None]
                                    * self.sigma_w[None, :])))


@dataclass
class IBVPResult:
    times: np.ndarray
    field: F.SpaceTimeField | None
    final: np.ndarray
    dn: DNTrace | None = None
    norms: np.ndarray | None = None


def _time_grid(T, dt):
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise PreconditionError(f"window T={T} is not a multiple of dt={dt}")
    return np.arange(n + 1) * dt, n


def _factor(M):
    try:
        return spla.splu(M.tocsc())
    except RuntimeError as exc:
        raise LinearSolveError(f"Crank-Nicolson factorization failed: {exc}") from exc


_LU_CACHE: dict = {}


def _cn_factor(H: MagneticHamiltonian, dt):
    key = (id(H), float(dt))
    hit = _LU_CACHE.get(key)
    if hit is not None and hit[0] is H:
        return hit[1]
    Lm = sp.diags(H.W.astype(complex)) - 0.5j * dt * H.K
    lu = _factor(Lm)
    if len(_LU_CACHE) > 8:
        _LU_CACHE.pop(next(iter(_LU_CACHE)))
    _LU_CACHE[key] = (H, lu)
    return lu


def solve_ibvp(H: MagneticHamiltonian, f=None, T=1.0, dt=None, u0=None, source=None,
               record="full", record_every=1, dn=False, compat_tol=1e-8) -> IBVPResult:
    """Crank-Nicolson for i u_t + H u = F in M, u = f on the boundary, u(0) = u0.

    ``f`` is a BoundaryData (or None for zero data), ``source`` a callable
    F(t, points) at interior nodes, ``u0`` interior values (default zero).
    ``record`` is 'full' (every ``record_every`` steps), 'final' or 'none'.
    With zero initial state the data must satisfy f = f_t = 0 at t = 0 (checked
    on the first two time levels).
    """
    dt = T / 2048 if dt is None else dt
    times, nsteps = _time_grid(T, dt)
    cs = H.cuts
    fb = f if f is not None else None
    if fb is not None:
        fc = np.array([fb(t, cs.phi) for t in times])
        scale = max(float(np.max(np.abs(fc))), 1e-300)
        bad = (np.max(np.abs(fc[0])) > compat_tol * scale
               or np.max(np.abs(fc[1] - fc[0])) > compat_tol * scale)
        if u0 is None and bad:
            raise PreconditionError("boundary data must vanish with its first time difference at t = 0")
    else:
        fc = None

    lay = H.dn_layout() if dn else None
    if dn and fb is not None:
        ft = np.array([fb.dphi(t, lay.phi) for t in times])
    u = np.zeros(H.n, dtype=complex) if u0 is None else np.asarray(u0, dtype=complex).copy()
    lu = _cn_factor(H, dt)
    Rm = sp.diags(H.W.astype(complex)) + 0.5j * dt * H.K

    def lift(n):
        return H.B @ fc[n] if fc is not None else 0.0

    def src(n):
        return H.W * np.asarray(source(times[n], H.points), dtype=complex) if source is not None else 0.0

    frames, ftimes = [], []
    dn_vals = []
    norms = np.empty(nsteps + 1)

    def capture(n):
        norms[n] = math.sqrt(abs(H.inner(u, u)))
        if record == "full" and n % record_every == 0:
            frames.append(H.to_grid(u))
            ftimes.append(times[n])
        if dn:
            fcut = fc[n][lay.cut_index] if fc is not None else np.zeros(len(lay.phi), dtype=complex)
            dft = ft[n] if fb is not None else np.zeros(len(lay.phi), dtype=complex)
            dn_vals.append(_dn_eval(lay, u, fcut, dft))

    capture(0)
    b_old, s_old = lift(0), src(0)
    for n in range(1, nsteps + 1):
        b_new, s_new = lift(n), src(n)
        rhs = Rm @ u + 0.5j * dt * (b_old + b_new) - 0.5j * dt * (s_old + s_new)
        u = lu.solve(rhs)
        if not np.all(np.isfinite(u)):
            raise LinearSolveError(f"non-finite solution at step {n}")
        b_old, s_old = b_new, s_new
        capture(n)

    field_out = None
    if record == "full":
        field_out = F.SpaceTimeField(np.array(ftimes), H.grid, np.array(frames))
    trace = None
    if dn:
        trace = DNTrace(times, lay.phi, np.array(dn_vals), lay.sigma_w, dt)
    return IBVPResult(times, field_out, u, trace, norms)


def _dn_eval(lay: DNLayout, u, fcut, df_dphi):
    """(d_nu - i A(nu)) u at the layout points."""
    D_in = lay.stencil_w[:, 0] * fcut + np.sum(lay.stencil_w[:, 1:] * u[lay.stencil_nodes], axis=1)
    # du . e_in = D_in, du . tangent = df/dphi; solve the 2x2 system for du
    a11, a12 = lay.e_in[:, 0], lay.e_in[:, 1]
    a21, a22 = lay.tangent[:, 0], lay.tangent[:, 1]
    det = a11 * a22 - a12 * a21
    du1 = (D_in * a22 - a12 * df_dphi) / det
    du2 = (a11 * df_dphi - a21 * D_in) / det
    dnu = du1 * lay.nu[:, 0] + du2 * lay.nu[:, 1]
    return dnu - 1j * lay.a_nu * fcut


class DNOperator:
    """f -> (d_nu - i A(nu)) u on (0, T) x boundary, for one Hamiltonian."""

    def __init__(self, H: MagneticHamiltonian, T=1.0, dt=None):
        self.H = H
        self.T = T
        self.dt = T / 2048 if dt is None else dt

    @property
    def layout(self):
        return self.H.dn_layout()

    @property
    def times(self):
        return _time_grid(self.T, self.dt)[0]

    def apply(self, f) -> DNTrace:
        if f is None:
            times = self.times
            lay = self.layout
            return DNTrace(times, lay.phi, np.zeros((len(times), len(lay.phi)), dtype=complex),
                           lay.sigma_w, self.dt)
        return solve_ibvp(self.H, f, self.T, self.dt, record="none", dn=True).dn

    __call__ = apply


def dn_apply(H: MagneticHamiltonian, f, T=1.0, dt=None) -> DNTrace:
    return DNOperator(H, T, dt).apply(f)


def h21_norm(f: BoundaryData, T, dt, n_phi=256):
    """Discrete H^{2,1} norm on (0,T) x circle: L2 of f, f_t, f_phi, f_phiphi (arc length of the unit circle)."""
    times, _ = _time_grid(T, dt)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    vals = np.array([f(t, phi) for t in times])
    k = np.fft.fftfreq(n_phi, 1.0 / n_phi)
    fh = np.fft.fft(vals, axis=1)
    d1 = np.fft.ifft(1j * k * fh, axis=1)
    d2 = np.fft.ifft(-(k ** 2) * fh, axis=1)
    ft = np.gradient(vals, dt, axis=0)
    w = np.full(len(times), dt)
    w[0] = w[-1] = dt / 2
    dA = 2 * np.pi / n_phi
    tot = sum(np.sum(np.abs(q) ** 2 * w[:, None]) * dA for q in (vals, d1, d2, ft))
    return float(np.sqrt(tot))
