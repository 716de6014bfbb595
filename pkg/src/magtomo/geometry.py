"""Riemannian geometry on a single disk chart.

M is the unit disk, M1 the enlarged disk of radius ``chart_radius`` (1.3 by
default).  Geodesics are integrated with batched classical RK4 on
(x, theta), theta renormalised to unit g-length after every step.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .errors import (
    ConfigError,
    DomainError,
    NonTrappingError,
    OutOfManifoldError,
    ShootingError,
)

log = logging.getLogger(__name__)

M_RADIUS = 1.0
M1_RADIUS = 1.3
STEP_BUDGET = 10**6


# ---------------------------------------------------------------------------
# metrics


def _inv2(a):
    det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    out = np.empty_like(a)
    out[..., 0, 0] = a[..., 1, 1] / det
    out[..., 1, 1] = a[..., 0, 0] / det
    out[..., 0, 1] = -a[..., 0, 1] / det
    out[..., 1, 0] = -a[..., 1, 0] / det
    return out


def _det2(a):
    return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]


class MetricField:
    """Base class.  Subclasses provide ``g`` and ``dg`` (dg[..., l, i, j] = d_l g_ij)."""

    chart_radius: float = M1_RADIUS
    is_flat = False
    is_conformal = False
    mode = "analytic"

    def g(self, x):
        raise NotImplementedError

    def dg(self, x):
        raise NotImplementedError

    def ginv(self, x):
        return _inv2(self.g(x))

    def sqrt_det(self, x):
        return np.sqrt(_det2(self.g(x)))

    def christoffel(self, x):
        """Gamma[..., k, i, j] = Gamma^k_ij, no domain check."""
        x = np.asarray(x, dtype=float)
        d = self.dg(x)
        gi = self.ginv(x)
        # lowered: G_lij = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
        low = 0.5 * (np.einsum("...ijl->...lij", d) + np.einsum("...jil->...lij", d) - d)
        return np.einsum("...kl,...lij->...kij", gi, low)

    def accel(self, x, th):
        gam = self.christoffel(x)
        return -np.einsum("...kij,...i,...j->...k", gam, th, th)

    def norm(self, x, v):
        g = self.g(x)
        return np.sqrt(np.einsum("...i,...ij,...j->...", v, g, v))

    def inner(self, x, u, v):
        return np.einsum("...i,...ij,...j->...", u, self.g(x), v)

    def curvature(self, x, step=1e-3):
        """Gaussian curvature from finite differences of the Christoffel symbols."""
        x = np.asarray(x, dtype=float)
        e1 = np.array([step, 0.0])
        e2 = np.array([0.0, step])

        def d(f, e):
            return (-f(x + 2 * e) + 8 * f(x + e) - 8 * f(x - e) + f(x - 2 * e)) / (12 * step)

        gam = self.christoffel(x)
        d1 = d(self.christoffel, e1)
        d2 = d(self.christoffel, e2)
        # R(d1,d2)d2 = (d1 G^l_22 - d2 G^l_12 + G^m_22 G^l_1m - G^m_12 G^l_2m) d_l
        r = (d1[..., :, 1, 1] - d2[..., :, 0, 1]
             + np.einsum("...m,...lm->...l", gam[..., :, 1, 1], gam[..., :, 0, :])
             - np.einsum("...m,...lm->...l", gam[..., :, 0, 1], gam[..., :, 1, :]))
        g = self.g(x)
        return np.einsum("...l,...l->...", g[..., 0, :], r) / _det2(g)

    def key(self):
        return (type(self).__name__, id(self))


class EuclideanMetric(MetricField):
    is_flat = True

    def __init__(self, chart_radius=M1_RADIUS):
        self.chart_radius = float(chart_radius)

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (2, 2, 2))

    def christoffel(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (2, 2, 2))

    def accel(self, x, th):
        return np.zeros_like(th)

    def curvature(self, x, step=None):
        return np.zeros(np.asarray(x).shape[:-1])

    def key(self):
        return ("euclidean", self.chart_radius)


class ConformalMetric(MetricField):
    """g = exp(2u) * identity with analytic u, grad u and Laplacian of u."""

    is_conformal = True

    def __init__(self, u, grad_u, lap_u, chart_radius=M1_RADIUS, params=None):
        self.u = u
        self.grad_u = grad_u
        self.lap_u = lap_u
        self.chart_radius = float(chart_radius)
        self.params = params

    def g(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(2 * self.u(x))[..., None, None] * np.eye(2)

    def ginv(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(-2 * self.u(x))[..., None, None] * np.eye(2)

    def sqrt_det(self, x):
        return np.exp(2 * self.u(np.asarray(x, dtype=float)))

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        e = np.exp(2 * self.u(x))
        du = self.grad_u(x)
        return (2 * e)[..., None, None, None] * du[..., :, None, None] * np.eye(2)

    def christoffel(self, x):
        x = np.asarray(x, dtype=float)
        du = self.grad_u(x)
        eye = np.eye(2)
        # G^k_ij = d_ik u_j + d_jk u_i - d_ij u_k
        return (np.einsum("ki,...j->...kij", eye, du) + np.einsum("kj,...i->...kij", eye, du)
                - np.einsum("ij,...k->...kij", eye, du))

    def accel(self, x, th):
        du = self.grad_u(x)
        dot = np.sum(du * th, axis=-1)[..., None]
        nn = np.sum(th * th, axis=-1)[..., None]
        return -(2 * th * dot - du * nn)

    def norm(self, x, v):
        return np.exp(self.u(x)) * np.sqrt(np.sum(v * v, axis=-1))

    def curvature(self, x, step=None):
        x = np.asarray(x, dtype=float)
        return -np.exp(-2 * self.u(x)) * self.lap_u(x)

    def key(self):
        if self.params is not None:
            return ("conformal",) + tuple(self.params) + (self.chart_radius,)
        return ("conformal", id(self))


def conformal_bump(amplitude, b=4.0, center=(0.0, 0.0), chart_radius=M1_RADIUS):
    """g = (1 + a exp(-b|x-c|^2)) * identity."""
    a = float(amplitude)
    b = float(b)
    c = np.asarray(center, dtype=float)

    def w(x):
        r2 = np.sum((x - c) ** 2, axis=-1)
        return a * np.exp(-b * r2)

    def u(x):
        return 0.5 * np.log1p(w(x))

    def grad_u(x):
        ww = w(x)
        gw = -2 * b * (x - c) * ww[..., None]
        return gw / (2 * (1 + ww))[..., None]

    def lap_u(x):
        ww = w(x)
        r2 = np.sum((x - c) ** 2, axis=-1)
        lw = (4 * b * b * r2 - 4 * b) * ww
        gw2 = 4 * b * b * r2 * ww * ww
        return 0.5 * (lw / (1 + ww) - gw2 / (1 + ww) ** 2)

    return ConformalMetric(u, grad_u, lap_u, chart_radius,
                           params=("bump", a, b, float(c[0]), float(c[1])))


def conformal_linear(c1, c2=0.0, chart_radius=M1_RADIUS):
    """g = exp(2 (c1 x1 + c2 x2)) * identity."""
    cv = np.array([c1, c2], dtype=float)

    def u(x):
        return x @ cv

    def grad_u(x):
        return np.broadcast_to(cv, np.shape(x)).copy()

    def lap_u(x):
        return np.zeros(np.shape(x)[:-1])

    return ConformalMetric(u, grad_u, lap_u, chart_radius, params=("linear", float(c1), float(c2)))


class CallbackMetric(MetricField):
    """Metric given by a callback x -> g(x); derivatives by 4th-order differences."""

    def __init__(self, gfun: Callable, chart_radius=M1_RADIUS, fd_step=1e-4):
        self.gfun = gfun
        self.chart_radius = float(chart_radius)
        self.fd_step = fd_step

    def g(self, x):
        return np.asarray(self.gfun(np.asarray(x, dtype=float)), dtype=float)

    def dg(self, x):
        x = np.asarray(x, dtype=float)
        s = self.fd_step
        out = []
        for e in (np.array([s, 0.0]), np.array([0.0, s])):
            out.append((-self.g(x + 2 * e) + 8 * self.g(x + e) - 8 * self.g(x - e)
                        + self.g(x - 2 * e)) / (12 * s))
        return np.stack(out, axis=-3)


class GridMetric(CallbackMetric):
    """Metric sampled on a uniform grid, bicubic spline interpolation per component."""

    mode = "grid"

    def __init__(self, x1, x2, g11, g12, g22, chart_radius=M1_RADIUS, fd_step=None):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        if min(-x1[0], x1[-1], -x2[0], x2[-1]) < chart_radius:
            raise ConfigError("metric grid does not cover the chart disk")
        for comp in (g11, g22):
            if np.any(np.asarray(comp) <= 0):
                raise ConfigError("metric grid has non-positive diagonal entries")
        if np.any(np.asarray(g11) * np.asarray(g22) - np.asarray(g12) ** 2 <= 0):
            raise ConfigError("metric grid is not positive definite")
        self._sp = [RectBivariateSpline(x1, x2, np.asarray(c, dtype=float), kx=3, ky=3)
                    for c in (g11, g12, g22)]
        hx = x1[1] - x1[0]
        super().__init__(self._eval, chart_radius, fd_step or hx / 8)

    def _eval(self, x):
        shp = x.shape[:-1]
        p = x.reshape(-1, 2)
        c = [sp.ev(p[:, 0], p[:, 1]) for sp in self._sp]
        g = np.empty((p.shape[0], 2, 2))
        g[:, 0, 0] = c[0]
        g[:, 0, 1] = g[:, 1, 0] = c[1]
        g[:, 1, 1] = c[2]
        return g.reshape(shp + (2, 2))

    @classmethod
    def from_csv(cls, path, chart_radius=M1_RADIUS):
        try:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read metric file {path}: {exc}") from exc
        need = ["x1", "x2", "g11", "g12", "g22"]
        if not rows or any(k not in rows[0] for k in need):
            raise ConfigError(f"metric file {path} needs header {','.join(need)}")
        arr = np.array([[float(r[k]) for k in need] for r in rows])
        x1 = np.unique(arr[:, 0])
        x2 = np.unique(arr[:, 1])
        if len(x1) * len(x2) != len(arr):
            raise ConfigError(f"metric file {path} is not a full tensor grid")
        order = np.lexsort((arr[:, 1], arr[:, 0]))
        arr = arr[order]
        shape = (len(x1), len(x2))
        return cls(x1, x2, arr[:, 2].reshape(shape), arr[:, 3].reshape(shape),
                   arr[:, 4].reshape(shape), chart_radius)


def sample_metric_grid(m: MetricField, n=65, extent=None):
    """Grid samples of a metric, handy for writing metric CSV files."""
    extent = extent or m.chart_radius * 1.1
    x = np.linspace(-extent, extent, n)
    X = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1)
    g = m.g(X)
    return x, x, g[..., 0, 0], g[..., 0, 1], g[..., 1, 1]


def christoffel(m: MetricField, x):
    """Christoffel symbols Gamma[k, i, j] at chart points strictly inside the chart."""
    x = np.asarray(x, dtype=float)
    if np.any(np.sum(x * x, axis=-1) >= m.chart_radius ** 2):
        raise DomainError("christoffel evaluated outside the chart disk")
    return m.christoffel(x)


# ---------------------------------------------------------------------------
# phase space types


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    theta: np.ndarray


@dataclass
class Geodesic:
    x: np.ndarray          # (n+1, 2) positions
    theta: np.ndarray      # (n+1, 2) unit velocities
    h: float               # uniform parameter spacing
    tau_plus: float
    tau_minus: float
    max_drift: float = 0.0

    @property
    def samples(self):
        return [PhasePoint(a, b) for a, b in zip(self.x, self.theta)]

    @property
    def t(self):
        return self.h * np.arange(len(self.x))


# ---------------------------------------------------------------------------
# integrators


def _renorm(m, x, th):
    if m.is_flat:
        return th, 0.0
    nrm = m.norm(x, th)
    drift = float(np.max(np.abs(nrm - 1.0))) if nrm.size else 0.0
    return th / nrm[..., None], drift


def _rk4(m, x, th, h):
    hh = np.asarray(h, dtype=float)
    if hh.ndim:
        hh = hh[:, None]
    k1t = m.accel(x, th)
    k2x = th + 0.5 * hh * k1t
    k2t = m.accel(x + 0.5 * hh * th, k2x)
    k3x = th + 0.5 * hh * k2t
    k3t = m.accel(x + 0.5 * hh * k2x, k3x)
    k4x = th + hh * k3t
    k4t = m.accel(x + hh * k3x, k4x)
    xn = x + hh / 6 * (th + 2 * k2x + 2 * k3x + k4x)
    thn = th + hh / 6 * (k1t + 2 * k2t + 2 * k3t + k4t)
    return xn, thn


def _rk4_jacobi(m, x, th, j, jd, h):
    """RK4 on the geodesic plus the scalar Jacobi equation j'' + K j = 0."""
    hh = np.asarray(h, dtype=float)
    hv = hh[:, None] if hh.ndim else hh

    def rhs(x_, th_, j_, jd_):
        return th_, m.accel(x_, th_), jd_, -m.curvature(x_) * j_

    a = rhs(x, th, j, jd)
    b = rhs(x + 0.5 * hv * a[0], th + 0.5 * hv * a[1], j + 0.5 * hh * a[2], jd + 0.5 * hh * a[3])
    c = rhs(x + 0.5 * hv * b[0], th + 0.5 * hv * b[1], j + 0.5 * hh * b[2], jd + 0.5 * hh * b[3])
    d = rhs(x + hv * c[0], th + hv * c[1], j + hh * c[2], jd + hh * c[3])
    xn = x + hv / 6 * (a[0] + 2 * b[0] + 2 * c[0] + d[0])
    thn = th + hv / 6 * (a[1] + 2 * b[1] + 2 * c[1] + d[1])
    jn = j + hh / 6 * (a[2] + 2 * b[2] + 2 * c[2] + d[2])
    jdn = jd + hh / 6 * (a[3] + 2 * b[3] + 2 * c[3] + d[3])
    return xn, thn, jn, jdn


def _euclid_exit(x, th, radius):
    b = np.sum(x * th, axis=-1)
    c = np.sum(x * x, axis=-1) - radius ** 2
    disc = np.maximum(b * b - c, 0.0)
    return np.maximum(-b + np.sqrt(disc), 0.0)


def _locate_exit(m, x0, th0, s_hi, radius, jac=None, max_iter=100):
    """Root of |x(s)|^2 - R^2 on (0, s_hi] by Illinois regula falsi.

    ``x(s)`` is one RK4 substep of size s from the state at the start of the step.
    """
    r2 = radius ** 2
    n = len(x0)
    lo = np.zeros(n)
    hi = np.full(n, float(s_hi)) if np.ndim(s_hi) == 0 else np.asarray(s_hi, dtype=float).copy()
    flo = np.minimum(np.sum(x0 * x0, axis=-1) - r2, 0.0)

    def state(s):
        if jac is None:
            return _rk4(m, x0, th0, s)
        return _rk4_jacobi(m, x0, th0, jac[0], jac[1], s)

    fhi = np.sum(state(hi)[0] ** 2, axis=-1) - r2
    side = np.zeros(n, dtype=int)
    s = hi.copy()
    done = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        den = fhi - flo
        cand = np.where(den > 0, lo - flo * (hi - lo) / np.where(den > 0, den, 1.0), 0.5 * (lo + hi))
        bad = ~((cand > lo) & (cand < hi))
        cand[bad] = 0.5 * (lo + hi)[bad]
        s = np.where(done, s, cand)
        fs = np.sum(state(s)[0] ** 2, axis=-1) - r2
        right = fs > 0
        new_done = (np.abs(fs) < 1e-14 * r2) | (hi - lo < 1e-12)
        upd = ~done
        # Illinois: halve the stale endpoint's value when the same side is replaced twice
        hi = np.where(upd & right, s, hi)
        flo = np.where(upd & right & (side == 1), 0.5 * flo, flo)
        fhi = np.where(upd & right, fs, fhi)
        lo = np.where(upd & ~right, s, lo)
        fhi = np.where(upd & ~right & (side == -1), 0.5 * fhi, fhi)
        flo = np.where(upd & ~right, fs, flo)
        side = np.where(upd, np.where(right, 1, -1), side)
        done |= new_done
        if done.all():
            break
    return s, state(s)


@dataclass
class FlowResult:
    x: np.ndarray
    theta: np.ndarray
    tau: np.ndarray
    j: np.ndarray | None = None
    jd: np.ndarray | None = None
    min_j: np.ndarray | None = None
    max_drift: float = 0.0


def flow_to_boundary(m: MetricField, x, th, radius=M_RADIUS, h=0.01, jacobi=False,
                     max_steps=STEP_BUDGET) -> FlowResult:
    """Batched flow of (x, theta) until |x| = radius.

    Returns exit states and exit times.  With ``jacobi`` the scalar Jacobi field
    j(0)=0, j'(0)=1 is carried along and its running minimum over t>0 recorded.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    th = np.atleast_2d(np.asarray(th, dtype=float))
    n = len(x)
    if np.any(np.sum(x * x, axis=-1) > radius ** 2 * (1 + 1e-9)):
        raise DomainError("flow started outside the disk")
    if m.is_flat and not jacobi:
        tau = _euclid_exit(x, th, radius)
        return FlowResult(x + tau[:, None] * th, th.copy(), tau)

    out_x = np.empty_like(x)
    out_th = np.empty_like(th)
    out_t = np.empty(n)
    out_j = np.empty(n) if jacobi else None
    out_jd = np.empty(n) if jacobi else None
    out_min = np.full(n, np.inf) if jacobi else None
    idx = np.arange(n)
    cx, cth = x.copy(), th.copy()
    cj = np.zeros(n)
    cjd = np.ones(n)
    cmin = np.full(n, np.inf)
    t = np.zeros(n)
    drift = 0.0
    steps = 0
    r2 = radius ** 2
    while idx.size:
        if steps >= max_steps:
            raise NonTrappingError(f"{idx.size} geodesics still inside after {max_steps} steps")
        if jacobi:
            xn, thn, jn, jdn = _rk4_jacobi(m, cx, cth, cj, cjd, h)
        else:
            xn, thn = _rk4(m, cx, cth, h)
        thn, dr = _renorm(m, xn, thn)
        drift = max(drift, dr)
        cross = np.sum(xn * xn, axis=-1) - r2 > 0
        if cross.any():
            ci = np.flatnonzero(cross)
            jac = (cj[ci], cjd[ci]) if jacobi else None
            s, st = _locate_exit(m, cx[ci], cth[ci], h, radius, jac)
            tgt = idx[ci]
            out_x[tgt] = st[0]
            out_th[tgt], _ = _renorm(m, st[0], st[1])
            out_t[tgt] = t[ci] + s
            if jacobi:
                out_j[tgt] = st[2]
                out_jd[tgt] = st[3]
                out_min[tgt] = np.minimum(cmin[ci], st[2])
        keep = ~cross
        idx = idx[keep]
        cx, cth, t = xn[keep], thn[keep], t[keep] + h
        if jacobi:
            cmin = np.minimum(cmin[keep], jn[keep])
            cj, cjd = jn[keep], jdn[keep]
        steps += 1
    if drift > 1e-9:
        log.debug("unit-speed drift before renormalisation: %.3e", drift)
    return FlowResult(out_x, out_th, out_t, out_j, out_jd, out_min, drift)


@dataclass
class RayBundle:
    """Uniformly sampled geodesics, all with the same sample count (n+1)."""
    x: np.ndarray       # (nr, n+1, 2)
    theta: np.ndarray   # (nr, n+1, 2)
    step: np.ndarray    # (nr,)
    tau: np.ndarray     # (nr,)

    def simpson_weights(self):
        n = self.x.shape[1] - 1
        w = np.ones(n + 1)
        w[1:-1:2] = 4
        w[2:-1:2] = 2
        return self.step[:, None] * w[None, :] / 3.0


def trace_rays(m: MetricField, x, th, radius=M_RADIUS, h=0.01) -> RayBundle:
    """Exit times first, then a second pass with per-ray step tau/n (n even)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    th = np.atleast_2d(np.asarray(th, dtype=float))
    fl = flow_to_boundary(m, x, th, radius, h)
    tau = fl.tau
    n = max(2, 2 * int(math.ceil(tau.max() / (2 * h)))) if len(tau) else 2
    step = tau / n
    if m.is_flat:
        t = step[:, None] * np.arange(n + 1)[None, :]
        X = x[:, None, :] + t[..., None] * th[:, None, :]
        TH = np.broadcast_to(th[:, None, :], X.shape).copy()
        return RayBundle(X, TH, step, tau)
    X = np.empty((len(x), n + 1, 2))
    TH = np.empty_like(X)
    cx, cth = x.copy(), th.copy()
    X[:, 0], TH[:, 0] = cx, cth
    for k in range(n):
        cx, cth = _rk4(m, cx, cth, step)
        cth, _ = _renorm(m, cx, cth)
        X[:, k + 1], TH[:, k + 1] = cx, cth
    return RayBundle(X, TH, step, tau)


def _on_boundary(x, radius):
    return abs(math.hypot(x[0], x[1]) - radius) <= 1e-12 * radius


def integrate_geodesic(m: MetricField, p: PhasePoint, h=0.01, radius=M_RADIUS) -> Geodesic:
    """Uniformly sampled geodesic from p to its forward exit of the disk of ``radius``."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(p.x, dtype=float)
    th = np.asarray(p.theta, dtype=float)
    nrm = float(m.norm(x, th))
    th = th / nrm
    if _on_boundary(x, radius):
        nu = x / np.linalg.norm(x)
        if float(m.inner(x, th, m.ginv(x) @ nu)) >= 0:
            raise DomainError("boundary start point needs an inward direction")
    fl = flow_to_boundary(m, x[None], th[None], radius, h)
    tau = float(fl.tau[0])
    n = max(2, 2 * int(math.ceil(tau / (2 * h))))
    he = tau / n
    xs = np.empty((n + 1, 2))
    ts = np.empty((n + 1, 2))
    cx, cth = x[None].copy(), th[None].copy()
    xs[0], ts[0] = cx[0], cth[0]
    drift = 0.0
    if m.is_flat:
        tt = he * np.arange(n + 1)
        xs = x[None] + tt[:, None] * th[None]
        ts = np.broadcast_to(th, xs.shape).copy()
    else:
        for k in range(n):
            cx, cth = _rk4(m, cx, cth, he)
            cth, dr = _renorm(m, cx, cth)
            drift = max(drift, dr)
            xs[k + 1], ts[k + 1] = cx[0], cth[0]
    if _on_boundary(x, radius):
        tau_minus = 0.0
    else:
        tau_minus = -float(flow_to_boundary(m, x[None], -th[None], radius, h).tau[0])
    return Geodesic(xs, ts, he, tau, tau_minus, max(drift, fl.max_drift))


def exit_times(m: MetricField, x, th, radius=M_RADIUS, h=0.01):
    """(tau_plus, tau_minus) for batches of interior phase points."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    th = np.atleast_2d(np.asarray(th, dtype=float))
    tp = flow_to_boundary(m, x, th, radius, h).tau
    tm = -flow_to_boundary(m, x, -th, radius, h).tau
    return tp, tm


def exp_map(m: MetricField, y, v, h=0.005):
    """gamma_{y, v/|v|}(|v|); raises if the curve leaves the chart disk first."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    length = float(m.norm(y, v))
    if length == 0.0:
        return y.copy()
    th = (v / length)[None]
    n = max(1, int(math.ceil(length / h)))
    he = length / n
    cx = y[None].copy()
    if m.is_flat:
        out = y + length * th[0]
        if np.hypot(*out) > m.chart_radius and _chord_leaves(y, th[0], length, m.chart_radius):
            raise OutOfManifoldError("exponential map leaves the chart")
        return out
    for _ in range(n):
        cx, th = _rk4(m, cx, th, he)
        th, _ = _renorm(m, cx, th)
        if np.sum(cx * cx) > m.chart_radius ** 2:
            raise OutOfManifoldError("exponential map leaves the chart")
    return cx[0]


def _chord_leaves(y, th, length, radius):
    t = np.linspace(0, length, 257)
    p = y[None] + t[:, None] * th[None]
    return bool(np.any(np.sum(p * p, axis=-1) > radius ** 2))


# ---------------------------------------------------------------------------
# distance function by shooting


def rotated_normal(m: MetricField, x, v):
    """Positively oriented g-unit normal to a g-unit vector v."""
    g = m.g(x)
    rot = np.empty_like(g)
    rot[..., 0, 0] = -g[..., 0, 1]
    rot[..., 0, 1] = -g[..., 1, 1]
    rot[..., 1, 0] = g[..., 0, 0]
    rot[..., 1, 1] = g[..., 0, 1]
    return np.einsum("...ij,...j->...i", rot, v) / np.sqrt(_det2(g))[..., None]


def source_frame(m: MetricField, y):
    """Matrix F with theta(phi) = F @ (cos phi, sin phi) parametrising S_y isometrically."""
    L = np.linalg.cholesky(m.g(np.asarray(y, dtype=float)))
    return np.linalg.inv(L).T


@dataclass
class ShootResult:
    psi: np.ndarray      # geodesic distance d_g(y, x)
    grad: np.ndarray     # gamma-dot at x (unit in g), the gradient vector of psi
    angle: np.ndarray    # initial angle phi at y in the source frame
    jacobi: np.ndarray   # j(psi); rho = j^2 is the polar volume density
    iterations: int = 0


def distance_and_gradient(m: MetricField, y, x, h=0.005, tol=1e-8, max_iter=50) -> ShootResult:
    """Distance from y and its gradient at the points x by Newton shooting on (angle, length)."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    d = x - y[None]
    if m.is_flat:
        psi = np.linalg.norm(d, axis=-1)
        grad = d / psi[:, None]
        res = ShootResult(psi, grad, np.arctan2(d[:, 1], d[:, 0]), psi.copy(), 0)
        return _squeeze(res) if single else res
    F = source_frame(m, y)
    Finv = np.linalg.inv(F)
    v = d @ Finv.T
    phi = np.arctan2(v[:, 1], v[:, 0])
    L = np.linalg.norm(v, axis=-1)
    n_pts = len(x)
    out_th = np.empty((n_pts, 2))
    out_j = np.empty(n_pts)
    todo = np.arange(n_pts)
    it = 0
    for it in range(1, max_iter + 1):
        ph, ll = phi[todo], L[todo]
        xe, the, je = _shoot(m, y, F, ph, ll, h)
        res = xe - x[todo]
        err = np.linalg.norm(res, axis=-1)
        ok = err < tol
        out_th[todo[ok]] = the[ok]
        out_j[todo[ok]] = je[ok]
        bad = ~ok
        if not bad.any():
            todo = todo[:0]
            break
        nrm = rotated_normal(m, xe[bad], the[bad])
        J = np.stack([je[bad, None] * nrm, the[bad]], axis=-1)
        step = -np.linalg.solve(J, res[bad][..., None])[..., 0]
        dphi = np.clip(step[:, 0], -0.3, 0.3)
        dl = np.maximum(step[:, 1], -0.5 * ll[bad])
        tb = todo[bad]
        phi[tb] += dphi
        L[tb] += dl
        todo = tb
    if todo.size:
        raise ShootingError(f"shooting did not converge for {todo.size} points in {max_iter} iterations")
    res = ShootResult(L, out_th, phi, out_j, it)
    return _squeeze(res) if single else res


def _squeeze(r):
    return ShootResult(float(r.psi[0]), r.grad[0], float(r.angle[0]), float(r.jacobi[0]), r.iterations)


def _shoot(m, y, F, phi, length, h):
    n = max(2, int(math.ceil(length.max() / h)))
    step = length / n
    th = np.stack([np.cos(phi), np.sin(phi)], axis=-1) @ F.T
    x = np.broadcast_to(y, th.shape).copy()
    j = np.zeros(len(phi))
    jd = np.ones(len(phi))
    for _ in range(n):
        x, th, j, jd = _rk4_jacobi(m, x, th, j, jd, step)
        th, _ = _renorm(m, x, th)
    return x, th, j


# ---------------------------------------------------------------------------
# boundary fan


@dataclass
class BoundaryRayGrid:
    """Samples over the inward boundary directions of the disk of ``radius``.

    s is Euclidean chart arc length (s = radius * angle), alpha the fan angle
    from the inward normal, alpha nodes at cell midpoints so mu = cos(alpha) > 0.
    ``values`` has shape (n_s, n_alpha) when present.
    """
    n_s: int = 128
    n_alpha: int = 64
    radius: float = M_RADIUS
    values: np.ndarray | None = None

    @property
    def phi_nodes(self):
        return 2 * np.pi * np.arange(self.n_s) / self.n_s

    @property
    def s_nodes(self):
        return self.radius * self.phi_nodes

    @property
    def alpha_nodes(self):
        return -np.pi / 2 + (np.arange(self.n_alpha) + 0.5) * np.pi / self.n_alpha

    @property
    def mu(self):
        return np.broadcast_to(np.cos(self.alpha_nodes)[None, :], (self.n_s, self.n_alpha))

    @property
    def dphi(self):
        return 2 * np.pi / self.n_s

    @property
    def dalpha(self):
        return np.pi / self.n_alpha

    def spec(self):
        return BoundaryRayGrid(self.n_s, self.n_alpha, self.radius)

    def with_values(self, values):
        v = np.asarray(values)
        if v.shape != (self.n_s, self.n_alpha):
            raise ValueError(f"values shape {v.shape} != {(self.n_s, self.n_alpha)}")
        return BoundaryRayGrid(self.n_s, self.n_alpha, self.radius, v)

    def key(self):
        return (self.n_s, self.n_alpha, self.radius)


def boundary_frame(m: MetricField, phi, radius=M_RADIUS):
    """Point, outward g-unit normal, g-unit ccw tangent and g-speed |c'(phi)|_g."""
    phi = np.asarray(phi, dtype=float)
    c = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    y = radius * c
    gi = m.ginv(y)
    nu = np.einsum("...ij,...j->...i", gi, c)
    nu = nu / np.sqrt(np.einsum("...i,...ij,...j->...", c, gi, c))[..., None]
    cdot = radius * np.stack([-np.sin(phi), np.cos(phi)], axis=-1)
    speed = m.norm(y, cdot)
    return y, nu, cdot / speed[..., None], speed


def fan_directions(m: MetricField, fan: BoundaryRayGrid):
    """Start points and inward unit directions at every fan node, shape (n_s, n_alpha, 2)."""
    y, nu, tau, speed = boundary_frame(m, fan.phi_nodes, fan.radius)
    a = fan.alpha_nodes
    th = (np.cos(a)[None, :, None] * (-nu[:, None, :]) + np.sin(a)[None, :, None] * tau[:, None, :])
    Y = np.broadcast_to(y[:, None, :], th.shape).copy()
    return Y, th, speed


def direction_to_fan(m: MetricField, y, theta, radius=M_RADIUS):
    """Inverse of fan_directions: (s, alpha) of boundary points with directions theta."""
    y = np.asarray(y, dtype=float)
    phi = np.mod(np.arctan2(y[..., 1], y[..., 0]), 2 * np.pi)
    yb, nu, tau, _ = boundary_frame(m, phi, radius)
    a = np.arctan2(m.inner(yb, theta, tau), -m.inner(yb, theta, nu))
    return radius * phi, a


@dataclass(frozen=True)
class BoundaryDirection:
    y: np.ndarray
    theta: np.ndarray
    mu: float


def boundary_direction(m: MetricField, s, alpha, radius=M_RADIUS) -> BoundaryDirection:
    y, nu, tau, _ = boundary_frame(m, s / radius, radius)
    th = math.cos(alpha) * (-nu) + math.sin(alpha) * tau
    mu = abs(float(m.inner(y, th, nu)))
    return BoundaryDirection(y, th, mu)


def check_boundary_direction(m: MetricField, bd: BoundaryDirection, radius=M_RADIUS):
    """True when theta is strictly inward and the stored mu matches <theta, nu>."""
    phi = math.atan2(bd.y[1], bd.y[0])
    _, nu, _, _ = boundary_frame(m, phi, radius)
    ip = float(m.inner(bd.y, bd.theta, nu))
    return ip < 0 and abs(abs(ip) - bd.mu) <= 1e-12


# ---------------------------------------------------------------------------
# diagnostics and Santalo quadrature


@dataclass
class SimplicityReport:
    convex: bool
    no_conjugate: bool
    min_jacobi: float
    min_second_fundamental: float
    n_rays: int
    radius: float

    @property
    def simple(self):
        return self.convex and self.no_conjugate


def _fan_for_count(n_rays, radius):
    n_s = max(1, int(round(math.sqrt(2 * n_rays))))
    n_a = int(math.ceil(n_rays / n_s))
    return BoundaryRayGrid(n_s, n_a, radius)


def simplicity_check(m: MetricField, n_rays=256, radius=None, h=0.01) -> SimplicityReport:
    """Jacobi fields along boundary-initiated geodesics plus boundary convexity."""
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    radius = m.chart_radius if radius is None else radius
    fan = _fan_for_count(n_rays, radius)
    Y, TH, _ = fan_directions(m, fan)
    Y = Y.reshape(-1, 2)[:n_rays]
    TH = TH.reshape(-1, 2)[:n_rays]
    if m.is_flat:
        tau = _euclid_exit(Y, TH, radius)
        jmin, jend = tau, tau
    else:
        fl = flow_to_boundary(m, Y, TH, radius, h, jacobi=True)
        jmin, jend = fl.min_j, fl.j
    no_conj = bool(np.all(jmin > 0))
    # convexity: second fundamental form of the circle w.r.t. the inward normal
    phi = 2 * np.pi * np.arange(max(64, fan.n_s)) / max(64, fan.n_s)
    y, nu, _, _ = boundary_frame(m, phi, radius)
    cd = radius * np.stack([-np.sin(phi), np.cos(phi)], axis=-1)
    cdd = -y
    gam = m.christoffel(y)
    acc = cdd + np.einsum("...kij,...i,...j->...k", gam, cd, cd)
    two = m.inner(y, acc, -nu) / m.inner(y, cd, cd)
    return SimplicityReport(bool(np.all(two > 0)), no_conj, float(np.min(jend)),
                            float(np.min(two)), int(n_rays), float(radius))


def santalo_integrate(m: MetricField, F, fan: BoundaryRayGrid | None = None, h=0.01,
                      radius=None) -> float:
    """Integral over inward boundary directions of int_0^tau F(Phi_t) dt, weight mu dsigma dalpha.

    ``F(x, theta)`` must accept arrays of shape (..., 2).
    """
    fan = fan or BoundaryRayGrid(128, 64, M_RADIUS)
    if radius is not None:
        fan = BoundaryRayGrid(fan.n_s, fan.n_alpha, radius)
    Y, TH, speed = fan_directions(m, fan)
    rb = trace_rays(m, Y.reshape(-1, 2), TH.reshape(-1, 2), fan.radius, h)
    vals = np.asarray(F(rb.x, rb.theta), dtype=float)
    vals = np.broadcast_to(vals, rb.x.shape[:-1])
    line = np.sum(vals * rb.simpson_weights(), axis=1).reshape(fan.n_s, fan.n_alpha)
    w = fan.mu * (speed * fan.dphi)[:, None] * fan.dalpha
    return float(np.sum(line * w))


def phase_space_integral(m: MetricField, F, n_r=64, n_phi=128, n_fiber=64, radius=M_RADIUS):
    """Direct quadrature of F over the unit sphere bundle of the disk (polar Gauss grid)."""
    xr, wr = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * radius * (xr + 1)
    wr = 0.5 * radius * wr
    ph = 2 * np.pi * np.arange(n_phi) / n_phi
    R, P = np.meshgrid(r, ph, indexing="ij")
    X = np.stack([R * np.cos(P), R * np.sin(P)], axis=-1)
    wx = (wr * r)[:, None] * (2 * np.pi / n_phi) * m.sqrt_det(X)
    total = 0.0
    fib = 2 * np.pi * np.arange(n_fiber) / n_fiber
    for k, w in enumerate(fib):
        u = np.array([math.cos(w), math.sin(w)])
        L = np.linalg.cholesky(m.g(X))
        th = np.linalg.solve(np.swapaxes(L, -1, -2), np.broadcast_to(u, X.shape)[..., None])[..., 0]
        total += np.sum(np.asarray(F(X, th)) * wx) * (2 * np.pi / n_fiber)
    return float(total)
