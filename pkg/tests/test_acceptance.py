"""The ten acceptance criteria, one test each, at their stated tolerances.

Each test prints a single PASS/FAIL line with the measured value; the lines are
also collected into the terminal summary.
"""

import math
import time

import numpy as np
import pytest
from scipy.special import jn_zeros

from magtomo import fields as F
from magtomo import geometry as G
from magtomo import go_optics as GO
from magtomo import inverse_pipeline as P
from magtomo import schrodinger as S
from magtomo import xray as X
from magtomo.cli import adjoint_gaps

EUCLID = G.EuclideanMetric()
FAN = G.BoundaryRayGrid(128, 64, G.M_RADIUS)


def test_c01_santalo(criterion):
    t0 = time.perf_counter()
    val = G.santalo_integrate(EUCLID, lambda x, th: np.ones(x.shape[:-1]), FAN)
    dt = time.perf_counter() - t0
    rel = abs(val - 2 * math.pi ** 2) / (2 * math.pi ** 2)
    ok = rel <= 5e-3 and dt < 5.0
    criterion(1, "Santalo volume of the unit disk", ok, f"{val:.6f} vs 2 pi^2, rel {rel:.2e}, {dt:.2f} s")
    assert ok


def test_c02_adjoint_pairing(criterion):
    t0 = time.perf_counter()
    worst = {}
    for label, m in (("euclidean", EUCLID), ("conformal bump", G.conformal_bump(0.3, 4.0))):
        rows = adjoint_gaps(m, F.Grid(128, m.chart_radius), FAN, 5, seed=11)
        for _, kind, gap in rows:
            worst[(label, kind)] = max(worst.get((label, kind), 0.0), gap)
    dt = time.perf_counter() - t0
    top = max(worst.values())
    ok = top <= 5e-3 and dt < 60.0
    detail = ", ".join(f"{k[0]} {k[1]} {v:.1e}" for k, v in worst.items())
    criterion(2, "adjoint pairing", ok, f"worst gap {top:.2e} ({detail}), {dt:.1f} s")
    assert ok


def _dn_gauge_gap(N, T=0.05):
    a = F.solenoidal_bump(0.05, 0.22, (0.1, 0.05), 0.6, 0.85)
    _, dphi = F.gaussian(1.0, 0.25, (-0.1, 0.1), 0.6, 0.85)
    V, _ = F.gaussian(0.1, 0.25, (0.0, 0.1), 0.6, 0.85)

    def f(t, p):
        s = np.clip(t / T, 0, 1)
        return 256 * s ** 4 * (1 - s) ** 4 * np.exp(3j * p) * np.cos(2 * p)

    grid = P.solver_grid(N)
    H1 = S.MagneticHamiltonian(EUCLID, a, V, grid)
    H2 = S.MagneticHamiltonian(EUCLID, lambda x: a(x) + 0.5 * dphi(x), V, grid)
    bd = S.BoundaryData(f)
    t1 = S.DNOperator(H1, T, T / 400).apply(bd)
    t2 = S.DNOperator(H2, T, T / 400).apply(bd)
    diff = S.DNTrace(t1.times, t1.phi, t1.values - t2.values, t1.sigma_w, t1.dt)
    return diff.l2() / t1.l2(), grid.h


def test_c03_gauge(criterion):
    rng = np.random.default_rng(3)
    grid = F.Grid(128)
    rt = X.get_transform(EUCLID, grid, FAN)
    worst = 0.0
    for _ in range(10):
        # the cutoff band spans ~28 cells so that d phi itself is resolved by the grid
        _, dphi = F.gaussian(1.0, rng.uniform(0.12, 0.25), rng.uniform(-0.25, 0.25, 2), 0.4, 0.98)
        A = F.OneForm.from_function(grid, dphi)
        worst = max(worst, float(np.max(np.abs(rt.i1(A).values))) / F.sup_norm(EUCLID, A))
    g1, h1 = _dn_gauge_gap(64)
    g2, h2 = _dn_gauge_gap(128)
    order = math.log(g1 / g2) / math.log(h1 / h2)
    ok = worst <= 1e-5 and order >= 1.5
    criterion(3, "gauge annihilation and DN gauge invariance", ok,
              f"max |I1(d phi)|/|d phi| {worst:.2e}; DN gap {g1:.2e} -> {g2:.2e}, order {order:.2f}")
    assert ok


def test_c04_symbol(criterion):
    t0 = time.perf_counter()
    r0 = X.symbol_check_euclidean("I0", 256)
    r1 = X.symbol_check_euclidean("I1", 256)
    dt = time.perf_counter() - t0
    ok = abs(r0.fitted_decay + 1) <= 0.15 and r1.projector_error <= 0.2 and dt < 120
    criterion(4, "normal-operator symbol", ok,
              f"N0 decay {r0.fitted_decay:.3f}, N1 parallel/orthogonal {r1.projector_error:.3f}, {dt:.0f} s")
    assert ok


def test_c05_kernel_oracle(criterion):
    grid = F.Grid(128)
    a = F.solenoidal_bump(1.0, 0.25, (0.1, -0.05), 0.6, 0.85)
    _, dphi = F.gaussian(0.5, 0.2, (-0.2, 0.1), 0.6, 0.85)
    A = F.OneForm.from_function(grid, lambda x: a(x) + dphi(x))
    NA = X.get_transform(EUCLID, grid, FAN, n_fiber=256).n1(A)
    idx = [(64, 64), (70, 58), (52, 70), (80, 80), (45, 50)]
    worst = 0.0
    for i, j in idx:
        x = grid.points[i, j]
        ref = X.normal_kernel_apply(EUCLID, A, x, n_dir=512, n_t=128)
        got = np.array([NA.a1[i, j], NA.a2[i, j]]).real
        worst = max(worst, float(np.linalg.norm(got - ref) / np.linalg.norm(ref)))
    ok = worst <= 0.02
    criterion(5, "normal kernel oracle", ok, f"worst pointwise relative gap {worst:.2e} at 5 points")
    assert ok


def _residuals(grid, lams, sabotage, A=None, V=None):
    y = np.array([-1.3, 0.0])
    phase = GO.build_phase(EUCLID, y, grid)
    return [GO.residual_norm(GO.make_probe(EUCLID, y, lam, grid, A=A, phase=phase, sabotage=sabotage), A, V,
                             n_tau=48) for lam in lams]


def test_c06_go_residual(criterion):
    a = F.solenoidal_bump(0.1, 0.25, (0.2, -0.1))
    V, _ = F.gaussian(0.1, 0.25, (0.1, 0.2))
    clean = _residuals(F.Grid(192), (4, 8, 16, 32), False, a, V)
    ratio = max(clean) / min(clean)
    # the dropped transport term is O(lam) against an O(1) remainder: it dominates
    # once lam is a few tens, so the growth is measured over 32 -> 64 -> 128
    sab = _residuals(F.Grid(560), (32, 64, 128), True, a, V)
    growth = [sab[k + 1] / sab[k] for k in range(len(sab) - 1)]
    ok = ratio <= 1.5 and min(growth) >= 1.5
    criterion(6, "GO residual lambda-uniformity", ok,
              f"max/min {ratio:.4f} over 4..32; sabotaged growth per doubling "
              + ", ".join(f"{g:.2f}" for g in growth))
    assert ok


def test_c07_tomographic_inversion(criterion):
    grid = F.Grid(128)
    rt = X.get_transform(EUCLID, grid, FAN)
    f, _ = F.gaussian(1.0, 0.25, (0.1, -0.1), 0.7, 0.9)
    f_true = F.ScalarField.from_function(grid, f)
    A_true = F.solenoidal_projection(EUCLID, F.OneForm.from_function(
        grid, F.solenoidal_bump(1.0, 0.25, (-0.1, 0.1), 0.7, 0.9)))
    r0 = X.invert_normal("I0", EUCLID, rt.n0(f_true), iters=40, fan=FAN)
    r1 = X.invert_normal("I1", EUCLID, rt.n1(A_true), iters=40, fan=FAN)
    e0 = P.relative_error(EUCLID, r0.solution, f_true)
    e1 = P.relative_error(EUCLID, r1.solution, A_true)
    ok = e0 <= 0.05 and e1 <= 0.05 and r0.iterations <= 40 and r1.iterations <= 40
    criterion(7, "tomographic inversion", ok,
              f"N0 {e0:.2%} in {r0.iterations} its, N1 {e1:.2%} in {r1.iterations} its")
    assert ok


@pytest.mark.slow
def test_c08_end_to_end(criterion, bump_reconstruction):
    rec, dt, _ = bump_reconstruction
    ok = rec.err_As <= 0.15 and rec.err_V <= 0.15 and dt <= 1800
    criterion(8, "end-to-end reconstruction", ok,
              f"err A^s {rec.err_As:.2%}, err V {rec.err_V:.2%}, lambda {rec.magnetic.lam:g}, {dt:.0f} s")
    assert ok


@pytest.mark.slow
def test_c09_stability_study(criterion):
    grid = F.Grid(128)
    table = P.stability_study(P.width_family(EUCLID, grid), P.StudyConfig(), EUCLID)
    ok = 0 < table.kappa < 1 and table.r2 >= 0.9
    criterion(9, "stability exponent", ok, f"kappa {table.kappa:.3f}, R^2 {table.r2:.3f} over {len(table.rows)} scales")
    assert ok


def _A_rot(c):
    return lambda x: c * np.stack([-x[..., 1], x[..., 0]], -1)


def _V_bump(x):
    return 0.5 * np.exp(-np.sum((x - [0.1, 0.2]) ** 2, -1) / 0.1)


def _profile(x):
    """w = (1 - r^2) p(x) with p linear, and its gradient and Laplacian."""
    gp = np.array([0.5, 0.3j])
    p = 1 + x @ gp
    q = 1 - np.sum(x ** 2, -1)
    return q * p, -2 * x * p[..., None] + q[..., None] * gp, -4 * p - 4 * (x @ gp)


def _space_error(N, nt=400, T=0.25, omega=3.0, c=0.4):
    """L2 error at T against u = exp(-i omega t) w, the source built from the continuous operator."""
    A = _A_rot(c)

    def source(t, x):
        w, gw, lw = _profile(x)
        Ax = A(x)
        Hw = lw - 2j * np.sum(Ax * gw, -1) - np.sum(Ax ** 2, -1) * w + _V_bump(x) * w
        return np.exp(-1j * omega * t) * (omega * w + Hw)

    H = S.MagneticHamiltonian(EUCLID, A, _V_bump, P.solver_grid(N))
    w0 = _profile(H.points)[0]
    res = S.solve_ibvp(H, None, T, T / nt, u0=w0, source=source, record="final")
    e = res.final - np.exp(-1j * omega * T) * w0
    return math.sqrt(abs(H.inner(e, e)))


def _time_error(nt, N=96, T=0.25, omega=3.0, c=0.4):
    """L2 error at T against the semi-discrete solution exp(-i omega t) w of the assembled system."""
    H = S.MagneticHamiltonian(EUCLID, _A_rot(c), _V_bump, P.solver_grid(N))
    w0 = _profile(H.points)[0]
    Hw = H.apply(w0)
    res = S.solve_ibvp(H, None, T, T / nt, u0=w0, record="final",
                       source=lambda t, x: np.exp(-1j * omega * t) * (omega * w0 + Hw))
    e = res.final - np.exp(-1j * omega * T) * w0
    return math.sqrt(abs(H.inner(e, e)))


def test_c10_solver(criterion):
    # space: exact solution, dt small enough that the time error is negligible
    eh = [_space_error(N) for N in (48, 96)]
    hs = [P.solver_grid(N).h for N in (48, 96)]
    order_h = math.log(eh[0] / eh[1]) / math.log(hs[0] / hs[1])
    # time: the semi-discrete solution of the assembled system, so no spatial error enters
    et = [_time_error(n) for n in (8, 16, 32)]
    order_t = min(math.log(et[k] / et[k + 1]) / math.log(2) for k in range(2))

    H = S.MagneticHamiltonian(EUCLID, F.solenoidal_bump(0.5, 0.25, (0.1, 0.0)), None, P.solver_grid(96))
    u0 = np.random.default_rng(0).standard_normal(H.n) * (1 - np.sum(H.points ** 2, -1))
    T = 1.0
    norms = S.solve_ibvp(H, None, T, T / 200, u0=u0, record="none").norms
    drift = float(np.max(np.abs(norms - norms[0])) / norms[0]) / T

    lam0 = S.MagneticHamiltonian(EUCLID, None, None, P.solver_grid(128)).lowest_eigenvalue()
    j01 = jn_zeros(0, 1)[0]
    eig_rel = abs(lam0 + j01 ** 2) / j01 ** 2

    ok = order_h >= 1.8 and order_t >= 1.8 and drift <= 1e-8 and eig_rel <= 0.01
    criterion(10, "solver correctness", ok,
              f"order h {order_h:.2f}, order dt {order_t:.2f}, mass drift {drift:.1e}/unit time, "
              f"eigenvalue {lam0:.5f} vs {-j01 ** 2:.5f} ({eig_rel:.1e})")
    assert ok
