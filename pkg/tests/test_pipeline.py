import math

import numpy as np
import pytest

from magtomo import fields as F
from magtomo import geometry as G
from magtomo import go_optics as GO
from magtomo import inverse_pipeline as P
from magtomo import schrodinger as S
from magtomo import xray as X
from magtomo.errors import PreconditionError, SmallnessError, StudyError

EUCLID = G.EuclideanMetric()
GRID = F.Grid(128)
ZERO = P.CoefficientPair(None, None)
Y0 = P.sources(16)[0]


def _line_integrals(pen, fun, kind):
    """Quadrature of fun (kind 0) or fun . theta (kind 1) along the pencil lines, by ray tracing."""
    bd = [G.boundary_direction(EUCLID, s, a) for s, a in zip(pen.s, pen.alpha)]
    y = np.array([b.y for b in bd])
    th = np.array([b.theta for b in bd])
    rays = G.trace_rays(EUCLID, y, th, 1.0, 0.005)
    vals = np.sum(fun(rays.x) * rays.theta, -1) if kind == 1 else fun(rays.x)
    return np.sum(vals * rays.simpson_weights(), axis=1)


def _rel_mu(pens, refs):
    num = sum(np.sum((p.values - r) ** 2 * p.mu) for p, r in zip(pens, refs))
    den = sum(np.sum(r ** 2 * p.mu) for p, r in zip(pens, refs))
    return math.sqrt(num / den)


@pytest.fixture(scope="module")
def small_dn():
    """DN operators on a 64-node solver grid for the cheap pairing checks."""
    pa = P.bump_pair(EUCLID, GRID, v_sup=0)
    _, dphi = F.gaussian(0.5, 0.2, (0.05, -0.1), 0.5, 0.8)
    gauged = F.OneForm.from_function(GRID, lambda x: F.oneform_at(pa.A, x) + dphi(x))
    mk = lambda pair: P.make_dn(EUCLID, pair, 64, (8.0,))
    return {"zero": mk(ZERO), "A": mk(pa), "gauged": mk(P.CoefficientPair(gauged, None))}


def test_coefficients_must_vanish_near_boundary():
    with pytest.raises(PreconditionError):
        P.CoefficientPair(None, F.ScalarField(GRID, np.ones((GRID.N, GRID.N)), GRID.mask_M))


def test_bump_pair_has_requested_sup_norms():
    pair = P.bump_pair(EUCLID, GRID)
    assert abs(F.sup_norm(EUCLID, pair.A) - 0.05) < 1e-3
    assert abs(F.sup_norm(EUCLID, pair.V) - 0.1) < 1e-3
    # divergence free up to the finite-difference error, which is small against the curl
    div = F.norm(EUCLID, F.codifferential(EUCLID, pair.A), GRID.r < 0.9)
    assert div < 1e-2 * F.curl_norm(EUCLID, pair.A)


def test_probe_pairing_of_identical_and_gauge_equivalent_systems(small_dn):
    pr = GO.make_probe(EUCLID, Y0, 8.0, F.Grid(64), Psi=P.FanWeight(0.0, 0.2))
    same = P.probe_pairing(small_dn["zero"], small_dn["zero"], pr, pr).value
    gauge = P.probe_pairing(small_dn["gauged"], small_dn["A"], pr, pr).value
    signal = P.probe_pairing(small_dn["A"], small_dn["zero"], pr, pr).value
    assert same == 0
    assert abs(gauge) < 1e-3 * abs(signal)


def test_extraction_is_gauge_blind_and_deterministic(small_dn):
    sig = P.extract_magnetic_data(small_dn["A"], small_dn["zero"], Y0, lambda_schedule=[8.0])
    again = P.extract_magnetic_data(small_dn["A"], small_dn["zero"], Y0, lambda_schedule=[8.0])
    gauge = P.extract_magnetic_data(small_dn["gauged"], small_dn["A"], Y0, lambda_schedule=[8.0])
    zero = P.extract_magnetic_data(small_dn["zero"], small_dn["zero"], Y0, lambda_schedule=[8.0])
    np.testing.assert_array_equal(sig.values, again.values)
    assert np.all(zero.values == 0)
    assert np.max(np.abs(gauge.values)) < 1e-4 * np.max(np.abs(sig.values))


def test_zero_difference_recovers_zero(small_dn):
    dz = small_dn["zero"]
    A = P.recover_magnetic(dz, dz, P.sources(4), lambda_schedule=(8.0,), refine=0)
    V = P.recover_potential(dz, dz, P.sources(4), lambda_schedule=(8.0,), A_rec=A)
    assert F.norm(EUCLID, A) == 0 and F.norm(EUCLID, V) == 0


def test_large_phase_is_rejected(small_dn):
    big = P.make_dn(EUCLID, P.bump_pair(EUCLID, GRID, 3.0, 0), 64, (8.0,))
    with pytest.raises(SmallnessError):
        P.extract_magnetic_data(big, small_dn["zero"], Y0, lambda_schedule=[8.0])


def test_pairings_require_a_common_window(small_dn):
    other = P.make_dn(EUCLID, ZERO, 64, (16.0,))
    pr = GO.make_probe(EUCLID, Y0, 8.0, F.Grid(64))
    with pytest.raises(PreconditionError):
        P.probe_pairing(small_dn["zero"], other, pr, pr)


def test_boundary_pairing_matches_interior_form():
    """Green's identity: the boundary pairing equals -int int ((H_1 - H_2) u_2) conj(v) from computed solutions."""
    lam = 16.0
    T = GO.DEFAULT_T0 / (2 * lam)
    n = int(math.ceil(T / (2 * math.pi / (48 * lam ** 2))))
    g = P.solver_grid(96)
    dn1 = S.DNOperator(P.bump_pair(EUCLID, GRID).hamiltonian(EUCLID, g), T, T / n)
    dn2 = S.DNOperator(ZERO.hamiltonian(EUCLID, g), T, T / n)
    y = P.sources(16)[3]
    ph = GO.build_phase(EUCLID, y, F.Grid(48))
    pr1 = GO.make_probe(EUCLID, y, lam, phase=ph, Psi=P.FanWeight(0.0, 0.1))
    pr2 = GO.make_probe(EUCLID, y, lam, phase=ph)
    a = P.probe_pairing(dn1, dn2, pr1, pr2).value
    b = P.volume_pairing(dn1, dn2, pr1, pr2)
    assert abs(a - b) < 0.1 * abs(a)


def test_parity_split_of_transform_data():
    """I1 data is odd under line reversal and I0 data even."""
    fan = G.BoundaryRayGrid(128, 64, G.M_RADIUS)
    rt = X.get_transform(EUCLID, GRID, fan)
    a = F.solenoidal_bump(1.0, 0.25, (0.1, -0.05), 0.6, 0.85)
    v, _ = F.gaussian(1.0, 0.25, (-0.1, 0.2), 0.6, 0.85)
    d1 = rt.i1(a)
    d0 = rt.i0(v)
    odd1, even1 = P.split_parity(EUCLID, d1)
    odd0, even0 = P.split_parity(EUCLID, d0)
    assert np.linalg.norm(even1.values) < 1e-2 * np.linalg.norm(d1.values)
    assert np.linalg.norm(odd0.values) < 1e-2 * np.linalg.norm(d0.values)
    np.testing.assert_allclose(odd1.values + even1.values, d1.values, atol=1e-12)


def test_dn_gap_is_linear_in_the_amplitude(small_dn):
    srcs = P.sources(4)[:1]
    full = P.make_dn(EUCLID, P.bump_pair(EUCLID, GRID), 64, (8.0,))
    half = P.make_dn(EUCLID, P.bump_pair(EUCLID, GRID, 0.025, 0.05), 64, (8.0,))
    g1 = P.dn_gap(full, small_dn["zero"], srcs, (8.0,), 4).value
    g2 = P.dn_gap(half, small_dn["zero"], srcs, (8.0,), 4).value
    assert abs(g2 / g1 - 0.5) < 0.3 * 0.5
    assert P.dn_gap(small_dn["zero"], small_dn["zero"], srcs, (8.0,), 2).value == 0.0


def test_fit_exponent():
    gap = np.array([1e-4, 3e-4, 1e-3, 3e-3])
    k, r2 = P.fit_exponent(gap, 2.0 * gap ** 0.4)
    assert abs(k - 0.4) < 1e-12 and abs(r2 - 1) < 1e-12
    with pytest.raises(StudyError):
        P.fit_exponent([1e-3, 0.0, 2e-3], [1.0, 1.0, 0.0])
    with pytest.raises(StudyError):
        P.stability_study(P.width_family(EUCLID, GRID, widths=(0.1, 0.2)))


@pytest.fixture(scope="module")
def magnetic_pencils():
    pair = P.bump_pair(EUCLID, GRID, v_sup=0)
    dn1, dn2 = P.make_dn(EUCLID, pair, 128), P.make_dn(EUCLID, ZERO, 128)
    return [P.extract_schedule(dn1, dn2, y) for y in P.sources(16)[[0, 5]]]


def test_magnetic_extraction_matches_ray_transform(magnetic_pencils):
    """The phase reading approaches I1(A) along the pencil lines as lam grows."""
    a = F.scaled_to_sup(EUCLID, GRID, F.solenoidal_bump(1.0, 0.22, (0.1, 0.05), 0.6, 0.85), 0.05,
                        kind="oneform")
    errs = {}
    for lam in (8.0, 16.0, 32.0):
        pens = [out[lam] for out in magnetic_pencils]
        errs[lam] = _rel_mu(pens, [_line_integrals(p, a, 1) for p in pens])
    assert errs[32.0] < 0.10
    assert errs[16.0] < 1.1 * errs[8.0] and errs[32.0] < 1.1 * errs[16.0]


def test_potential_extraction_matches_ray_transform():
    pair = P.bump_pair(EUCLID, GRID, a_sup=0)
    v0, _ = F.gaussian(1.0, 0.25, (-0.15, 0.1), 0.6, 0.85)
    v = F.scaled_to_sup(EUCLID, GRID, v0, 0.1)
    dn1, dn2 = P.make_dn(EUCLID, pair, 128), P.make_dn(EUCLID, ZERO, 128)
    pen = P.extract_magnetic_data(dn1, dn2, Y0)
    assert pen.lam == 32.0
    ref = _line_integrals(pen, v, 0) / (2 * pen.lam)
    assert _rel_mu([pen], [ref]) < 0.10


@pytest.mark.slow
def test_recovered_curl_is_consistent(bump_reconstruction):
    """dA of the reconstruction tracks dA of the true difference (the exterior derivative kills the gauge part)."""
    rec, _, pair = bump_reconstruction
    A_true, _ = pair.difference(ZERO, GRID)
    rel = F.curl_norm(EUCLID, rec.A_s - A_true) / F.curl_norm(EUCLID, A_true)
    assert rel <= 3 * rec.err_As
    assert F.curl_norm(EUCLID, F.solenoidal_projection(EUCLID, A_true) - A_true) < 1e-4 * F.curl_norm(EUCLID, A_true)
