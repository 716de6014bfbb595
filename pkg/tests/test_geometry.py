import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magtomo import geometry as G
from magtomo.errors import DomainError, OutOfManifoldError

EUCLID = G.EuclideanMetric()


def _exp_distance(c, y, x):
    """Distance for g = exp(2 c x1)|dx|^2: z -> exp(c z)/c is an isometry onto a flat domain."""
    zy = complex(*y)
    zx = x[..., 0] + 1j * x[..., 1]
    return np.abs(np.exp(c * zx) - np.exp(c * zy)) / c


def test_euclidean_chords():
    fan = G.BoundaryRayGrid(16, 8)
    Y, TH, speed = G.fan_directions(EUCLID, fan)
    fl = G.flow_to_boundary(EUCLID, Y.reshape(-1, 2), TH.reshape(-1, 2))
    mu = fan.mu.reshape(-1)
    np.testing.assert_allclose(fl.tau, 2 * mu, atol=1e-12)
    np.testing.assert_allclose(speed, 1.0)


@given(st.floats(0, 2 * np.pi), st.floats(-1.5, 1.5))
@settings(max_examples=30, deadline=None)
def test_fan_round_trip(phi, alpha):
    m = G.conformal_bump(0.4, 3.0, (0.2, -0.1))
    bd = G.boundary_direction(m, phi, alpha)
    s, a = G.direction_to_fan(m, bd.y, bd.theta)
    assert abs(math.remainder(s - phi, 2 * np.pi)) < 1e-10
    assert abs(a - alpha) < 1e-10
    assert G.check_boundary_direction(m, bd)
    assert abs(bd.mu - math.cos(alpha)) < 1e-12


def test_flat_conformal_geodesics_match_exponential_map():
    c = 0.3
    m = G.conformal_linear(c)
    assert np.max(np.abs(m.curvature(np.random.default_rng(0).uniform(-0.7, 0.7, (20, 2))))) < 1e-14
    y = np.array([-1.0, 0.0])
    x = np.array([[0.3, 0.4], [0.5, -0.2], [-0.2, 0.6]])
    sh = G.distance_and_gradient(m, y, x, h=0.002)
    np.testing.assert_allclose(sh.psi, _exp_distance(c, y, x), rtol=1e-6)
    # gradient is g-unit
    np.testing.assert_allclose(m.norm(x, sh.grad), 1.0, atol=1e-8)


def test_conformal_bump_curvature_matches_finite_differences():
    m = G.conformal_bump(0.5, 4.0, (0.1, 0.0))
    pts = np.array([[0.0, 0.0], [0.3, -0.2], [-0.4, 0.1]])
    analytic = m.curvature(pts)
    generic = G.MetricField.curvature(m, pts)
    np.testing.assert_allclose(generic, analytic, rtol=1e-4, atol=1e-6)


def test_unit_speed_preserved():
    m = G.conformal_bump(0.5, 4.0)
    fan = G.BoundaryRayGrid(12, 6)
    Y, TH, _ = G.fan_directions(m, fan)
    fl = G.flow_to_boundary(m, Y.reshape(-1, 2), TH.reshape(-1, 2), h=0.01)
    np.testing.assert_allclose(m.norm(fl.x, fl.theta), 1.0, atol=1e-10)
    np.testing.assert_allclose(np.linalg.norm(fl.x, axis=-1), 1.0, atol=1e-10)
    assert fl.max_drift < 1e-6


def test_reversibility():
    m = G.conformal_bump(0.5, 4.0, (0.1, 0.1))
    x = np.array([[0.2, -0.1], [-0.3, 0.3]])
    th = np.array([[1.0, 0.2], [0.1, -1.0]])
    th = th / m.norm(x, th)[:, None]
    fwd = G.flow_to_boundary(m, x, th)
    back = G.flow_to_boundary(m, fwd.x * (1 - 1e-12), -fwd.theta)
    np.testing.assert_allclose(back.tau, fwd.tau + G.flow_to_boundary(m, x, -th).tau, rtol=1e-6)


def test_simplicity():
    assert G.simplicity_check(EUCLID).simple
    assert G.simplicity_check(G.conformal_bump(0.3, 4.0)).simple
    rep = G.simplicity_check(G.conformal_bump(4.0, 4.0))
    assert not rep.simple


def test_santalo_second_moment():
    # int_SM |x|^2 = 2 pi int_disk r^2 = pi^2
    val = G.santalo_integrate(EUCLID, lambda x, th: np.sum(x * x, -1), G.BoundaryRayGrid(128, 64))
    assert abs(val - math.pi ** 2) / math.pi ** 2 < 5e-3


def test_santalo_matches_phase_space_quadrature_curved():
    m = G.conformal_bump(0.3, 4.0)

    def F(x, th):
        return 1 + 0.5 * x[..., 0] + th[..., 1] ** 2

    a = G.santalo_integrate(m, F, G.BoundaryRayGrid(128, 64))
    b = G.phase_space_integral(m, F)
    assert abs(a - b) / abs(b) < 5e-3


def test_domain_errors():
    with pytest.raises(DomainError):
        G.flow_to_boundary(EUCLID, [[1.5, 0.0]], [[1.0, 0.0]])
    with pytest.raises(OutOfManifoldError):
        G.exp_map(EUCLID, np.array([0.0, 0.0]), np.array([2.0, 0.0]))
