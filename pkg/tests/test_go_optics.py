import numpy as np
import pytest
from scipy.integrate import quad

from magtomo import fields as F
from magtomo import geometry as G
from magtomo import go_optics as GO
from magtomo.errors import PreconditionError, ResolutionError

EUCLID = G.EuclideanMetric()
Y = np.array([-1.3, 0.0])
GRID = F.Grid(96)


@pytest.fixture(scope="module")
def phase():
    return GO.build_phase(EUCLID, Y, GRID)


def test_bump_profile_has_unit_norm_and_consistent_derivatives():
    b = GO.Bump()
    assert abs(quad(lambda s: b(s) ** 2, 0, 1)[0] - 1.0) < 1e-12
    s = np.linspace(0.05, 0.95, 7)
    e = 1e-6
    np.testing.assert_allclose(b.d1(s), (b(s + e) - b(s - e)) / (2 * e), rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(b.d2(s), (b.d1(s + e) - b.d1(s - e)) / (2 * e), rtol=1e-5, atol=1e-5)
    r = GO.Bump(reflect=True)
    np.testing.assert_allclose(r(s), b(1 - s))


def test_euclidean_phase_is_distance(phase):
    d = np.linalg.norm(GRID.points - Y, axis=-1)
    np.testing.assert_allclose(phase.psi.values[phase.valid], d[phase.valid], atol=1e-12)
    assert phase.eikonal_residual(EUCLID) < 1e-10
    assert phase.eikonal_residual(EUCLID, use_fd=True) < 1e-4


def test_curved_phase_is_eikonal():
    m = G.conformal_bump(0.3, 4.0)
    ph = GO.build_phase(m, Y, F.Grid(64))
    assert ph.eikonal_residual(m) < 1e-8
    assert ph.eikonal_residual(m, use_fd=True) < 5e-3


@pytest.fixture(scope="module")
def fine():
    g = F.Grid(161)
    return g, GO.build_phase(EUCLID, Y, g)


def test_transport_equations_hold(phase, fine):
    """Finite-difference transport residuals are small and shrink under refinement."""
    a = F.solenoidal_bump(0.1, 0.25, (0.2, -0.1))
    coarse = GO.transport_residuals(GO.make_probe(EUCLID, Y, 8, GRID, A=a, phase=phase), a, n_tau=24)
    g, ph = fine
    fine_res = GO.transport_residuals(GO.make_probe(EUCLID, Y, 8, g, A=a, phase=ph), a, n_tau=24)
    assert max(fine_res) < 1e-3
    assert fine_res[0] < coarse[0] / 2 and fine_res[1] < coarse[1] / 2


def test_two_residual_routes_agree(fine):
    """Differentiating the full oscillating ansatz matches the conjugated residual."""
    a = F.solenoidal_bump(0.1, 0.25, (0.2, -0.1))
    V, _ = F.gaussian(0.1, 0.25, (0.1, 0.2))
    grid, ph = fine
    pr = GO.make_probe(EUCLID, Y, 8, grid, A=a, phase=ph)
    for tau in (1.0, 2.2):
        C = GO.conjugated_residual(pr, a, V, tau)
        D = GO.direct_residual(pr, a, V, tau)
        Pr = GO.principal_residual(pr, a, V, tau)
        mk = grid.mask_M
        assert np.linalg.norm((D + C)[mk]) < 1e-3 * np.linalg.norm(C[mk])
        assert np.linalg.norm((Pr + C)[mk]) < 1e-3 * np.linalg.norm(C[mk])


def test_residual_uniform_in_lambda(phase):
    vals = [GO.residual_norm(GO.make_probe(EUCLID, Y, lam, GRID, phase=phase), n_tau=24) for lam in (2, 4, 8)]
    assert max(vals) / min(vals) < 1.05


def test_probe_boundary_data_vanishes_at_start(phase):
    pr = GO.make_probe(EUCLID, Y, 8, GRID, phase=phase)
    phi = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    assert np.max(np.abs(pr.trace(0.0, phi))) == 0.0
    st = GO.assemble_ansatz(pr, np.linspace(0, pr.t_stop, 5))
    assert st.values.shape == (5, GRID.N, GRID.N)
    # beyond the fast-time support of the bump the ansatz has left M
    late = GO.assemble_ansatz(pr, [pr.t_stop]).values[0]
    assert np.max(np.abs(late[GRID.mask_M])) < 1e-12


def test_magnetic_amplitude_is_gauge_covariant(phase):
    """beta picks up exp(i (phi(x) - phi(y))) under A -> A + d phi, with phi = 0 at y."""
    a = F.solenoidal_bump(0.1, 0.25, (0.2, -0.1))
    p, dp = F.gaussian(0.5, 0.25, (0.0, 0.1), 0.6, 0.85)
    b1 = GO.make_probe(EUCLID, Y, 8, GRID, A=a, phase=phase).beta_grid(3.5)
    b2 = GO.make_probe(EUCLID, Y, 8, GRID, A=lambda x: a(x) + dp(x), phase=phase).beta_grid(3.5)
    mk = GRID.mask_M & phase.valid
    ratio = b2[mk] / b1[mk]
    np.testing.assert_allclose(ratio, np.exp(1j * p(GRID.points[mk])), atol=2e-4)


def test_preconditions(phase):
    with pytest.raises(PreconditionError):
        GO.make_probe(EUCLID, Y, 8, GRID, phase=phase, T0=1.5)
    with pytest.raises(PreconditionError):
        GO.make_probe(EUCLID, Y, -1.0, GRID, phase=phase)
    with pytest.raises(ResolutionError):
        GO.residual_norm(GO.make_probe(EUCLID, Y, 64, GRID, phase=phase), n_tau=4)
