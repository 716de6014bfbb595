import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magtomo import fields as F
from magtomo import geometry as G
from magtomo.errors import DomainError, PreconditionError

EUCLID = G.EuclideanMetric()
GRID = F.Grid(96)

centers = st.tuples(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
widths = st.floats(0.15, 0.3)


def test_grid_geometry():
    g = F.Grid(5, 1.0)
    np.testing.assert_allclose(g.x, [-1, -0.5, 0, 0.5, 1])
    assert g.h == 0.5
    assert g.mask_M.sum() == 9  # |x| < 1 strictly


def test_gaussian_gradient_matches_difference_quotient():
    f, df = F.gaussian(1.3, 0.2, (0.1, -0.2), 0.6, 0.85)
    x = np.array([[0.1, 0.0], [0.5, 0.4], [-0.3, 0.2]])
    e = 1e-6
    fd = np.stack([(f(x + [e, 0]) - f(x - [e, 0])) / (2 * e), (f(x + [0, e]) - f(x - [0, e])) / (2 * e)], -1)
    np.testing.assert_allclose(df(x), fd, atol=1e-7)


@given(centers, widths)
@settings(max_examples=8, deadline=None)
def test_hodge_split_reconstructs_and_is_divergence_free(c, w):
    a = F.solenoidal_bump(1.0, w, c, 0.6, 0.85)
    _, dphi = F.gaussian(0.7, w, (c[1], c[0]), 0.6, 0.85)
    A = F.OneForm.from_function(GRID, lambda x: a(x) + dphi(x))
    split = F.hodge_decompose(EUCLID, A)
    back = split.solenoidal + F.exterior_d(split.potential)
    np.testing.assert_allclose(back.a1, A.a1, atol=1e-12)
    inside = GRID.r < 0.95
    div = F.codifferential(EUCLID, split.solenoidal).values
    assert np.max(np.abs(div[inside])) < 1e-8 * max(1.0, F.sup_norm(EUCLID, A) / GRID.h)
    assert np.max(np.abs(split.potential.values[~GRID.mask_M])) == 0.0


@given(centers, widths)
@settings(max_examples=8, deadline=None)
def test_projection_is_idempotent(c, w):
    a = F.solenoidal_bump(1.0, w, c, 0.6, 0.85)
    _, dphi = F.gaussian(1.0, 0.2, (0.0, 0.1), 0.6, 0.85)
    A = F.OneForm.from_function(GRID, lambda x: a(x) + dphi(x))
    P1 = F.solenoidal_projection(EUCLID, A)
    P2 = F.solenoidal_projection(EUCLID, P1)
    assert F.norm(EUCLID, P2 - P1) <= 1e-3 * F.norm(EUCLID, P1)


def test_projection_removes_gradients_and_keeps_curl():
    m = G.conformal_bump(0.3, 4.0, chart_radius=1.3)
    _, dphi = F.gaussian(1.0, 0.2, (0.1, 0.0), 0.6, 0.85)
    A = F.OneForm.from_function(GRID, dphi)
    As = F.solenoidal_projection(m, A)
    assert F.norm(m, As) < 1e-3 * F.norm(m, A)


def test_codifferential_is_adjoint_of_d():
    m = G.conformal_bump(0.5, 4.0)
    u, _ = F.gaussian(1.0, 0.2, (0.1, 0.1), 0.6, 0.85)
    a = F.solenoidal_bump(1.0, 0.25, (-0.1, 0.0), 0.6, 0.85)
    _, dg = F.gaussian(1.0, 0.3, (0.0, -0.2), 0.6, 0.85)
    U = F.ScalarField.from_function(GRID, u)
    A = F.OneForm.from_function(GRID, lambda x: a(x) + dg(x))
    lhs = F.inner(m, F.exterior_d(U), A)
    rhs = F.inner(m, U, F.codifferential(m, A))
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_scaled_to_sup():
    a = F.solenoidal_bump(1.0, 0.22, (0.1, 0.05), 0.6, 0.85)
    s = F.scaled_to_sup(EUCLID, GRID, a, 0.05, kind="oneform")
    assert abs(F.sup_norm(EUCLID, F.OneForm.from_function(GRID, s)) - 0.05) < 1e-12


def test_interpolator_exact_on_cubics():
    g = F.Grid(41)
    def f(x):
        return 1 + x[..., 0] - 2 * x[..., 1] ** 2 + 0.5 * x[..., 0] ** 3

    ip = F.Interpolator(g, f(g.points))
    pts = np.random.default_rng(1).uniform(-0.9, 0.9, (100, 2))
    assert np.max(np.abs(ip(pts) - f(pts))) < 1e-3


def test_symbol_outside_chart_raises():
    A = F.OneForm.zeros(GRID)
    with pytest.raises(DomainError):
        F.sigma_symbol(A, G.PhasePoint(np.array([2.0, 0.0]), np.array([1.0, 0.0])))


def test_gauge_transform_rejects_boundary_trace():
    phi = F.ScalarField(GRID, np.ones((GRID.N, GRID.N)))
    with pytest.raises(PreconditionError):
        F.gauge_transform(F.OneForm.zeros(GRID), F.ScalarField.zeros(GRID), phi)
