import math

import numpy as np
import pytest

from magtomo import fields as F
from magtomo import geometry as G
from magtomo import xray as X

EUCLID = G.EuclideanMetric()
FAN = G.BoundaryRayGrid(128, 64)
GRID = F.Grid(128)


def test_i0_of_one_is_chord_length():
    rec = X.i0_forward(EUCLID, F.ScalarField(GRID, np.ones((128, 128)), GRID.mask_M), FAN, field_grid=GRID)
    chord = 2 * FAN.mu
    # cells near the tangent directions see the staircase boundary of the mask
    core = np.abs(FAN.alpha_nodes) < 1.2
    assert np.max(np.abs(rec.data.values[:, core] - chord[:, core])) < 0.03


def test_i0_callable_gaussian_matches_closed_form():
    # line integral of exp(-|x|^2 / (2 w^2)) through the centre at distance p: sqrt(2 pi) w exp(-p^2 / (2 w^2))
    w = 0.15
    rt = X.get_transform(EUCLID, GRID, FAN)
    data = rt.i0(lambda x: np.exp(-np.sum(x * x, -1) / (2 * w * w)))
    p = np.abs(np.sin(FAN.alpha_nodes))
    ref = math.sqrt(2 * math.pi) * w * np.exp(-p ** 2 / (2 * w * w))
    np.testing.assert_allclose(data.values, np.broadcast_to(ref, data.values.shape), atol=1e-6)


def test_i1_sign_and_reversal_oddness():
    """I1 of a constant 1-form is its pairing with the chord vector; reversing the ray flips the sign."""
    rt = X.get_transform(EUCLID, GRID, FAN)
    c = np.array([0.3, -0.7])
    data = rt.i1(lambda x: np.broadcast_to(c, x.shape)).values
    Y, TH, _ = G.fan_directions(EUCLID, FAN)
    ref = 2 * FAN.mu * np.einsum("ijk,k->ij", TH, c)
    np.testing.assert_allclose(data, ref, atol=1e-10)


def test_linearity():
    rt = X.get_transform(EUCLID, GRID, FAN)
    f, _ = F.gaussian(1.0, 0.2, (0.1, 0.0), 0.6, 0.85)
    g, _ = F.gaussian(1.0, 0.25, (-0.2, 0.1), 0.6, 0.85)
    u = F.ScalarField.from_function(GRID, f)
    v = F.ScalarField.from_function(GRID, g)
    lhs = rt.i0(u.scale(2.0) + v.scale(-3.0)).values
    rhs = 2 * rt.i0(u).values - 3 * rt.i0(v).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@pytest.mark.parametrize("m", [EUCLID, G.conformal_bump(0.3, 4.0)], ids=["euclidean", "bump"])
def test_normal_operators_are_positive(m):
    rt = X.get_transform(m, GRID, FAN)
    f, _ = F.gaussian(1.0, 0.2, (0.1, 0.0), 0.6, 0.85)
    u = F.ScalarField.from_function(GRID, f)
    q = F.inner(m, rt.n0(u), u, GRID.mask_M)
    assert q.real > 0 and abs(q.imag) < 1e-12 * abs(q)


def test_invert_normal_zero_rhs():
    res = X.invert_normal("I0", EUCLID, F.ScalarField.zeros(GRID), fan=FAN)
    assert res.converged and F.norm(EUCLID, res.solution) == 0.0


def test_invert_normal_unknown_kind():
    with pytest.raises(ValueError):
        X.invert_normal("I2", EUCLID, F.ScalarField.zeros(GRID), fan=FAN)


def test_kernel_oracle_rejects_points_outside():
    with pytest.raises(Exception):
        X.normal_kernel_apply(EUCLID, F.OneForm.zeros(GRID), np.array([1.2, 0.0]))
