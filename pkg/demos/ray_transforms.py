"""Geodesic ray transforms on the unit disk: forward data, gauge blindness and CG inversion.

Run with ``python demos/ray_transforms.py``; takes about a minute.
"""

import numpy as np

from magtomo import fields as F
from magtomo import geometry as G
from magtomo import xray as X

m = G.conformal_bump(0.3, 4.0)   # a simple, non-flat metric
grid = F.Grid(128)
fan = G.BoundaryRayGrid(128, 64, G.M_RADIUS)
print("metric simple:", G.simplicity_check(m).simple)

# scalar transform of a bump, then back through CG on the normal operator
f, _ = F.gaussian(1.0, 0.25, (0.1, -0.1), 0.7, 0.9)
u = F.ScalarField.from_function(grid, f)
data = X.i0_forward(m, u, fan).data
print(f"I0 data: max {np.max(np.abs(data.values)):.4f}")
res = X.invert_normal("I0", m, X.i0_adjoint(m, data, grid), fan=fan)
print(f"N0 inversion: {res.iterations} CG iterations, rel error "
      f"{F.norm(m, res.solution - u, grid.mask_M) / F.norm(m, u):.2%}")

# 1-forms: the transform only sees the solenoidal part
A = F.OneForm.from_function(grid, F.solenoidal_bump(1.0, 0.25, (0.1, -0.05), 0.6, 0.85))
_, dphi = F.gaussian(1.0, 0.2, (-0.1, 0.15), 0.4, 0.98)
G_A = F.OneForm.from_function(grid, dphi)
d1 = X.i1_forward(m, A, fan).data.values
d2 = X.i1_forward(m, A + G_A, fan).data.values
print(f"I1(A + d phi) - I1(A): {np.max(np.abs(d2 - d1)):.2e} (data scale {np.max(np.abs(d1)):.3f})")

split = F.hodge_decompose(m, A + G_A)
print(f"Hodge split: |solenoidal - A| = {F.norm(m, split.solenoidal - A, grid.r < 0.9):.2e}")
