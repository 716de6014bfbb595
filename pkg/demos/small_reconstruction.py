"""Reduced reconstructions: the magnetic step and the potential step, one at a time.

Both use only the top frequency lambda = 32 and 8 sources, so the script
finishes in about three minutes.  The potential reading is the magnetic
reading's even part divided by 2 lambda, so when both coefficients differ the
leftover magnetic error must be small first: that needs the full default run
(16 sources, three refinement passes), ``magtomo reconstruct``.
"""

import time

from magtomo import fields as F
from magtomo import geometry as G
from magtomo import inverse_pipeline as P

m = G.EuclideanMetric()
grid = F.Grid(128)
zero = P.CoefficientPair(None, None)
srcs = P.sources(8)

t0 = time.perf_counter()
pa = P.bump_pair(m, grid, v_sup=0)
dn1, dn2 = P.make_dn(m, pa, 128, (32.0,)), P.make_dn(m, zero, 128, (32.0,))
mag = P.magnetic_step(dn1, dn2, srcs, lambda_schedule=(32.0,), field_grid=grid, refine=1)
A, _ = pa.difference(zero, grid)
err = P.relative_error(m, mag.field.masked(grid.mask_M), F.solenoidal_projection(m, A))
print(f"magnetic bump: relative error of A^s {err:.1%}  ({time.perf_counter() - t0:.0f} s)")

t0 = time.perf_counter()
pv = P.bump_pair(m, grid, a_sup=0)
dn1, dn2 = P.make_dn(m, pv, 128, (32.0,)), P.make_dn(m, zero, 128, (32.0,))
pot = P.potential_step(dn1, dn2, srcs, lambda_schedule=(32.0,), field_grid=grid)
_, V = pv.difference(zero, grid)
print(f"potential bump: relative error of V {P.relative_error(m, pot.field, V):.1%}  "
      f"({time.perf_counter() - t0:.0f} s)")
