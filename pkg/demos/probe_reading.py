"""From DN maps to ray data: one pencil of geometric-optics probes.

Two Schrodinger systems differ by a magnetic bump.  Pairing high-frequency
probes through the difference of their DN maps gives, at each fan angle, the
phase exp(i I1(A)) along the line the probe travels.  The script compares the
extracted phase with the line integrals of A at the three scheduled
frequencies.  About a minute on one core.
"""

import numpy as np

from magtomo import fields as F
from magtomo import geometry as G
from magtomo import inverse_pipeline as P

m = G.EuclideanMetric()
grid = F.Grid(128)
pair = P.bump_pair(m, grid, v_sup=0)
zero = P.CoefficientPair(None, None)
dn1, dn2 = P.make_dn(m, pair, 128), P.make_dn(m, zero, 128)

y = P.sources(16)[0]
pencils = P.extract_schedule(dn1, dn2, y)

a = F.scaled_to_sup(m, grid, F.solenoidal_bump(1.0, 0.22, (0.1, 0.05), 0.6, 0.85), 0.05, kind="oneform")
for lam, pen in pencils.items():
    bd = [G.boundary_direction(m, s, al) for s, al in zip(pen.s, pen.alpha)]
    rays = G.trace_rays(m, np.array([b.y for b in bd]), np.array([b.theta for b in bd]), 1.0, 0.005)
    ref = np.sum(np.sum(a(rays.x) * rays.theta, -1) * rays.simpson_weights(), axis=1)
    err = np.sqrt(np.sum((pen.values - ref) ** 2 * pen.mu) / np.sum(ref ** 2 * pen.mu))
    print(f"lambda {lam:5.1f}: max |I1| {np.max(np.abs(ref)):.4f}, relative error of the reading {err:.1%}")
