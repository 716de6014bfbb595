"""magtomo command line.

    magtomo <command> [--config run.yaml] [--out DIR] [--threads N] [--seed S]

Commands: transform, adjoint-test, decompose, simulate-dn, probe, reconstruct,
selftest, study.  Every run writes its effective configuration to
DIR/effective_config.yaml and holds DIR/.lock while it works.

Exit codes: 0 ok, 1 a check failed, 2 configuration error, 3 numerical or
geometry error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

COMMANDS = ("transform", "adjoint-test", "decompose", "simulate-dn", "probe", "reconstruct", "selftest", "study")

log = logging.getLogger("magtomo")


def _parser():
    p = argparse.ArgumentParser(prog="magtomo", description="Ray transforms and magnetic Schrodinger inversion.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML run configuration (defaults when omitted)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
    p.add_argument("--seed", type=int, help="seed for randomized checks (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ValueError("--threads must be positive")
    for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[k] = str(n)


class OutputLock:
    """Exclusive ownership of an output directory via an O_EXCL lockfile."""

    def __init__(self, out: Path):
        self.path = out / ".lock"
        self.fd = None

    def __enter__(self):
        from .errors import ConfigError

        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory {self.path.parent} is locked by another run "
                              f"(remove {self.path} if stale)") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        self.path.unlink(missing_ok=True)
        return False


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        _set_threads(args.threads)
    except ValueError as exc:
        print(f"magtomo: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from . import config as C
    from .errors import ConfigError, NumericalError

    try:
        cfg = C.load(args.config)
        if args.out is not None:
            cfg.out = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        cfg = C.validate(cfg)
    except ConfigError as exc:
        print(f"magtomo: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.out)
    try:
        with OutputLock(out):
            C.dump(cfg, out / "effective_config.yaml")
            return RUNNERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"magtomo: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"magtomo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# shared builders


def _setup(cfg):
    from . import config as C
    from . import fields as F

    m = C.build_metric(cfg.metric)
    return m, F.Grid(cfg.grid.N, m.chart_radius), C.build_fan(cfg.fan)


def _pairs(cfg, m, grid):
    from . import config as C

    return C.build_pair(m, grid, cfg.coefficients.pair1), C.build_pair(m, grid, cfg.coefficients.pair2)


def _write_yaml(path, data):
    import yaml

    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def _dn_operators(cfg, m, p1, p2):
    from . import inverse_pipeline as P
    from . import schrodinger as S

    grid = P.solver_grid(cfg.solver.N)
    H1 = p1.hamiltonian(m, grid, cfg.solver.order, cfg.solver.dn_order)
    H2 = p2.hamiltonian(m, grid, cfg.solver.order, cfg.solver.dn_order)
    return S.DNOperator(H1, cfg.T, cfg.dt), S.DNOperator(H2, cfg.T, cfg.dt)


def _top_lambda(cfg):
    from . import go_optics as GO
    from . import inverse_pipeline as P
    from .errors import ResolutionError

    grid = P.solver_grid(cfg.solver.N)
    lams = P.resolved_schedule(cfg.probes.lambda_schedule, grid)
    if not lams:
        raise ResolutionError(f"no scheduled frequency has {GO.MIN_POINTS_PER_WAVELENGTH:g} points per wavelength "
                              f"on the solver grid (N = {cfg.solver.N})")
    return lams[-1]


# ---------------------------------------------------------------------------
# commands


def cmd_transform(cfg, out):
    from . import config as C
    from . import csvio
    from . import xray as X

    m, grid, fan = _setup(cfg)
    fs = cfg.input.field
    # closed-form inputs are integrated exactly along the rays; file inputs through grid interpolation
    if cfg.input.kind == "I0":
        f = C.scalar_function(m, grid, fs) or C.build_scalar(m, grid, fs) or C.F.ScalarField.zeros(grid)
        rec = X.i0_forward(m, f, fan, field_grid=grid)
    else:
        A = C.oneform_function(m, grid, fs) or C.build_oneform(m, grid, fs) or C.F.OneForm.zeros(grid)
        rec = X.i1_forward(m, A, fan, field_grid=grid)
    path = csvio.write_ray_data(out / "ray_data.csv", rec.data)
    v = rec.data.values
    print(f"{cfg.input.kind} of {fs.kind} field: max |value| {float(abs(v).max()):.6e} -> {path}")
    return EXIT_OK


def _random_fan(fan, rng):
    import numpy as np

    S, A = np.meshgrid(fan.phi_nodes, fan.alpha_nodes, indexing="ij")
    v = np.zeros_like(S)
    for _ in range(3):
        k, j = rng.integers(0, 4, size=2)
        v += rng.standard_normal() * np.cos(k * S + rng.uniform(0, 2 * np.pi)) * np.cos((j + 0.5) * A)
    return fan.with_values(v)


def _random_fields(m, grid, rng):
    from . import fields as F

    c = rng.uniform(-0.3, 0.3, size=2)
    w = rng.uniform(0.15, 0.3)
    f, _ = F.gaussian(1.0, w, c, 0.6, 0.85)
    a = F.solenoidal_bump(1.0, w, rng.uniform(-0.3, 0.3, size=2), 0.6, 0.85)
    _, dphi = F.gaussian(1.0, rng.uniform(0.15, 0.3), rng.uniform(-0.3, 0.3, size=2), 0.6, 0.85)
    return (F.ScalarField.from_function(grid, f),
            F.OneForm.from_function(grid, lambda x: a(x) + 0.5 * dphi(x)))


def adjoint_gaps(m, grid, fan, n_pairs, seed):
    """Relative gaps |<I u, psi> - <u, I* psi>| / (|I u| |psi|) for random (field, fan) pairs."""
    import numpy as np

    from . import fields as F
    from . import xray as X

    rng = np.random.default_rng(seed)
    rt = X.get_transform(m, grid, fan)
    rows = []
    for trial in range(n_pairs):
        f, A = _random_fields(m, grid, rng)
        psi = _random_fan(fan, rng)
        for kind, u, fwd, adj in (("I0", f, rt.i0, rt.i0_adj), ("I1", A, rt.i1, rt.i1_adj)):
            Iu = fwd(u)
            lhs = rt.fan_inner(Iu, psi)
            rhs = F.inner(m, u, adj(psi), grid.mask_M)
            gap = abs(lhs - rhs) / (rt.fan_norm(Iu) * rt.fan_norm(psi))
            rows.append((trial, kind, float(gap)))
    return rows


def cmd_adjoint_test(cfg, out):
    m, grid, fan = _setup(cfg)
    rows = adjoint_gaps(m, grid, fan, cfg.selftest.adjoint_pairs, cfg.seed)
    with open(out / "adjoint.csv", "w") as fh:
        fh.write("trial,kind,gap\n")
        for t, k, g in rows:
            fh.write(f"{t},{k},{g:.12e}\n")
    worst = max(g for _, _, g in rows)
    ok = worst <= 5e-3
    print(f"adjoint pairing: worst relative gap {worst:.3e} over {len(rows)} pairs "
          f"[{'pass' if ok else 'FAIL'}] (limit 5e-3)")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_decompose(cfg, out):
    from . import csvio
    from . import fields as F

    m, grid, _ = _setup(cfg)
    p1, p2 = _pairs(cfg, m, grid)
    A = F.as_oneform(p1.A, grid) - F.as_oneform(p2.A, grid)
    split = F.hodge_decompose(m, A)
    csvio.write_oneform(out / "A.csv", A)
    csvio.write_oneform(out / "solenoidal.csv", split.solenoidal)
    csvio.write_scalar(out / "potential.csv", split.potential)
    div = F.sup_norm(m, F.codifferential(m, split.solenoidal.masked(grid.mask_M)))
    _write_yaml(out / "decompose.yaml", {"residual": float(split.residual), "sup_div_solenoidal": float(div),
                                        "norm_A": float(F.norm(m, A)),
                                        "norm_solenoidal": float(F.norm(m, split.solenoidal))})
    print(f"A = A^s + d phi: residual {split.residual:.3e}, sup |div A^s| {div:.3e}")
    return EXIT_OK


def _source_probe(cfg, m, lam, A=None):
    from . import fields as F
    from . import go_optics as GO
    from . import inverse_pipeline as P

    y = P.sources(cfg.probes.sources, m.chart_radius)[0]
    phase = GO.build_phase(m, y, F.Grid(48, m.chart_radius))
    return GO.make_probe(m, y, lam, A=A, phase=phase, T0=cfg.probes.T0)


def cmd_simulate_dn(cfg, out):
    from . import csvio
    from . import inverse_pipeline as P

    m, grid, _ = _setup(cfg)
    p1, _ = _pairs(cfg, m, grid)
    H = p1.hamiltonian(m, P.solver_grid(cfg.solver.N), cfg.solver.order, cfg.solver.dn_order)
    lam = _top_lambda(cfg)
    probe = _source_probe(cfg, m, lam)
    from . import schrodinger as S

    t0 = time.perf_counter()
    tr = S.DNOperator(H, cfg.T, cfg.dt).apply(probe.boundary_data())
    csvio.write_trace(out / "trace.csv", tr)
    _write_yaml(out / "trace.yaml", {"source": [float(v) for v in probe.y], "lambda": float(lam),
                                    "T": float(cfg.T), "dt": float(cfg.dt), "n_points": int(len(tr.phi)),
                                    "l2": float(tr.l2())})
    print(f"DN trace of the lambda = {lam:g} probe: {len(tr.times)} steps x {len(tr.phi)} boundary points, "
          f"L2 {tr.l2():.4e} ({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK


def cmd_probe(cfg, out):
    import numpy as np

    from . import csvio
    from . import go_optics as GO

    m, grid, _ = _setup(cfg)
    lam = _top_lambda(cfg)
    y = _source_probe(cfg, m, lam).y
    phase = GO.build_phase(m, y, grid)
    probe = GO.make_probe(m, y, lam, A=None, phase=phase, T0=cfg.probes.T0)
    times = np.linspace(0.0, probe.t_stop, 9)
    st = GO.assemble_ansatz(probe, times)
    csvio.write_spacetime(out / "probe.csv", st.times, st.grid, st.values)
    _write_yaml(out / "probe.yaml", {"source": [float(v) for v in y], "lambda": float(lam),
                                    "T0": float(probe.T0), "bump_constant": float(GO.BUMP_C),
                                    "times": [float(t) for t in times], "grid_N": int(grid.N)})
    print(f"probe at y = ({y[0]:.3f}, {y[1]:.3f}), lambda = {lam:g}: {len(times)} slices -> {out / 'probe.csv'}")
    return EXIT_OK


def cmd_reconstruct(cfg, out):
    from . import csvio
    from . import fields as F
    from . import inverse_pipeline as P

    m, grid, fan = _setup(cfg)
    p1, p2 = _pairs(cfg, m, grid)
    pr = cfg.probes
    t0 = time.perf_counter()
    rec = P.reconstruct(m, p1, p2, N=cfg.solver.N, n_sources=pr.sources, lambda_schedule=pr.lambda_schedule,
                        fan=fan, field_grid=grid, T0=pr.T0, n_omega=pr.n_omega, refine=pr.refine,
                        smoothing=pr.smoothing, width_cells=pr.width_cells)
    elapsed = time.perf_counter() - t0
    csvio.write_oneform(out / "A_s.csv", rec.A_s.masked(grid.mask_M))
    csvio.write_scalar(out / "V.csv", rec.V)
    csvio.write_ray_data(out / "ray_data_magnetic.csv", rec.magnetic.data)
    csvio.write_ray_data(out / "ray_data_potential.csv", rec.potential.data)
    csvio.write_history(out / "cg_magnetic.csv", rec.magnetic.inversion.residuals)
    csvio.write_history(out / "cg_potential.csv", rec.potential.inversion.residuals)
    A_true, V_true = p1.difference(p2, grid)
    As_true = F.solenoidal_projection(m, A_true)
    rows = [("err_As", rec.err_As), ("err_V", rec.err_V),
            ("norm_As_rec", float(F.norm(m, rec.A_s.masked(grid.mask_M)))),
            ("norm_V_rec", float(F.norm(m, rec.V))),
            ("norm_As_true", float(F.norm(m, As_true))), ("norm_V_true", float(F.norm(m, V_true)))]
    with open(out / "errors.csv", "w") as fh:
        fh.write("quantity,value\n")
        for k, v in rows:
            fh.write(f"{k},{'' if v is None else format(v, '.12e')}\n")
    summary = {k: (None if v is None else float(v)) for k, v in rows}
    summary.update({"lambda": float(rec.magnetic.lam), "sources": int(pr.sources),
                    "magnetic_updates": [float(u) for u in rec.magnetic.updates]})
    _write_yaml(out / "summary.yaml", summary)
    for k, v in rows:
        print(f"{k:14s} {'n/a' if v is None else format(v, '.4e')}")
    print(f"reconstruction finished in {elapsed:.0f} s")
    return EXIT_OK


def cmd_study(cfg, out):
    from . import csvio
    from . import inverse_pipeline as P

    m, grid, _ = _setup(cfg)
    st = cfg.study
    pairs = P.width_family(m, grid, st.widths, st.a_amplitude, st.v_amplitude)
    sc = P.StudyConfig(N=st.N, lambda_schedule=tuple(st.lambda_schedule), n_sources=st.sources,
                       n_random=st.n_random, seed=cfg.seed, T0=cfg.probes.T0)
    table = P.stability_study(pairs, sc, m)
    csvio.write_study(out / "study.csv", table.rows)
    _write_yaml(out / "kappa.yaml", {"kappa": table.kappa, "r2": table.r2, "kappa_As": table.kappa_A,
                                    "kappa_V": table.kappa_V, "kappa_dA": table.kappa_dA,
                                    "err_dA": [r.err_dA for r in table.rows]})
    for r in table.rows:
        print(f"scale {r.scale:.3f}: dn_gap {r.dn_gap:.4e}  err_As {r.err_As:.4e}  err_V {r.err_V:.4e}")
    print(f"kappa = {table.kappa:.4f} (R^2 = {table.r2:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def _check(name, fn):
    """Run one suite; returns (name, ok, measured text)."""
    from .errors import MagtomoError

    try:
        ok, text = fn()
    except (MagtomoError, ValueError, FloatingPointError) as exc:
        return name, False, f"{type(exc).__name__}: {exc}"
    return name, bool(ok), text


def selftest_suites(cfg):
    import numpy as np

    from . import fields as F
    from . import geometry as G
    from . import go_optics as GO
    from . import xray as X

    m, grid, fan = _setup(cfg)
    rng = np.random.default_rng(cfg.seed)

    simple = {}

    def simplicity():
        r = G.simplicity_check(m)
        simple["ok"] = r.simple
        return r.simple, (f"convex={r.convex} no_conjugate={r.no_conjugate} "
                          f"min_jacobi={r.min_jacobi:.4f} min_II={r.min_second_fundamental:.4f}")

    def santalo():
        val = G.santalo_integrate(m, lambda x, th: np.ones(x.shape[:-1]), fan)
        ref = 2 * math.pi ** 2 if m.is_flat else G.phase_space_integral(m, lambda x, th: np.ones(x.shape[:-1]))
        rel = abs(val - ref) / abs(ref)
        return rel <= 5e-3, f"{val:.6f} vs {ref:.6f} (rel {rel:.2e}, limit 5e-3)"

    def adjoint():
        rows = adjoint_gaps(m, grid, fan, 1, cfg.seed)
        worst = max(g for _, _, g in rows)
        return worst <= 5e-3, f"worst gap {worst:.3e} (limit 5e-3)"

    def gauge():
        worst = 0.0
        for _ in range(10):
            _, dphi = F.gaussian(1.0, rng.uniform(0.12, 0.25), rng.uniform(-0.25, 0.25, size=2), 0.4, 0.98)
            A = F.OneForm.from_function(grid, dphi)
            v = X.i1_forward(m, A, fan, field_grid=grid).data.values
            worst = max(worst, float(np.max(np.abs(v))) / F.sup_norm(m, A))
        return worst <= 1e-5, f"max |I1(d phi)|/|d phi| over 10 potentials = {worst:.2e} (limit 1e-5)"

    def symbol_i0():
        r = X.symbol_check_euclidean("I0", cfg.selftest.symbol_resolution)
        return abs(r.fitted_decay + 1) <= 0.15, f"decay exponent {r.fitted_decay:.3f} (target -1 +- 0.15)"

    def symbol_i1():
        r = X.symbol_check_euclidean("I1", cfg.selftest.symbol_resolution)
        return r.projector_error <= 0.2, f"parallel/orthogonal response {r.projector_error:.3f} (limit 0.2)"

    def residual():
        if not simple.get("ok", True):
            # the eikonal phase from a boundary source is not single valued past conjugate points
            return False, "skipped: metric is not simple"
        y = np.array([-m.chart_radius, 0.0])
        pg = F.Grid(192, m.chart_radius)
        phase = GO.build_phase(m, y, pg)
        vals = [GO.residual_norm(GO.make_probe(m, y, lam, phase=phase)) for lam in cfg.selftest.residual_lambdas]
        ratio = max(vals) / min(vals)
        return ratio <= 1.5, f"max/min residual over lambda = {ratio:.4f} (limit 1.5)"

    return [("simplicity", simplicity), ("santalo", santalo), ("adjoint", adjoint), ("gauge", gauge),
            ("symbol_N0", symbol_i0), ("symbol_N1", symbol_i1), ("go_residual", residual)]


def cmd_selftest(cfg, out):
    results = []
    with open(out / "selftest.csv", "w") as fh:
        fh.write("check,status,measured\n")
        for name, fn in selftest_suites(cfg):
            t0 = time.perf_counter()
            name, ok, text = _check(name, fn)
            results.append(ok)
            status = "pass" if ok else "FAIL"
            print(f"{name:12s} {status:4s} {text} [{time.perf_counter() - t0:.1f} s]", flush=True)
            fh.write(f"{name},{status},\"{text}\"\n")
    return EXIT_OK if all(results) else EXIT_FAIL


RUNNERS = {
    "transform": cmd_transform,
    "adjoint-test": cmd_adjoint_test,
    "decompose": cmd_decompose,
    "simulate-dn": cmd_simulate_dn,
    "probe": cmd_probe,
    "reconstruct": cmd_reconstruct,
    "selftest": cmd_selftest,
    "study": cmd_study,
}


if __name__ == "__main__":
    sys.exit(main())
