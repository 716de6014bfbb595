"""Run configuration: strict YAML loading, defaults, validation and builders.

Every section is a dataclass; unknown keys anywhere raise ConfigError naming
the dotted key.  ``dump`` writes the effective configuration (defaults filled
in) so that ``load(dump(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import fields as F
from . import geometry as G
from .errors import ConfigError


@dataclass
class MetricSpec:
    name: str = "euclidean"          # euclidean | conformal_bump | conformal_linear | file
    amplitude: float = 0.0           # conformal_bump: g = (1 + a exp(-b |x - c|^2)) I
    b: float = 4.0
    center: list = field(default_factory=lambda: [0.0, 0.0])
    c1: float = 0.0                  # conformal_linear: g = exp(2 (c1 x1 + c2 x2)) I
    c2: float = 0.0
    file: str | None = None          # CSV x1,x2,g11,g12,g22
    chart_radius: float = G.M1_RADIUS


@dataclass
class GridSpec:
    N: int = 128


@dataclass
class FanSpec:
    n_s: int = 128
    n_alpha: int = 64


@dataclass
class SolverSpec:
    N: int = 128                     # solver grid over [-1.02, 1.02]^2
    T: float | None = None           # DN window; default T0 / (2 min lambda)
    dt: float | None = None          # default: 48 steps per lam^-2 period at the top frequency
    order: int | None = None         # 2 or 4; default 4 when the metric allows it
    dn_order: int = 2
    steps_per_period: int = 48


@dataclass
class ProbeSpec:
    lambda_schedule: list = field(default_factory=lambda: [8.0, 16.0, 32.0])
    T0: float = 3.7
    sources: int = 16
    n_omega: int = 64
    width_cells: float = 2.0
    refine: int = 3
    smoothing: float = 0.08


@dataclass
class FieldSpec:
    """Built-in field (sup norm ``amplitude``) or a CSV file."""
    kind: str = "zero"               # zero | constant | gaussian | solenoidal_bump | gradient | file
    amplitude: float = 0.0
    width: float = 0.2
    center: list = field(default_factory=lambda: [0.0, 0.0])
    r0: float = 0.6
    r1: float = 0.85
    file: str | None = None


def _a_default():
    return FieldSpec("solenoidal_bump", 0.05, 0.22, [0.1, 0.05])


def _v_default():
    return FieldSpec("gaussian", 0.1, 0.25, [-0.15, 0.1])


@dataclass
class PairSpec:
    A: FieldSpec = field(default_factory=FieldSpec)
    V: FieldSpec = field(default_factory=FieldSpec)


@dataclass
class CoefficientSpec:
    pair1: PairSpec = field(default_factory=lambda: PairSpec(_a_default(), _v_default()))
    pair2: PairSpec = field(default_factory=PairSpec)


@dataclass
class InputSpec:
    kind: str = "I0"
    field: FieldSpec = field(default_factory=lambda: FieldSpec("gaussian", 1.0, 0.25, [0.1, 0.0]))


@dataclass
class StudySpec:
    widths: list = field(default_factory=lambda: [0.1, 0.14, 0.2, 0.28])
    a_amplitude: float = 0.05
    v_amplitude: float = 0.1
    N: int = 96
    lambda_schedule: list = field(default_factory=lambda: [8.0])
    sources: int = 4
    n_random: int = 20


@dataclass
class SelftestSpec:
    symbol_resolution: int = 128
    residual_lambdas: list = field(default_factory=lambda: [4.0, 8.0, 16.0, 32.0])
    adjoint_pairs: int = 5


@dataclass
class RunConfig:
    metric: MetricSpec = field(default_factory=MetricSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    fan: FanSpec = field(default_factory=FanSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    probes: ProbeSpec = field(default_factory=ProbeSpec)
    coefficients: CoefficientSpec = field(default_factory=CoefficientSpec)
    input: InputSpec = field(default_factory=InputSpec)
    study: StudySpec = field(default_factory=StudySpec)
    selftest: SelftestSpec = field(default_factory=SelftestSpec)
    out: str = "out"
    seed: int = 0

    # -- derived solver window ------------------------------------------------
    @property
    def T(self):
        if self.solver.T is not None:
            return float(self.solver.T)
        return self.probes.T0 / (2 * min(self.probes.lambda_schedule))

    @property
    def dt(self):
        if self.solver.dt is not None:
            return float(self.solver.dt)
        lam = max(self.probes.lambda_schedule)
        n = int(math.ceil(self.T / (2 * math.pi / (self.solver.steps_per_period * lam ** 2))))
        return self.T / n


# ---------------------------------------------------------------------------
# strict construction


_HINTS: dict = {}


def _hints(cls):
    if cls not in _HINTS:
        _HINTS[cls] = typing.get_type_hints(cls)
    return _HINTS[cls]


def _coerce(value, hint, path):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if hint is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        out = []
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path}[{i}]: expected a number, got {v!r}")
            out.append(float(v))
        return out
    return value


def _build(cls, data, path=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            where = f"{path}.{k}" if path else str(k)
            raise ConfigError(f"unknown configuration key '{where}'")
    hints = _hints(cls)
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            where = f"{path}.{f.name}" if path else f.name
            kw[f.name] = _coerce(data[f.name], hints[f.name], where)
    return cls(**kw)


def _positive(path, v, strict=True):
    if v is None:
        return
    if (v <= 0) if strict else (v < 0):
        raise ConfigError(f"{path} must be {'positive' if strict else 'non-negative'}, got {v}")


def validate(cfg: RunConfig) -> RunConfig:
    m = cfg.metric
    if m.name not in ("euclidean", "conformal_bump", "conformal_linear", "file"):
        raise ConfigError(f"metric.name: unknown metric {m.name!r}")
    if m.name == "file" and not m.file:
        raise ConfigError("metric.file is required for metric.name = file")
    _positive("metric.chart_radius", m.chart_radius)
    if m.chart_radius <= G.M_RADIUS:
        raise ConfigError("metric.chart_radius must exceed the unit disk radius")
    _positive("grid.N", cfg.grid.N)
    _positive("fan.n_s", cfg.fan.n_s)
    _positive("fan.n_alpha", cfg.fan.n_alpha)
    s = cfg.solver
    for k in ("N", "T", "dt", "dn_order", "steps_per_period"):
        _positive(f"solver.{k}", getattr(s, k))
    if s.order not in (None, 2, 4):
        raise ConfigError(f"solver.order must be 2 or 4, got {s.order}")
    p = cfg.probes
    if not p.lambda_schedule:
        raise ConfigError("probes.lambda_schedule must not be empty")
    for i, lam in enumerate(p.lambda_schedule):
        _positive(f"probes.lambda_schedule[{i}]", lam)
    for k in ("T0", "sources", "n_omega", "width_cells"):
        _positive(f"probes.{k}", getattr(p, k))
    _positive("probes.refine", p.refine, strict=False)
    _positive("probes.smoothing", p.smoothing, strict=False)
    lam_max = max(p.lambda_schedule)
    steps = 2 * math.pi / (lam_max ** 2 * cfg.dt)
    if steps < 10:
        raise ConfigError(f"solver.dt = {cfg.dt:.3g} gives {steps:.1f} steps per oscillation at "
                          f"lambda = {lam_max:g}; need >= 10")
    if 2 * min(p.lambda_schedule) * cfg.T < p.T0 * (1 - 1e-12):
        raise ConfigError(f"solver.T = {cfg.T:.4g} is shorter than the probe window T0 / (2 lambda)")
    for name in ("pair1", "pair2"):
        pair = getattr(cfg.coefficients, name)
        _check_field(f"coefficients.{name}.A", pair.A, ("zero", "solenoidal_bump", "gradient", "file"))
        _check_field(f"coefficients.{name}.V", pair.V, ("zero", "gaussian", "constant", "file"))
    if cfg.input.kind not in ("I0", "I1"):
        raise ConfigError(f"input.kind must be I0 or I1, got {cfg.input.kind!r}")
    allowed = ("zero", "gaussian", "constant", "file") if cfg.input.kind == "I0" else \
        ("zero", "solenoidal_bump", "gradient", "file")
    _check_field("input.field", cfg.input.field, allowed)
    st = cfg.study
    for i, w in enumerate(st.widths):
        _positive(f"study.widths[{i}]", w)
    for k in ("a_amplitude", "v_amplitude", "N", "sources"):
        _positive(f"study.{k}", getattr(st, k), strict=False)
    _positive("study.n_random", st.n_random, strict=False)
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    return cfg


def _check_field(path, fs: FieldSpec, kinds):
    if fs.kind not in kinds:
        raise ConfigError(f"{path}.kind must be one of {', '.join(kinds)}, got {fs.kind!r}")
    if fs.kind == "file" and not fs.file:
        raise ConfigError(f"{path}.file is required for kind = file")
    _positive(f"{path}.width", fs.width)
    _positive(f"{path}.amplitude", fs.amplitude, strict=False)
    if len(fs.center) != 2:
        raise ConfigError(f"{path}.center must have two entries")
    if not 0 < fs.r0 < fs.r1 <= 1.0:
        raise ConfigError(f"{path}: need 0 < r0 < r1 <= 1")


def from_dict(data) -> RunConfig:
    return validate(_build(RunConfig, data))


def load(path=None) -> RunConfig:
    """Strict load; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML ({exc})") from None
    return from_dict(data)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump(cfg: RunConfig, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
    return p


# ---------------------------------------------------------------------------
# builders


def build_metric(spec: MetricSpec):
    if spec.name == "euclidean":
        return G.EuclideanMetric(spec.chart_radius)
    if spec.name == "conformal_bump":
        return G.conformal_bump(spec.amplitude, spec.b, tuple(spec.center), spec.chart_radius)
    if spec.name == "conformal_linear":
        return G.conformal_linear(spec.c1, spec.c2, spec.chart_radius)
    return G.GridMetric.from_csv(spec.file, spec.chart_radius)


def build_fan(spec: FanSpec) -> G.BoundaryRayGrid:
    return G.BoundaryRayGrid(spec.n_s, spec.n_alpha, G.M_RADIUS)


def scalar_function(m, grid: F.Grid, fs: FieldSpec):
    """Closed-form scalar field as a callable of points; None for zero and file fields."""
    if fs.kind in ("zero", "file"):
        return None
    if fs.kind == "constant":
        return lambda x: np.full(np.shape(x)[:-1], fs.amplitude)
    f, _ = F.gaussian(1.0, fs.width, tuple(fs.center), fs.r0, fs.r1)
    return F.scaled_to_sup(m, grid, f, fs.amplitude)


def oneform_function(m, grid: F.Grid, fs: FieldSpec):
    if fs.kind in ("zero", "file"):
        return None
    if fs.kind == "gradient":
        _, df = F.gaussian(1.0, fs.width, tuple(fs.center), fs.r0, fs.r1)
        return F.scaled_to_sup(m, grid, df, fs.amplitude, kind="oneform")
    a = F.solenoidal_bump(1.0, fs.width, tuple(fs.center), fs.r0, fs.r1)
    return F.scaled_to_sup(m, grid, a, fs.amplitude, kind="oneform")


def build_scalar(m, grid: F.Grid, fs: FieldSpec):
    from . import csvio

    if fs.kind == "file":
        return csvio.read_scalar(fs.file)
    f = scalar_function(m, grid, fs)
    return None if f is None else F.ScalarField.from_function(grid, f)


def build_oneform(m, grid: F.Grid, fs: FieldSpec):
    from . import csvio

    if fs.kind == "file":
        return csvio.read_oneform(fs.file)
    a = oneform_function(m, grid, fs)
    return None if a is None else F.OneForm.from_function(grid, a)


def build_pair(m, grid: F.Grid, spec: PairSpec):
    from .inverse_pipeline import CoefficientPair

    return CoefficientPair(build_oneform(m, grid, spec.A), build_scalar(m, grid, spec.V))
