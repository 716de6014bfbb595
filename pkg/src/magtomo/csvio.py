"""CSV readers and writers for fields, ray data, traces and tables."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import fields as F
from .errors import ConfigError
from .geometry import BoundaryRayGrid

FMT = "%.12e"


def _write(path, header, cols):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.column_stack([np.asarray(c, dtype=float).ravel() for c in cols])
    np.savetxt(path, arr, delimiter=",", header=",".join(header), comments="", fmt=FMT)
    return path


def read_table(path, required):
    """Columns of a headered CSV as a dict of float arrays; ConfigError on a missing file or column."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            header = [h.strip() for h in next(rd)]
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        rows = [r for r in rd if r]
    missing = [c for c in required if c not in header]
    if missing:
        raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
    try:
        data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric entry ({exc})") from None
    return {h: data[:, i] for i, h in enumerate(header)}


# -- ray data --------------------------------------------------------------


def write_ray_data(path, data: BoundaryRayGrid):
    S, A = np.meshgrid(data.s_nodes, data.alpha_nodes, indexing="ij")
    v = np.asarray(data.values)
    return _write(path, ["s", "alpha", "value_re", "value_im", "mu"], [S, A, v.real, np.imag(v), data.mu])


def read_ray_data(path, radius=1.0) -> BoundaryRayGrid:
    t = read_table(path, ["s", "alpha", "value_re", "value_im"])
    s_nodes = np.unique(t["s"])
    a_nodes = np.unique(t["alpha"])
    fan = BoundaryRayGrid(len(s_nodes), len(a_nodes), radius)
    vals = np.zeros((fan.n_s, fan.n_alpha), dtype=complex)
    i = np.searchsorted(s_nodes, t["s"])
    j = np.searchsorted(a_nodes, t["alpha"])
    vals[i, j] = t["value_re"] + 1j * t["value_im"]
    if not np.any(vals.imag):
        vals = vals.real
    return fan.with_values(vals)


def write_history(path, residuals):
    r = np.asarray(residuals, dtype=float)
    return _write(path, ["iter", "residual"], [np.arange(len(r)), r])


# -- fields on the uniform grid ----------------------------------------------


def _grid_cols(grid: F.Grid):
    P = grid.points
    return P[..., 0], P[..., 1]


def write_scalar(path, u: F.ScalarField):
    x1, x2 = _grid_cols(u.grid)
    return _write(path, ["x1", "x2", "value"], [x1, x2, np.real(u.values)])


def write_oneform(path, A: F.OneForm):
    x1, x2 = _grid_cols(A.grid)
    return _write(path, ["x1", "x2", "a1", "a2"], [x1, x2, np.real(A.a1), np.real(A.a2)])


def _grid_from_columns(x1, x2):
    xs = np.unique(x1)
    ys = np.unique(x2)
    if len(xs) != len(ys) or len(xs) * len(ys) != len(x1):
        raise ConfigError("field file is not a full square grid")
    ext = float(xs[-1])
    if not np.allclose(xs, np.linspace(-ext, ext, len(xs)), atol=1e-9) or not np.allclose(xs, ys):
        raise ConfigError("field file grid is not uniform and symmetric about the origin")
    grid = F.Grid(len(xs), ext)
    i = np.searchsorted(xs, x1)
    j = np.searchsorted(ys, x2)
    return grid, (i, j)


def read_scalar(path) -> F.ScalarField:
    t = read_table(path, ["x1", "x2", "value"])
    grid, idx = _grid_from_columns(t["x1"], t["x2"])
    v = np.zeros((grid.N, grid.N))
    v[idx] = t["value"]
    return F.ScalarField(grid, v)


def read_oneform(path) -> F.OneForm:
    t = read_table(path, ["x1", "x2", "a1", "a2"])
    grid, idx = _grid_from_columns(t["x1"], t["x2"])
    a1 = np.zeros((grid.N, grid.N))
    a2 = np.zeros((grid.N, grid.N))
    a1[idx] = t["a1"]
    a2[idx] = t["a2"]
    return F.OneForm(grid, a1, a2)


# -- traces and probe dumps --------------------------------------------------


def write_trace(path, trace):
    """DN trace (times x boundary points) as t,s,re,im with s the arc-length coordinate on the unit circle."""
    T, Phi = np.meshgrid(trace.times, trace.phi, indexing="ij")
    v = np.asarray(trace.values)
    return _write(path, ["t", "s", "re", "im"], [T, Phi, v.real, v.imag])


def write_spacetime(path, times, grid: F.Grid, frames):
    x1, x2 = _grid_cols(grid)
    n = x1.size
    frames = np.asarray(frames)
    tt = np.repeat(np.asarray(times, dtype=float), n)
    X1 = np.tile(x1.ravel(), len(times))
    X2 = np.tile(x2.ravel(), len(times))
    return _write(path, ["t", "x1", "x2", "re", "im"], [tt, X1, X2, frames.real, frames.imag])


def write_study(path, rows):
    return _write(path, ["scale", "dn_gap", "err_As", "err_V"],
                  [[r.scale for r in rows], [r.dn_gap for r in rows], [r.err_As for r in rows],
                   [r.err_V for r in rows]])
