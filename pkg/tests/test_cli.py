import numpy as np
import pytest
import yaml

from magtomo import cli
from magtomo import config as C


def _run(tmp_path, command, cfg, name="out", *extra):
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    out = tmp_path / name
    return cli.main([command, "--config", str(path), "--out", str(out), *extra]), out


def _table(path):
    return np.loadtxt(path, delimiter=",", skiprows=1)


def test_transform_of_one_gives_chord_lengths(tmp_path):
    cfg = {"fan": {"n_s": 64, "n_alpha": 65}, "input": {"kind": "I0", "field": {"kind": "constant", "amplitude": 1.0}}}
    code, out = _run(tmp_path, "transform", cfg)
    assert code == cli.EXIT_OK
    d = _table(out / "ray_data.csv")
    centre = d[np.abs(d[:, 1]) < 1e-12]
    assert len(centre) == 64
    assert np.max(np.abs(centre[:, 2] - 2.0)) < 1e-6
    np.testing.assert_allclose(d[:, 2], 2 * d[:, 4], atol=1e-6)


def test_transform_of_pure_gauge_vanishes(tmp_path):
    field = {"kind": "gradient", "amplitude": 1.0, "width": 0.2, "center": [0.1, -0.1], "r0": 0.5, "r1": 0.9}
    code, out = _run(tmp_path, "transform", {"input": {"kind": "I1", "field": field}})
    assert code == cli.EXIT_OK
    assert np.max(np.abs(_table(out / "ray_data.csv")[:, 2:4])) <= 1e-5


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    code, out = _run(tmp_path, "transform", {"probes": {"lambda_shedule": [8.0]}})
    assert code == cli.EXIT_CONFIG
    assert "probes.lambda_shedule" in capsys.readouterr().err
    assert not (out / "effective_config.yaml").exists()


def test_bad_value_names_the_key(tmp_path, capsys):
    code, _ = _run(tmp_path, "transform", {"solver": {"dt": 0.01}})
    assert code == cli.EXIT_CONFIG
    assert "solver.dt" in capsys.readouterr().err


def test_missing_field_file(tmp_path, capsys):
    cfg = {"input": {"kind": "I0", "field": {"kind": "file", "file": str(tmp_path / "nope.csv")}}}
    code, out = _run(tmp_path, "transform", cfg)
    assert code == cli.EXIT_CONFIG
    assert "nope.csv" in capsys.readouterr().err
    assert not (out / ".lock").exists()


def test_locked_output_directory(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / ".lock").write_text("1")
    code, _ = _run(tmp_path, "transform", {})
    assert code == cli.EXIT_CONFIG
    assert not (out / "ray_data.csv").exists()


def test_effective_config_round_trips(tmp_path):
    cfg = {"grid": {"N": 64}, "fan": {"n_s": 32, "n_alpha": 16}, "seed": 7}
    code, out = _run(tmp_path, "transform", cfg)
    assert code == cli.EXIT_OK
    eff = C.load(out / "effective_config.yaml")
    assert eff.grid.N == 64 and eff.fan.n_alpha == 16 and eff.seed == 7
    assert C.to_dict(eff) == C.to_dict(C.load(tmp_path / "out.yaml")) | {"out": str(out)}


def test_outputs_are_deterministic(tmp_path):
    cfg = {"grid": {"N": 64}, "fan": {"n_s": 32, "n_alpha": 16}}
    _, a = _run(tmp_path, "adjoint-test", cfg, "a", "--seed", "3")
    _, b = _run(tmp_path, "adjoint-test", cfg, "b", "--seed", "3")
    assert (a / "adjoint.csv").read_bytes() == (b / "adjoint.csv").read_bytes()
    _, c = _run(tmp_path, "decompose", {"grid": {"N": 64}}, "c")
    _, d = _run(tmp_path, "decompose", {"grid": {"N": 64}}, "d")
    for f in ("A.csv", "solenoidal.csv", "potential.csv"):
        assert (c / f).read_bytes() == (d / f).read_bytes()


def test_decompose_splits_the_field(tmp_path):
    code, out = _run(tmp_path, "decompose", {"grid": {"N": 64}})
    assert code == cli.EXIT_OK
    A = _table(out / "A.csv")[:, 2:]
    s = _table(out / "solenoidal.csv")[:, 2:]
    p = _table(out / "potential.csv")
    assert p.shape[1] == 3
    summary = yaml.safe_load((out / "decompose.yaml").read_text())
    assert summary
    assert np.max(np.abs(A)) > 0 and np.max(np.abs(s)) > 0


def test_zero_difference_reconstruction(tmp_path):
    cfg = {
        "grid": {"N": 64}, "fan": {"n_s": 64, "n_alpha": 32},
        "solver": {"N": 48},
        "probes": {"lambda_schedule": [8.0], "sources": 4, "n_omega": 16, "refine": 0},
        "coefficients": {"pair1": {}, "pair2": {}},
    }
    code, out = _run(tmp_path, "reconstruct", cfg)
    assert code == cli.EXIT_OK
    assert np.all(_table(out / "A_s.csv")[:, 2:] == 0)
    assert np.all(_table(out / "V.csv")[:, 2] == 0)


def test_selftest_flags_a_non_simple_metric(tmp_path, capsys):
    cfg = {
        "metric": {"name": "conformal_bump", "amplitude": 4.0, "b": 4.0},
        "grid": {"N": 48}, "fan": {"n_s": 32, "n_alpha": 16},
        "selftest": {"symbol_resolution": 32, "residual_lambdas": [4.0, 8.0], "adjoint_pairs": 1},
    }
    code, out = _run(tmp_path, "selftest", cfg)
    assert code == cli.EXIT_FAIL
    lines = (out / "selftest.csv").read_text().splitlines()
    assert lines[1].startswith("simplicity,FAIL")


@pytest.mark.parametrize("argv", [["bogus"], []])
def test_bad_command_line(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2
