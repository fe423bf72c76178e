import json

import numpy as np
import pytest

from roughmanifold.cli import main, validate_config
from roughmanifold.errors import ConfigError
from roughmanifold.io import load_path, trace_to_csv


def run_cli(tmp_path, command, cfg, name="out", extra=()):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / name
    code = main([command, "--config", str(cfg_path), "--out", str(out), *extra])
    return code, out


def report(out):
    return json.loads((out / "report.json").read_text())


def test_lift_linear_trace(tmp_path):
    (tmp_path / "trace.csv").write_text(trace_to_csv([0.0, 1.0], [[0.0, 0.0], [1.0, 2.0]]))
    code, out = run_cli(tmp_path, "lift", {"input": "trace.csv"})
    assert code == 0
    X = load_path(out / "path.json")
    assert np.allclose(X.step2[0], 0.5 * np.outer([1.0, 2.0], [1.0, 2.0]))
    assert report(out)["passed"]


def test_lift_brownian_is_deterministic(tmp_path):
    cfg = {"driver": {"kind": "brownian", "seed": 7, "n": 999}}
    _, a = run_cli(tmp_path, "lift", cfg, "a")
    _, b = run_cli(tmp_path, "lift", cfg, "b")
    assert (a / "path.json").read_bytes() == (b / "path.json").read_bytes()
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    _, c = run_cli(tmp_path, "lift", cfg, "c", ("--seed", "8"))
    assert (a / "path.json").read_bytes() != (c / "path.json").read_bytes()


def test_lift_empty_file_is_usage_error(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    code, out = run_cli(tmp_path, "lift", {"input": "empty.csv"})
    assert code == 2
    assert json.loads((out / "error.json").read_text())["exit_code"] == 2


def test_check_verdicts(tmp_path):
    code, out = run_cli(tmp_path, "check", {"manifold": "sphere:d=2", "driver": {"kind": "great_circle", "n": 256}}, "gc")
    assert code == 0 and report(out)["passed"]
    cfg = {"manifold": "affine:n=3,normals=3", "driver": {"kind": "pure_area", "v": [1, 0, 0], "w": [0, 0, 1], "n": 256}}
    code, out = run_cli(tmp_path, "check", cfg, "pa")
    rep = report(out)
    assert code == 0 and not rep["passed"] and "diagnostic" in rep
    code, out = run_cli(tmp_path, "check", {"manifold": "flat:n=2", "driver": {"kind": "brownian", "n": 64}}, "flat")
    assert report(out)["passed"]


def test_check_reads_path_file(tmp_path):
    run_cli(tmp_path, "lift", {"driver": {"kind": "great_circle", "n": 128}}, "gc")
    code, out = run_cli(tmp_path, "check", {"manifold": "sphere:d=2", "input": "gc/path.json"}, "chk")
    assert code == 0 and report(out)["passed"]


def test_roll_line_matches_geodesic(tmp_path):
    cfg = {"manifold": "sphere:d=2", "driver": {"kind": "line", "direction": [1.0, 0.0], "n": 256, "T": 2.0}}
    code, out = run_cli(tmp_path, "roll", cfg)
    assert code == 0
    X = load_path(out / "path.json")
    t = X.grid
    assert np.abs(X.values - np.stack([np.sin(t), 0 * t, np.cos(t)], 1)).max() < 1e-6
    doc = json.loads((out / "frame_path.json").read_text())
    assert doc["horizontality"]["passed"]
    assert report(out)["isometry_defect"] < 1e-8


def test_transport_reports_holonomy(tmp_path):
    cfg = {"manifold": "sphere:d=2", "driver": {"kind": "latitude", "n": 256}}
    code, out = run_cli(tmp_path, "transport", cfg)
    assert code == 0
    assert abs(report(out)["holonomy_angle"] - np.pi) < 1e-4


def test_unroll_and_develop(tmp_path):
    cfg = {"manifold": "sphere:d=2", "driver": {"kind": "great_circle", "n": 128, "x0": [0, 0, 1], "v0": [1, 0, 0]}, "frame": {"x": [0, 0, 1], "g": [[1, 0], [0, 1], [0, 0]]}}
    code, out = run_cli(tmp_path, "unroll", cfg, "u")
    assert code == 0
    Z = load_path(out / "path.json")
    assert np.abs(Z.values[:, 0] - Z.grid).max() < 1e-6
    cfg = {"manifold": "sphere:d=2", "driver": {"kind": "vertical", "rate": [0.0, 0.0, 0.5], "n": 32}}
    code, out = run_cli(tmp_path, "develop", cfg, "d")
    assert code == 0 and not report(out)["horizontality"]["passed"]


def test_rde_commands(tmp_path):
    cfg = {"manifold": "so:n=3", "fields": "right_invariant", "driver": {"kind": "brownian", "dim": 3, "n": 128, "seed": 1}}
    code, out = run_cli(tmp_path, "rde", cfg, "so3")
    assert code == 0 and report(out)["membership"]["passed"]
    cfg = {"manifold": "sphere:d=2", "driver": {"kind": "great_circle", "n": 128}}
    code, out = run_cli(tmp_path, "rde", cfg, "proj")
    assert code == 0


def test_study_roundtrip(tmp_path):
    cfg = {"manifold": "sphere:d=2", "study": "roundtrip", "levels": [5, 6, 7], "driver": {"kind": "lissajous"}}
    code, out = run_cli(tmp_path, "study", cfg)
    assert code == 0
    rep = report(out)
    assert rep["order"] >= 1 and rep["passed"]
    lines = (out / "study.csv").read_text().splitlines()
    assert lines[0] == "level,n,mesh,error,isometry" and len(lines) == 4
    assert (out / "timings.csv").exists()


def test_study_holonomy(tmp_path):
    cfg = {"manifold": "sphere:d=2", "study": "holonomy", "levels": [5, 6, 7], "driver": {"kind": "latitude"}}
    code, out = run_cli(tmp_path, "study", cfg)
    assert code == 0 and report(out)["order"] >= 1


@pytest.mark.parametrize(
    "cfg, match",
    [
        ({"manifold": "sphere:d=2", "p": 3.5, "driver": {"kind": "line"}}, "p must lie"),
        ({"manifold": "sphere:d=2", "driver": {"kind": "line", "bogus": 1}}, "unknown key"),
        ({"manifold": "sphere:d=2", "driver": {"kind": "line"}, "extra": 1}, "unknown key"),
        ({"manifold": "sphere:d=2", "driver": {"kind": "spiral"}}, "unknown driver kind"),
        ({"driver": {"kind": "line"}}, "manifold key"),
        ({"manifold": "sphere:d=2", "driver": {"kind": "line"}, "solver": {"speed": 2}}, "unknown key"),
    ],
)
def test_config_validation(cfg, match):
    with pytest.raises(ConfigError, match=match):
        validate_config(cfg, "roll")


def test_validation_exit_code(tmp_path):
    code, out = run_cli(tmp_path, "roll", {"manifold": "sphere:d=2", "p": 3.5, "driver": {"kind": "line"}})
    assert code == 2


def test_domain_and_numeric_exit_codes(tmp_path):
    # frame not over a point of the manifold -> domain error
    cfg = {"manifold": "sphere:d=2", "driver": {"kind": "line", "n": 8}, "frame": {"x": [0, 0, 2.0]}}
    code, _ = run_cli(tmp_path, "roll", cfg, "dom")
    assert code == 3
    # membership failure of the driver for transport -> domain error
    cfg = {"manifold": "affine:n=3,normals=3", "driver": {"kind": "pure_area", "v": [1, 0, 0], "w": [0, 0, 1], "n": 64}, "frame": {"x": [0, 0, 0]}}
    code, out = run_cli(tmp_path, "transport", cfg, "mem")
    assert code == 3
    assert json.loads((out / "error.json").read_text())["error"] == "MembershipError"


def test_unknown_command_and_missing_config(tmp_path):
    assert main(["fly", "--config", "x.json"]) == 2
    assert main(["roll", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
