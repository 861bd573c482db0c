import json

import numpy as np
from hypothesis import given, strategies as st

from metacog.report import fmt, manifest, read_csv, sha256_of, trajectory_rows, write_csv, write_manifest
from metacog.stl import PredicateStack, parse_formula, parse_predicate
from metacog.trajectory import Trajectory


def test_fmt_fixed_forms():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(3) == "3" and fmt(np.int64(4)) == "4"
    assert fmt(True) == "true"
    assert fmt(float("nan")) == "nan" and fmt(-np.inf) == "-inf"
    assert fmt("nominal") == "nominal"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips(x):
    assert float(fmt(x)) == x


def test_csv_newlines_and_round_trip(tmp_path):
    path = tmp_path / "a.csv"
    write_csv(str(path), ["t", "x"], [[0.0, 1.5], [0.1, -2.0]])
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    rows = read_csv(str(path))
    assert rows == [{"t": "0", "x": "1.5"}, {"t": "0.10000000000000001", "x": "-2"}]


def test_trajectory_columns():
    x = np.array([[0.5, 0.0], [1.5, 0.0], [2.5, 0.0]])
    u = np.zeros((3, 1))
    r = np.zeros((3, 2))
    tr = Trajectory(0.0, 0.5, x, u, r, ["nominal"] * 3)
    stack = PredicateStack([parse_predicate("abs(x1) < 2")], 1.0, [0.0, 0.0])
    header, rows = trajectory_rows(tr, stack, parse_formula("F[0,0.5](x1 > 1)"))
    assert header == ["t", "x1", "x2", "u1", "r1", "r2", "plant", "xi_a", "rho_safety", "rho_spec"]
    assert [row[8] for row in rows] == [1.5, 0.5, -0.5]
    assert rows[0][9] == 0.5 and rows[1][9] == 1.5


def test_manifest_digests(tmp_path):
    (tmp_path / "b.csv").write_text("x\n1\n")
    m = manifest("simulate", 4, ["b.csv"], str(tmp_path))
    assert m["files"]["b.csv"] == sha256_of(str(tmp_path / "b.csv"))
    assert m["seed"] == 4 and set(m["versions"]) == {"metacog", "numpy", "scipy", "python"}
    write_manifest(str(tmp_path / "manifest.json"), m)
    assert json.loads((tmp_path / "manifest.json").read_text()) == m
