from __future__ import annotations

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from postadiabatic.cli import run
from postadiabatic.errors import ValidationError
from postadiabatic.scenario import (bundled_scenarios, emit_scenario, fmt, load_scenario, parse_scenario,
                                    scenario_hash)

MINIMAL = {"format_version": 1, "name": "ground",
           "hamiltonian": {"d": 2, "K": 2, "H0": [[0, 0], [0, 0]], "Hlin": [[[0, 1], [1, 0]], [[1, 0], [0, -1]]]},
           "level": 0, "epsilon": 0.1, "mass": 1.0, "initial": {"q": [1.0, 0.0], "v": [0.0, 1.0]}}


def _with(**changes):
    d = json.loads(json.dumps(MINIMAL))
    d.update(changes)
    return d


# ------------------------------------------------------------------ parsing
def test_minimal_scenario_defaults():
    sc = parse_scenario(json.dumps(MINIMAL))
    assert sc.tolerances["gap_tol"] == 1e-8
    assert sc.tolerances["rtol"] == 1e-9
    assert sc.data["order"] == "O2"
    assert sc.data["mass_convention"] == "physical"
    assert sc.K == 2


def test_hlin_length_mismatch_names_both_values():
    bad = _with(hamiltonian=dict(MINIMAL["hamiltonian"], K=3))
    with pytest.raises(ValidationError) as exc:
        parse_scenario(bad)
    msg = str(exc.value)
    assert "2" in msg and "K=3" in msg
    assert exc.value.pointer == "/hamiltonian/Hlin"


def test_unknown_key_has_pointer():
    with pytest.raises(ValidationError) as exc:
        parse_scenario(_with(initial={"q": [1, 0], "v": [0, 1], "w": [0, 0]}))
    assert exc.value.pointer.startswith("/initial")


def test_non_hermitian_rejected():
    h = dict(MINIMAL["hamiltonian"], H0=[[0, 1], [0, 0]])
    with pytest.raises(ValidationError) as exc:
        parse_scenario(_with(hamiltonian=h))
    assert exc.value.pointer == "/hamiltonian/H0"


def test_initial_dimension_checked():
    with pytest.raises(ValidationError):
        parse_scenario(_with(initial={"q": [1.0], "v": [0.0, 1.0]}))


def test_invalid_json():
    with pytest.raises(ValidationError):
        parse_scenario("{not json")


@pytest.mark.parametrize("name", bundled_scenarios())
def test_round_trip_bit_identical(name):
    sc = load_scenario(name)
    text = emit_scenario(sc)
    again = parse_scenario(text)
    assert emit_scenario(again) == text
    assert again.hash == sc.hash
    np.testing.assert_array_equal(again.field.Hlin, sc.field.Hlin)


def test_complex_entries_round_trip():
    sc = load_scenario("complex_standard")
    assert sc.field.Hlin[1][0, 1] == -1j
    assert sc.data["hamiltonian"]["Hlin"][1][0][1] == [0.0, -1.0]


def test_bundled_set():
    assert set(bundled_scenarios()) == {"complex_standard", "fourth_order_k1", "odd_constraint_k3",
                                        "two_level_excited", "two_level_ground"}


def test_number_format_round_trips():
    for x in (0.1, 1 / 3, 1e-300, -2.5e17):
        assert float(fmt(x)) == x


def test_hash_depends_on_content():
    assert scenario_hash(MINIMAL) != scenario_hash(_with(epsilon=0.2))


# ------------------------------------------------------------------ command line
def _files(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d)) if not f.startswith("manifest")}


@pytest.mark.parametrize("cmd", ["spectrum", "tensors", "geometry"])
def test_commands_are_deterministic(tmp_path, cmd):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run([cmd, "--scenario", "two_level_ground", "--out", str(a)]) == 0
    assert run([cmd, "--scenario", "two_level_ground", "--out", str(b)]) == 0
    fa, fb = _files(a), _files(b)
    assert fa and fa == fb
    h = load_scenario("two_level_ground").hash
    for name, content in fa.items():
        assert h in content.decode()
    man = json.load(open(a / f"manifest_{cmd}.json"))
    assert man["scenario_hash"] == h and man["all_passed"]


def test_verify_ground_passes(tmp_path, capsys):
    assert run(["verify", "--scenario", "two_level_ground", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS" in out


def test_geometry_needs_two_coordinates(tmp_path):
    assert run(["geometry", "--scenario", "fourth_order_k1", "--out", str(tmp_path)]) == 2


def test_excited_geometry_reports_signature_change(tmp_path):
    code = run(["geometry", "--scenario", "two_level_excited", "--out", str(tmp_path)])
    man = json.load(open(tmp_path / "manifest_geometry.json"))
    assert code == 0 and man["all_passed"]


def test_o4_with_two_coordinates_unsupported(tmp_path):
    assert run(["simulate", "--scenario", "complex_standard", "--order", "O4", "--out", str(tmp_path)]) == 4


def test_hamiltonian_odd_k_unsupported(tmp_path):
    assert run(["hamiltonian", "--scenario", "odd_constraint_k3", "--out", str(tmp_path)]) == 4


@pytest.mark.parametrize("argv", [["spectrum", "--scenario", "no_such_scenario"],
                                  ["simulate", "--scenario", "two_level_ground", "--order", "O7"],
                                  ["simulate", "--scenario", "two_level_ground", "--epsilon", "2"]])
def test_invalid_input_exit_code(tmp_path, argv):
    assert run(argv + ["--out", str(tmp_path)]) == 2


def test_simulate_writes_trajectory(tmp_path):
    assert run(["simulate", "--scenario", "two_level_ground", "--out", str(tmp_path)]) == 0
    lines = open(tmp_path / "trajectory.csv").read().splitlines()
    assert lines[0].startswith("# scenario_hash=")
    assert lines[2].split(",")[:3] == ["s", "q0", "q1"]
    assert len(lines) == 3 + 101


def test_sweep_order2_slope(tmp_path):
    assert run(["sweep", "--scenario", "complex_standard", "--order", "O2", "--out", str(tmp_path)]) == 0
    rep = json.load(open(tmp_path / "sweep.json"))
    assert abs(rep["fitted_slope"]["O2"] - 3) < 0.5


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "postadiabatic", "spectrum", "--scenario", "two_level_ground",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "spectrum.json").exists()
