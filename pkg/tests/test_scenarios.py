import json
import math

import numpy as np
import pytest

from metricbv import scenarios as S
from metricbv.numbers import load_mapping, load_weight
from metricbv.space import load_space


@pytest.mark.parametrize("name", S.NAMES)
def test_generate_is_deterministic(name):
    h = 0.01 if name == "strips-3.1" else 0.02
    a, b = S.generate(name, h), S.generate(name, h)
    assert np.array_equal(a.mapping.values, b.mapping.values)
    assert np.array_equal(a.space.coords, b.space.coords)
    assert S.scenario_to_dict(a) == S.scenario_to_dict(b)
    assert a.expectations, "every scenario states what it expects"
    for e in a.expectations:
        assert e.comparator in ("<=", ">=", "within", "equals", "in")
        assert e.provenance in ("PAPER", "DERIVED", "TRIVIAL")


def test_aliases_and_unknown():
    assert S.generate("example-5.2", 0.02).name == "dirac-5.2"
    with pytest.raises(ValueError):
        S.generate("no-such-example")
    with pytest.raises(ValueError):
        S.generate("identity", -1.0)


def test_strips_resolution_guard():
    J = S.resolvable_strips(0.002)
    # strip j has width 1/(j(j+1))
    assert 1.0 / (J * (J + 1)) >= 2 * 0.002 > 1.0 / ((J + 1) * (J + 2))
    with pytest.raises(ValueError):
        S.generate("strips-3.1", 0.02, {"strips": 50})


def test_strips_map_closed_form():
    x1 = np.array([0.75, 0.4, 0.3, 0.22, 0.18])
    out = S.strips_map(x1, np.zeros(5), 10)[:, 0]
    # strips j = 1, 2, 3, 4, 5: the even ones are reflected to 2 - x1
    assert np.allclose(out, [0.75, 1.6, 0.3, 1.78, 0.18])
    # beyond the last resolved strip the map is the identity
    assert S.strips_map(np.array([0.105]), np.zeros(1), 8)[0, 0] == 0.105


def test_example_formulas():
    assert S.dirac_lambda(np.array([0.2, 0.5, 0.7]), [(0.5, 1.0)]).tolist() == [0.2, 1.5, 1.7]
    s = np.array([0.001, 0.125, 1.0])
    # F' = g
    hgt = 1e-7
    assert np.allclose((S.F54(s + hgt) - S.F54(s - hgt)) / (2 * hgt), S.g54(s), rtol=1e-5)
    assert S.shear_profile(np.array([0.5]), [(0.5, 0.2)], 0.8)[0] == 0.0


def test_grid_alignment_errors():
    with pytest.raises(ValueError):
        S.generate("dirac-5.2", 0.03, {"atoms": [[0.5, 1.0]]})
    with pytest.raises(ValueError):
        S.generate("jumpset-5.6-analogue", 0.03, {"lines": [[0.5, 0.2]]})


def test_expectation_comparators():
    E = S.Expectation
    assert E("q", "<=", 1.0, 0.1).check(1.09)
    assert not E("q", "<=", 1.0, 0.1).check(1.11)
    assert E("q", ">=", 1.5).check(1.5)
    assert E("q", "within", 1.0, 0.1).check((0.95, 1.05))
    assert not E("q", "within", 1.0, 0.1).check((0.85, 1.05))
    assert E("q", "equals", "PASS").check("PASS")
    assert E("q", "in", True).check(True)
    with pytest.raises(ValueError):
        E("q", "??", 1).check(1)


def test_unknown_quantity():
    with pytest.raises(ValueError):
        S.measure(S.generate("identity"), "nope")


@pytest.mark.parametrize("name", ["identity", "scaling", "constant", "jumpset-5.6-analogue", "dirac-5.2"])
def test_reproduce_fast_scenarios(name):
    res = S.reproduce(name)
    assert res.passed, res.summary()
    assert "scenario" in res.summary()


def test_save_and_reload(tmp_path):
    sc = S.generate("dirac-5.2", 0.02)
    paths = S.save_scenario(sc, tmp_path / "d")
    sp = load_space(paths["space"])
    f = load_mapping(paths["mapping"], sp)
    k = load_weight(paths["kappa"], sp)
    assert np.array_equal(sp.coords, sc.space.coords)
    assert np.array_equal(f.values, sc.mapping.values)
    assert np.array_equal(k.masses, sc.weights["kappa"].masses)
    rec = json.loads((tmp_path / "d" / "scenario.json").read_text())
    assert rec["name"] == "dirac-5.2" and rec["params"]["h"] == 0.02


def test_load_params(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"name": "scaling", "resolution": 0.05, "params": {"factor": 3}}))
    name, res, params = S.load_params(p)
    sc = S.generate(name, res, params)
    assert np.allclose(sc.mapping.values, 3 * sc.space.coords)
    p.write_text(json.dumps({"resolution": 0.05}))
    with pytest.raises(ValueError):
        S.load_params(p)


def test_distortion_bracket_coarse():
    sc = S.generate("separable-5.4", 0.01)
    out = S.distortion_bracket(sc)
    assert out["ok"] and out["points"] > 0
    assert math.isclose(out["fraction"], 1.0)
