import csv
import json
import shutil
import subprocess

import pytest

from metricbv.cli import main


@pytest.fixture
def scen(tmp_path):
    assert main(["generate", "identity", "--resolution", "0.05", "--out-dir", str(tmp_path / "id")]) == 0
    return tmp_path / "id"


def test_generate_writes_standard_files(scen):
    for nm in ("space.json", "mapping.json", "kappa.json", "scenario.json"):
        assert (scen / nm).exists()


def test_fields_csv_columns_and_determinism(tmp_path, scen):
    args = ["fields", "--space", str(scen / "space.json"), "--mapping", str(scen / "mapping.json"),
            "--fields", "Lip,H,lip"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv") as fh:
        head = next(csv.reader(fh))
    assert head == ["x0", "x1", "Lip", "Lip_spread", "Lip_alpha", "H", "H_spread", "H_alpha",
                    "lip", "lip_spread", "lip_alpha"]
    assert not list(tmp_path.glob("*.part"))


def test_config_with_override(tmp_path, scen):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"space": str(scen / "space.json"), "mapping": str(scen / "mapping.json"),
                               "fields": "Lip", "out": str(tmp_path / "cfg.csv")}))
    assert main(["fields", "--config", str(cfg)]) == 0
    assert (tmp_path / "cfg.csv").exists()
    assert main(["fields", "--config", str(cfg), "--out", str(tmp_path / "over.csv")]) == 0
    assert (tmp_path / "over.csv").read_bytes() == (tmp_path / "cfg.csv").read_bytes()


def test_input_errors_exit_2(tmp_path, scen, capsys):
    out = tmp_path / "never.csv"
    assert main(["fields", "--space", str(tmp_path / "missing.json"), "--out", str(out)]) == 2
    assert not out.exists()
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["fields", "--space", str(bad), "--out", str(out)]) == 2
    assert main(["fields", "--out", str(out)]) == 2
    assert main(["fields", "--config", str(tmp_path / "nope.json")]) == 2
    assert not out.exists()
    assert "input error" in capsys.readouterr().err


@pytest.mark.parametrize("flags", [["--M", "0.5"], ["--Q", "1"], ["--p", "0.5"], ["--eps", "2"],
                                   ["--p", "3", "--Q", "2"]])
def test_parameter_errors_exit_3(tmp_path, scen, flags):
    out = tmp_path / "c.json"
    rc = main(["certify", "--space", str(scen / "space.json"), "--mapping", str(scen / "mapping.json"),
               "--out", str(out)] + flags)
    assert rc == 3
    assert not out.exists()


def test_unknown_field_is_parameter_error(tmp_path, scen):
    assert main(["fields", "--space", str(scen / "space.json"), "--mapping", str(scen / "mapping.json"),
                 "--fields", "Foo", "--out", str(tmp_path / "x.csv")]) == 3


def test_modulus_horizontal_and_budget(tmp_path, scen):
    base = ["modulus", "--space", str(scen / "space.json"), "--horizontal", "--p", "2"]
    assert main(base + ["--out-dir", str(tmp_path / "m")]) == 0
    with open(tmp_path / "m" / "modulus.csv") as fh:
        rows = list(csv.DictReader(fh))
    # discrete optimum on h = 0.05 rows, the analytic 1/a up to lattice effects
    assert rows[0]["converged"] == "1"
    assert abs(float(rows[0]["value"]) - 1.0) < 0.1
    # crossing curves: one L-BFGS-B step cannot close the duality gap
    from metricbv.modulus import gamma_A_family, save_family
    from metricbv.space import load_space
    sp = load_space(scen / "space.json")
    fam = tmp_path / "fam.json"
    save_family(gamma_A_family(sp, range(sp.n), 30, 0.3, seed=1), fam)
    cross = ["modulus", "--space", str(scen / "space.json"), "--family", str(fam), "--p", "2"]
    assert main(cross + ["--max-iter", "1", "--out-dir", str(tmp_path / "b")]) == 4
    assert (tmp_path / "b" / "density.csv").exists()
    assert main(cross + ["--out-dir", str(tmp_path / "c")]) == 0


def test_modulus_empty_family_warns(tmp_path, scen, capsys):
    assert main(["modulus", "--space", str(scen / "space.json"), "--out-dir", str(tmp_path)]) == 0
    assert "empty family" in capsys.readouterr().err


def test_hausdorff_content(tmp_path, scen):
    from metricbv.space import load_space
    sp = load_space(scen / "space.json")
    idx = [int(i) for i in range(sp.n) if abs(sp.coords[i, 1] - 0.5) < 1e-9]
    st = tmp_path / "set.json"
    st.write_text(json.dumps(idx))
    out = tmp_path / "cover.json"
    assert main(["hausdorff", "--space", str(scen / "space.json"), "--set", str(st), "--p", "1",
                 "--R", "0.2", "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["estimate"] > 0
    st.write_text(json.dumps([sp.n + 5]))
    assert main(["hausdorff", "--space", str(scen / "space.json"), "--set", str(st), "--out", str(out)]) == 2


def test_certify_pass_and_fail(tmp_path):
    out = tmp_path / "c.json"
    assert main(["certify", "--scenario", "identity", "--resolution", "0.02", "--theorem", "T4.2-Sobolev-Lip",
                 "--out", str(out)]) == 0
    assert json.loads(out.read_text())["verdict"] == "PASS"
    out2 = tmp_path / "c2.json"
    assert main(["certify", "--scenario", "identity", "--resolution", "0.02", "--theorem", "T4.2-Sobolev-Lip",
                 "--out", str(out2)]) == 0
    assert out.read_bytes() == out2.read_bytes()
    # the strips map at a coarse resolution: the BV construction cannot be certified
    out3 = tmp_path / "c3.json"
    rc = main(["certify", "--scenario", "strips-3.1", "--resolution", "0.005", "--out", str(out3)])
    assert rc == 1
    assert json.loads(out3.read_text())["verdict"] == "FAIL"


def test_reproduce_exit_code(capsys):
    assert main(["reproduce", "identity"]) == 0
    assert "[pass]" in capsys.readouterr().out
    assert main(["reproduce", "nonexistent"]) == 3


def test_generate_from_params_file(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"name": "scaling", "resolution": 0.05, "params": {"factor": 3}}))
    assert main(["generate", "--params-file", str(p), "--out-dir", str(tmp_path / "s")]) == 0
    assert main(["generate", "--out-dir", str(tmp_path / "s")]) == 2


@pytest.mark.skipif(shutil.which("metricbv") is None, reason="console script not installed")
def test_console_script(tmp_path):
    r = subprocess.run(["metricbv", "generate", "constant", "--resolution", "0.1", "--out-dir", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0
    r = subprocess.run(["metricbv", "fields", "--space", str(tmp_path / "nope.json")], capture_output=True, text=True)
    assert r.returncode == 2
