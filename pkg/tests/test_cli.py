import csv
import json
from pathlib import Path

import numpy as np
import pytest

from regnoise import config as cfgmod
from regnoise.cli import CSV_COLUMNS, main
from regnoise.config import ConfigError
from regnoise.grid_fields import read_field

GOLDEN = Path(__file__).parent / "golden" / "results_header.csv"
FAST = ["--grid.n=128", "--time.n_steps=16", "--mc.paths=2", "--mc.M=16"]


def rows(out):
    with open(out / "results.csv", newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_defaults_validate():
    cfg = cfgmod.load()
    assert cfg["grid"] == {"d": 1, "n": 512, "L": 8.0}


@pytest.mark.parametrize("override,key", [
    ({"grid.n": 100}, "grid.n"),
    ({"mc.seed": -1}, "mc.seed"),
    ({"exponents.p": 2}, "exponents.p"),
    ({"field.name": "nope"}, "field.name"),
    ({"grid.L": 2.0}, "grid.L"),
    ({"grid.bogus": 1}, "grid.bogus"),
])
def test_field_level_diagnostics(override, key):
    with pytest.raises(ConfigError) as e:
        cfgmod.load({}, override)
    assert key in [k for k, _ in e.value.problems]


def test_integrability_gate_strict():
    with pytest.raises(ConfigError, match="d/p \\+ 2/q < 1"):
        cfgmod.load({}, {"exponents.p": 3, "exponents.q": 3})
    cfgmod.load({}, {"exponents.p": 3, "exponents.q": 3, "exponents.gate": False})
    cfgmod.load({}, {"exponents.p": 4, "exponents.q": 4.1})


def test_hash_ignores_output_and_workers():
    a = cfgmod.load({}, {"output.dir": "x", "workers": 3})
    b = cfgmod.load({}, {"output.dir": "y"})
    c = cfgmod.load({}, {"mc.seed": 1})
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b) != cfgmod.config_hash(c)


def test_csv_schema_golden(tmp_path):
    assert main(["semigroup-check", "--out", str(tmp_path)]) == 0
    raw = (tmp_path / "results.csv").read_bytes().decode("utf-8")
    assert raw.splitlines()[0] + "\n" == GOLDEN.read_text()
    assert tuple(rows(tmp_path)[0]) == CSV_COLUMNS
    chash = json.loads((tmp_path / "manifest.json").read_text())["config_hash"]
    for r in rows(tmp_path)[1:]:
        assert r[1] == chash and r[0].startswith("semigroup-check-")
        float(r[3]), float(r[4]), float(r[6])


def test_manifest_contents(tmp_path):
    main(["semigroup-check", "--out", str(tmp_path), "--mc.seed=4"])
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 4 and man["config"]["mc"]["seed"] == 4
    assert {"regnoise", "numpy", "scipy", "python"} <= set(man["versions"])


def test_zero_field_trick_exit_zero(tmp_path):
    code = main(["trick-verify", "--out", str(tmp_path), "--field.name=deterministic",
                 "--field.params.amp=0"] + FAST)
    assert code == 0
    vals = {r[2]: float(r[3]) for r in rows(tmp_path)[1:]}
    assert vals["mean_abs_residual"] == 0.0


def test_gate_violation_exit_two(tmp_path, capsys):
    code = main(["trick-verify", "--out", str(tmp_path), "--exponents.p=3", "--exponents.q=3"])
    assert code == 2
    assert "d/p + 2/q < 1" in capsys.readouterr().err
    assert not (tmp_path / "results.csv").exists()


def test_bad_config_file_exit_two(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["fp-solve", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_numeric_failure_exit_one(tmp_path, capsys):
    # a regularity gate no scan can meet
    code = main(["regularity-scan", "--out", str(tmp_path), "--check.min_gain=5"] + FAST)
    assert code == 1
    assert "FAIL gain" in capsys.readouterr().err


def test_counterexample_passes_inverted_gate(tmp_path):
    code = main(["counterexample", "--out", str(tmp_path), "--time.n_steps=64", "--mc.paths=3"])
    assert code == 0
    vals = {r[2]: float(r[3]) for r in rows(tmp_path)[1:]}
    assert vals["gain"] < 0.1 and vals["identity_error"] <= 1e-10


def test_dbleheat_precondition_exit_two(tmp_path):
    assert main(["dbleheat-check", "--out", str(tmp_path), "--check.y=antithetic_shift", "--time.n_steps=64"]) == 2


def test_bspde_non_separable_exit_two(tmp_path):
    code = main(["bspde-solve", "--out", str(tmp_path), "--field.name=shifted_counterexample",
                 "--field.params.profile=step"] + FAST)
    assert code == 2


@pytest.mark.parametrize("sub", ["fp-solve", "bspde-solve"])
def test_dump_fields(tmp_path, sub):
    extra = ["--field.name=linear_in_W", "--field.params.profile=gaussian", "--dump-fields"]
    assert main([sub, "--out", str(tmp_path)] + FAST + extra) == 0
    dumped = sorted((tmp_path / "fields").iterdir())
    assert dumped
    for p in dumped:
        f = read_field(p)
        assert f.grid.n == 128 and np.all(np.isfinite(f.values))


def test_rerun_from_manifest_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = FAST + ["--field.name=linear_in_W", "--output.timing=false"]
    assert main(["bspde-solve", "--out", str(a)] + args) == 0
    assert main(["bspde-solve", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_override_syntax(tmp_path):
    assert main(["semigroup-check", "--out", str(tmp_path), "--grid.L", "9.5"]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"]["grid"]["L"] == 9.5
    assert main(["semigroup-check", "--out", str(tmp_path), "stray"]) == 2
