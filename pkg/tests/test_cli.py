import csv
import json
import pickle

import pytest

from mafl import cli


def run(*argv):
    return cli.main(list(argv))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pipeline_on_tiny(tiny_path, tmp_path):
    out = str(tmp_path / "o")
    for cmd in ("validate", "estimate", "optimize", "simulate"):
        assert run(cmd, "--scenario", str(tiny_path), "--out", out) == cli.EXIT_OK
    assert run("bound", "--scenario", str(tiny_path), "--out", out, "--with-lhs") == cli.EXIT_OK
    man = json.loads((tmp_path / "o" / "MANIFEST.json").read_text())
    assert man["status"] == "ok" and man["command"] == "bound"
    rows = read_rows(tmp_path / "o" / "bound.csv")
    terms = {(r["task"], r["term"]): float(r["value"]) for r in rows}
    for j in ("0", "1"):
        parts = sum(terms[(j, f"term_{k}")] for k in "abcde")
        assert terms[(j, "total")] == pytest.approx(parts)
        assert (j, "lhs_conv") in terms
    consts = cli.read_constants(tmp_path / "o" / "constants.json")
    assert len(consts) == 2 and consts[0].estimated


def test_simulate_without_solution_is_optimizer_error(tiny_path, tmp_path):
    assert run("simulate", "--scenario", str(tiny_path), "--out", str(tmp_path)) == cli.EXIT_OPTIMIZER
    man = json.loads((tmp_path / "MANIFEST.json").read_text())
    assert man["status"] == "failed"


def test_invalid_scenario_exit_code(tmp_path, tiny_path):
    bad = tmp_path / "bad.toml"
    bad.write_text(tiny_path.read_text().replace("agg_weight = 0.5", "agg_weight = 1.5"))
    assert "agg_weight = 1.5" in bad.read_text()
    assert run("validate", "--scenario", str(bad), "--out", str(tmp_path / "o")) == cli.EXIT_VALIDATION
    assert run("validate", "--scenario", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "o")) \
        == cli.EXIT_VALIDATION
    assert run("validate", "--scenario", str(tiny_path), "--out", str(tmp_path / "o"), "--seeds", "x") \
        == cli.EXIT_VALIDATION


def test_unknown_sweep_parameter(tiny_path, tmp_path, capsys):
    code = run("sweep", "--scenario", str(tiny_path), "--out", str(tmp_path), "--param", "speed.0",
               "--values", "1,2")
    assert code == cli.EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "importance.J" in err and "c1" in err
    assert run("sweep", "--scenario", str(tiny_path), "--out", str(tmp_path), "--param", "importance",
               "--values", "1") == cli.EXIT_VALIDATION


def test_compare_single_seed_has_zero_stderr(tiny_path, tmp_path):
    assert run("compare", "--scenario", str(tiny_path), "--out", str(tmp_path)) == cli.EXIT_OK
    rows = read_rows(tmp_path / "summary.csv")
    assert {r["method"] for r in rows} == set(cli.METHODS)
    for r in rows:
        assert r["seeds"] == "1"
        assert float(r["final_loss_stderr"]) == 0.0 and float(r["energy_j_stderr"]) == 0.0
    assert "mafl.csv" in (tmp_path / "plot.gp").read_text()


def test_command_failed_pickles():
    exc = pickle.loads(pickle.dumps(cli.CommandFailed(3, "boom")))
    assert exc.code == 3 and str(exc) == "boom"


def test_constants_roundtrip(tmp_path):
    from helpers import unit_constants

    c = [unit_constants(3), unit_constants(3).inflated(2.0)]
    cli.write_constants(tmp_path / "c.json", c)
    back = cli.read_constants(tmp_path / "c.json")
    for a, b in zip(c, back):
        assert a.smoothness == b.smoothness and list(a.dissimilarity) == list(b.dissimilarity)
