import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from latticebsde import config
from latticebsde.cli import main, run, to_json
from latticebsde.errors import ConfigInvalid, TreeTooLarge

BINOMIAL = {
    "basis": {"vectors": [[1.0]]},
    "horizon": 1,
    "driver": {"kind": "linear", "slope": [0.5]},
    "payoff": {"kind": "table", "values": [-1, 1]},
}

ENTROPIC = {
    "basis": {"vectors": [[1.0, 0.2], [-0.3, 1.0]]},
    "horizon": 3,
    "reference": [0.2, 0.5, 0.3],
    "driver": {"kind": "entropic", "risk_aversion": 1.5},
    "payoff": {"kind": "call", "weights": [1.0, 0.5], "strike": 0.2},
    "invest": {"certify": 20},
    "robust": {"alternatives": 5},
    "agents": [
        {"driver": {"kind": "entropic", "risk_aversion": 1.0, "belief": [0.3, 0.3, 0.4]},
         "endowment": {"kind": "linear", "weights": [1.0, 0.0]}},
        {"driver": {"kind": "entropic", "risk_aversion": 2.0}},
    ],
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _summary(out):
    return json.loads((out / "summary.json").read_text())


def test_binomial_solve(tmp_path):
    out = tmp_path / "out"
    assert run("solve", _write(tmp_path, BINOMIAL), out) == 0
    s = _summary(out)
    assert s["value"] == 0.5 and s["method"] == "tree"
    rows = list(csv.reader(open(out / "solution.csv")))
    assert rows[0] == ["n", "word", "Y", "Z0"]
    assert rows[1] == ["0", "", "0.5", "1"]


@pytest.mark.parametrize("command", ["solve", "robust", "invest", "equilibrium", "check"])
def test_every_command_runs(tmp_path, command):
    out = tmp_path / command
    assert run(command, _write(tmp_path, ENTROPIC), out, seed=4) == 0
    s = _summary(out)
    assert s["command"] == command and s["seed"] == 4


def test_output_files(tmp_path):
    cfg = _write(tmp_path, ENTROPIC)
    run("robust", cfg, tmp_path / "r")
    assert (tmp_path / "r" / "measure.csv").exists()
    assert _summary(tmp_path / "r")["certified"]
    run("invest", cfg, tmp_path / "i")
    header = next(csv.reader(open(tmp_path / "i" / "strategies.csv")))
    assert header[:4] == ["n", "word", "pi0", "pi1"]
    run("equilibrium", cfg, tmp_path / "e")
    eq = json.loads((tmp_path / "e" / "equilibrium.json").read_text())
    assert set(eq) == {"agents", "in_equilibrium", "residual", "tolerance"}
    assert not eq["in_equilibrium"]


def test_markov_solve_matches_tree(tmp_path):
    cfg = dict(ENTROPIC, markov=True)
    run("solve", _write(tmp_path, cfg), tmp_path / "m")
    run("solve", _write(tmp_path, ENTROPIC, "t.json"), tmp_path / "t")
    m, t = _summary(tmp_path / "m"), _summary(tmp_path / "t")
    assert m["method"] == "lattice" and m["evaluated_points"] <= m["point_bound"]
    assert m["value"] == pytest.approx(t["value"], abs=1e-12)


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = {k: v for k, v in BINOMIAL.items() if k != "horizon"}
    assert run("solve", _write(tmp_path, bad), tmp_path / "o") == 2
    assert "config.horizon" in capsys.readouterr().err
    wrong = dict(BINOMIAL, driver={"kind": "entropic", "risk_aversion": -1})
    assert run("solve", _write(tmp_path, wrong), tmp_path / "o") == 2
    assert run("solve", tmp_path / "missing.json", tmp_path / "o") == 2


def test_tree_too_large_exit_code(tmp_path):
    big = dict(BINOMIAL, horizon=30)
    assert run("solve", _write(tmp_path, big), tmp_path / "o") == 2
    with pytest.raises(TreeTooLarge):
        config.parse(big)


def test_numerical_failure_exit_code(tmp_path):
    # the linear driver has no maximiser, so investing fails at run time
    assert run("invest", _write(tmp_path, BINOMIAL), tmp_path / "o") == 3


def test_config_paths_in_errors():
    with pytest.raises(ConfigInvalid) as exc:
        config.parse(dict(BINOMIAL, payoff={"kind": "table", "values": [1, 2, 3]}))
    assert exc.value.path == "config.payoff.values"
    with pytest.raises(ConfigInvalid) as exc:
        config.parse(dict(ENTROPIC, agents=[{"driver": {"kind": "nope"}}]))
    assert exc.value.path == "config.agents[0].driver.kind"


def test_variance_swap_payoff():
    cfg = config.parse({"basis": {"vectors": [[1.0, 0.5], [-1.0, 0.5]]}, "horizon": 2,
                        "payoff": {"kind": "variance_swap", "notional": 2.0}})
    np.testing.assert_allclose(cfg.payoff(), 2.0 * cfg.tree.positions(2)[:, 1])


def test_to_json_format():
    text = to_json({"b": 0.1, "a": [1, np.inf], "c": True})
    assert text == '{\n  "a": [1, "inf"],\n  "b": 0.10000000000000001,\n  "c": true\n}'


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, BINOMIAL)
    proc = subprocess.run([sys.executable, "-m", "latticebsde", "solve", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert main(["check", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "-1"]) == 2
