import json
import subprocess
import sys
from importlib import resources

import pytest

from mcot import cli

BUNDLED = [{"kind": "poly", "coeffs": [0, 0, 3]}, {"kind": "poly", "coeffs": [2, -2]}]


@pytest.fixture
def out(tmp_path, monkeypatch):
    d = tmp_path / "out"
    monkeypatch.setenv(cli.OUTPUT_ENV, str(d))
    return d


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def error_of(capsys):
    return json.loads(capsys.readouterr().err)


def mh_config(**kw):
    cfg = {"N": 6, "beta": 1e-3, "iters": 200, "seed": 1, "marginals": BUNDLED,
           "cost": {"kind": "power", "p": 2}}
    cfg.update(kw)
    return cfg


def pgd_config(**kw):
    cfg = {"marginals": BUNDLED, "cost": {"kind": "power", "p": 2},
           "family": {"family": "regpp", "N": 3}, "eta_inv": 30, "iters": 20}
    cfg.update(kw)
    return cfg


def test_oracle_writes_packaged_fixtures(out):
    assert cli.main(["oracle"]) == cli.EXIT_OK
    packaged = resources.files("mcot").joinpath("data/fixtures.json").read_text()
    assert (out / "fixtures.json").read_text() == packaged


def test_unknown_key_is_a_config_error(tmp_path, out, capsys):
    path = write_config(tmp_path, mh_config(temperature=3))
    assert cli.main(["mh", "--config", path]) == cli.EXIT_CONFIG
    err = error_of(capsys)
    assert err["error"] == "schema" and "temperature" in err["message"]
    assert not out.exists()


def test_missing_and_malformed_config(tmp_path, out, capsys):
    assert cli.main(["pgd", "--config", str(tmp_path / "none.json")]) == cli.EXIT_CONFIG
    assert error_of(capsys)["error"] == "config_unreadable"
    bad = tmp_path / "bad.json"
    bad.write_text("{N: 3")
    assert cli.main(["pgd", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert error_of(capsys)["error"] == "config_not_json"


def test_invalid_value_is_a_config_error(tmp_path, out, capsys):
    cfg = pgd_config(marginals=[{"kind": "uniform", "a": 0.7, "b": 0.2}, BUNDLED[1]])
    assert cli.main(["pgd", "--config", write_config(tmp_path, cfg)]) == cli.EXIT_CONFIG
    assert error_of(capsys)["error"] == "invalid_value"


def test_bad_arguments_exit_with_config_code(capsys):
    assert cli.main(["rates", "--experiment", "nope", "--config", "x"]) == cli.EXIT_CONFIG


def test_martingale_in_wrong_order_is_infeasible(tmp_path, out, capsys):
    cfg = pgd_config(variant="martingale", cost={"kind": "power", "p": 3},
                     marginals=[{"kind": "uniform"}, {"kind": "uniform", "a": 0.25, "b": 0.75}])
    assert cli.main(["pgd", "--config", write_config(tmp_path, cfg)]) == cli.EXIT_INFEASIBLE
    assert error_of(capsys)["error"] == "infeasible"


def test_pgd_budget_exhausted_exits_four(tmp_path, out, capsys):
    assert cli.main(["pgd", "--config", write_config(tmp_path, pgd_config())]) == cli.EXIT_FAILURE
    summary = json.loads((out / "pgd_summary.json").read_text())
    assert summary["status"] == "not_converged" and summary["iterations"] == 20
    head = (out / "pgd_trace.csv").read_text().splitlines()[0]
    assert head == "iter,F,cost,penalty,grad_norm"
    assert (out / "pgd_state.csv").read_text().startswith("w,x,y\n")


def test_mh_outputs_and_lp_dump(tmp_path, out, capsys):
    path = write_config(tmp_path, mh_config(tolerance=0.05))
    assert cli.main(["mh", "--config", path, "--dump-lp"]) == cli.EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["files"] == ["mh_lp.csv", "mh_trace.csv", "mh_configuration.csv",
                                "mh_summary.json"]
    assert (out / "mh_trace.csv").read_text().startswith("iter,cost_current,cost_best,accepted\n")
    assert (out / "mh_configuration.csv").read_text().startswith("w,i,j\n")
    lp = (out / "mh_lp.csv").read_text().splitlines()
    # one column per particle (K = 3N + 2) plus the right-hand side
    assert lp[0].split(",")[-1] == "b" and len(lp[0].split(",")) == 21


def test_mh_over_tolerance_exits_four(tmp_path, out):
    path = write_config(tmp_path, mh_config(iters=0, tolerance=1e-12))
    assert cli.main(["mh", "--config", path]) == cli.EXIT_FAILURE


@pytest.mark.parametrize("command,cfg,files", [
    ("mh", mh_config(), ["mh_trace.csv", "mh_configuration.csv"]),
    ("pgd", pgd_config(), ["pgd_trace.csv", "pgd_state.csv"]),
    ("reduce", {"random_atoms": 40, "families": [{"family": "hat", "N": 3}] * 2},
     ["reduce_measure.csv"]),
])
def test_same_seed_gives_identical_csv(tmp_path, monkeypatch, command, cfg, files):
    path = write_config(tmp_path, cfg)
    texts = []
    for run in ("a", "b", "c"):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / run))
        seed = ["--seed", "5"] if run != "c" else ["--seed", "6"]
        cli.main([command, "--config", path] + seed)
        texts.append([(tmp_path / run / f).read_bytes() for f in files])
    assert texts[0] == texts[1]
    assert texts[0] != texts[2]


def test_rates_experiments(tmp_path, out, capsys):
    path = write_config(tmp_path, {"marginals": BUNDLED, "cost": {"kind": "power", "p": 1},
                                   "N": [5, 10], "K": 1})
    assert cli.main(["rates", "--experiment", "pwc", "--config", path]) == cli.EXIT_OK
    summary = json.loads((out / "rates_pwc_summary.json").read_text())
    assert summary["pass"] and summary["fixture_drift"] == [] and summary["worst_margin"] > 0
    head = (out / "rates_pwc.csv").read_text().splitlines()[0]
    assert head == "check,N,exact,approx,gap,lower,bound,satisfied"
    one = write_config(tmp_path, {"marginals": BUNDLED[:1], "N": [4]}, "one.json")
    assert cli.main(["rates", "--experiment", "w2", "--config", one]) == cli.EXIT_CONFIG
    smooth = write_config(tmp_path, {"marginals": [{"kind": "poly", "coeffs": [0.5, 1.0]}],
                                     "N": [2, 4], "p": 2}, "smooth.json")
    assert cli.main(["rates", "--experiment", "smooth", "--config", smooth]) == cli.EXIT_OK


def test_reduce_hundred_atoms_to_at_most_ten(tmp_path, out):
    cfg = {"random_atoms": 100, "families": [{"family": "pwc", "N": 4}] * 2,
           "cost": {"kind": "power", "p": 2}, "seed": 3}
    assert cli.main(["reduce", "--config", write_config(tmp_path, cfg)]) == cli.EXIT_OK
    summary = json.loads((out / "reduce_summary.json").read_text())
    assert summary["atoms_out"] <= 10 and summary["max_moment_error"] <= 1e-9


def test_reduce_explicit_measure(tmp_path, out):
    cfg = {"measure": {"points": [[0, 0], [0.5, 0.5], [1, 1]], "weights": [1, 2, 1]},
           "families": [{"family": "affine", "N": 1}] * 2}
    assert cli.main(["reduce", "--config", write_config(tmp_path, cfg)]) == cli.EXIT_OK
    assert json.loads((out / "reduce_summary.json").read_text())["atoms_out"] <= 3


def test_env_var_overrides_config_dir(tmp_path, out):
    path = write_config(tmp_path, mh_config(iters=5, output_dir=str(tmp_path / "cfgdir")))
    cli.main(["mh", "--config", path])
    assert (out / "mh_trace.csv").exists() and not (tmp_path / "cfgdir").exists()


def test_summary_schema_rejects_unknown_fields():
    import jsonschema
    with pytest.raises(jsonschema.ValidationError):
        cli.validate_summary({"command": "mh", "status": "ok", "extra": 1})
    with pytest.raises(jsonschema.ValidationError):
        cli.validate_summary({"command": "rates", "status": "ok"})


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mcot", "mh", "--config",
                          str(tmp_path / "missing.json")], capture_output=True, text=True)
    assert res.returncode == cli.EXIT_CONFIG
    assert json.loads(res.stderr)["exit_code"] == cli.EXIT_CONFIG
