import json

import numpy as np
import pytest
import yaml

from auxmix import cli
from auxmix.io import build_model, config_from_dict, read_dataset, write_dataset
from auxmix.model import NumericalError
from auxmix.samplers import ConfigError


@pytest.fixture
def toy_files(tmp_path):
    data = tmp_path / "toy.csv"
    cfg = tmp_path / "cfg.yaml"
    assert cli.main(["simulate", "--n", "30", "--c", "0", "--seed", "7", "--out", str(data),
                     "--config-out", str(cfg)]) == 0
    return data, cfg


def _fit(cfg, out, *extra):
    return cli.main(["fit", "--config", str(cfg), "--output", str(out), "--iterations", "1300",
                     "--burn-in", "1000", *extra])


def test_simulate_round_trip_is_bit_exact(tmp_path):
    path = tmp_path / "d.csv"
    cli.main(["simulate", "--n", "25", "--c", "1.2", "--seed", "3", "--out", str(path)])
    back = read_dataset(path)
    from auxmix.toy import simulate_toy
    ref = simulate_toy(25, 1.2, 3)
    assert list(back) == ["y", "x1", "x2"]
    for k in ref:
        assert np.array_equal(back[k], ref[k])
    again = tmp_path / "e.csv"
    cli.main(["simulate", "--n", "25", "--c", "1.2", "--seed", "3", "--out", str(again)])
    assert path.read_bytes() == again.read_bytes()


def test_fit_writes_bundle(toy_files, tmp_path):
    _, cfg = toy_files
    out = tmp_path / "run"
    assert _fit(cfg, out) == 0
    assert sorted(p.name for p in out.iterdir()) == ["draws_chain1.csv", "manifest.json", "summary.json"]
    header = (out / "draws_chain1.csv").read_text().splitlines()[0]
    assert header == "beta0,beta1"
    assert len((out / "draws_chain1.csv").read_text().splitlines()) == 301
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["chosen_algorithm"] == "IAMS"
    assert manifest["seed"] == 7 and len(manifest["config_hash"]) == 16
    assert manifest["config"]["sampler"]["iterations"] == 1300
    summary = json.loads((out / "summary.json").read_text())
    b1 = summary["parameters"]["beta1"]
    assert set(b1) == {"mean", "sd", "quantiles", "ess"}
    assert summary["chains"][0]["tail_flags"]["n_flagged"] == 0


def test_fit_is_byte_identical_across_runs_and_workers(toy_files, tmp_path):
    _, cfg = toy_files
    a, b = tmp_path / "a", tmp_path / "b"
    assert _fit(cfg, a, "--chains", "2", "--algorithm", "MH_IAMS", "--workers", "1") == 0
    assert _fit(cfg, b, "--chains", "2", "--algorithm", "MH_IAMS", "--workers", "2") == 0
    for name in ("draws_chain1.csv", "draws_chain2.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "draws_chain1.csv").read_bytes() != (a / "draws_chain2.csv").read_bytes()


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv("AUXMIX_WORKERS", "3")
    assert cli.default_workers() == 3
    monkeypatch.setenv("AUXMIX_WORKERS", "many")
    with pytest.raises(ConfigError):
        cli.default_workers()


def test_config_errors_exit_2(toy_files, tmp_path, capsys):
    _, cfg = toy_files
    assert cli.main(["fit", "--config", str(cfg), "--iterations", "100", "--burn-in", "100"]) == 2
    assert cli.main(["fit", "--config", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"schema_version": 9, "data": "toy.csv"}))
    assert cli.main(["fit", "--config", str(bad)]) == 2
    bad.write_text(yaml.safe_dump({"data": str(toy_files[0]), "model": {"fixed_effects": ["x9"]}}))
    assert cli.main(["fit", "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_numerical_failure_exit_3_keeps_partial_outputs(toy_files, tmp_path, monkeypatch):
    _, cfg = toy_files
    real = cli.run_chain
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericalError("precision not positive definite")
        return real(*args, **kwargs)

    monkeypatch.setattr(cli, "run_chain", flaky)
    out = tmp_path / "fail"
    assert _fit(cfg, out, "--chains", "2") == 3
    assert (out / "draws_chain1.csv").exists()
    failure = json.loads((out / "failure.json").read_text())
    assert failure["completed_chains"] == 1
    assert json.loads((out / "manifest.json").read_text())["status"] == "numerical_failure"


def test_compare_outputs(toy_files, tmp_path):
    _, cfg = toy_files
    out = tmp_path / "cmp"
    code = cli.main(["compare", "--config", str(cfg), "--output", str(out), "--iterations", "3000",
                     "--burn-in", "1000", "--algorithms", "MH_IAMS", "RIAMS"])
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert {"densities.csv", "acceptance.csv", "timing.csv", "ks.csv", "manifest.json"} <= names
    timing = (out / "timing.csv").read_text().splitlines()
    assert timing[0] == "algorithm,seconds_per_iteration,relative_to_IAMS"
    assert timing[1].startswith("IAMS,") and timing[1].endswith(",1.0")
    ks = [line.split(",") for line in (out / "ks.csv").read_text().splitlines()[1:]]
    assert len(ks) == 6 and all(float(v) <= 0.1 for *_, v in ks)
    dens = (out / "densities.csv").read_text().splitlines()
    assert dens[0] == "parameter,source,x,density"
    assert any(",oracle," in line for line in dens)


def test_diagnose_outputs(toy_files, tmp_path):
    _, cfg = toy_files
    out = tmp_path / "dg"
    code = cli.main(["diagnose", "--config", str(cfg), "--output", str(out), "--iterations", "1400",
                     "--burn-in", "1000", "--algorithm", "IAMS"])
    assert code == 0
    assert (out / "delta.csv").read_text().startswith("row,obs,slot,nu,delta\n")
    assert "delta law: mixture" in (out / "report.txt").read_text()
    assert cli.main(["diagnose", "--draws", str(out / "draws_chain1.csv")]) == 0


def test_random_effect_blocks_from_config(tmp_path):
    rng = np.random.default_rng(0)
    n = 24
    g = np.repeat(np.arange(4), 6)
    write_dataset(tmp_path / "re.csv", {"y": rng.poisson(2.0, n), "x": rng.standard_normal(n),
                                        "g": g, "expo": rng.uniform(0.5, 2, n)})
    D = np.diff(np.eye(4), axis=0)
    np.savetxt(tmp_path / "K.csv", D.T @ D, delimiter=",")
    raw = {"data": "re.csv", "model": {"response": "y", "offset": "expo", "fixed_effects": ["x"],
           "random_effects": [{"name": "grp", "group": "g", "precision": "K.csv",
                               "prior": {"kind": "gamma", "a": 1.0, "b": 1.0}}]}}
    cfg = config_from_dict(raw, base_dir=str(tmp_path))
    model = build_model(cfg)
    assert model.Q == 1 and model.blocks[0].m == 4 and model.blocks[0].rank == 3
    assert np.allclose(model.t, read_dataset(tmp_path / "re.csv")["expo"])
    np.savetxt(tmp_path / "K.csv", np.array([[1.0, 2.0], [0.0, 1.0]]), delimiter=",")
    raw["model"]["random_effects"][0]["group"] = None
    raw["model"]["random_effects"][0]["columns"] = ["x", "expo"]
    with pytest.raises(ConfigError):
        build_model(config_from_dict(raw, base_dir=str(tmp_path)))


def test_offsets_default_to_one(toy_files):
    data, cfg = toy_files
    model = build_model(config_from_dict({"data": str(data), "model": {"fixed_effects": ["x1"]}}))
    assert np.all(model.t == 1.0)
