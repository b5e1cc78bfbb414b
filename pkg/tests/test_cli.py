import csv
import json

import pytest

from doseinfer.cli import EXIT_INVALID, EXIT_OK, config_hash, main
from doseinfer.data import write_csv
from doseinfer.simulation import DgpConfig, gen_data


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_csv(gen_data(DgpConfig(2, 200, 1)), root / "data.csv")
    return root


def _config(root, name, **fields):
    base = {"input": str(root / "data.csv"), "covariates": ["w1", "w2"], "exposure": "a", "outcome": "y",
            "seed": 3, "M": 150}
    base.update(fields)
    path = root / name
    path.write_text(json.dumps(base))
    return path


def test_test_command_fields_and_determinism(workdir):
    cfg = _config(workdir, "t.json", output=str(workdir / "t_out.json"))
    assert main(["test", "--config", str(cfg)]) == EXIT_OK
    first = (workdir / "t_out.json").read_bytes()
    assert main(["test", "--config", str(cfg)]) == EXIT_OK
    assert (workdir / "t_out.json").read_bytes() == first
    payload = json.loads(first)
    assert {"psi_stat", "p_value", "kappa", "estimator", "seed", "config_hash"} <= set(payload)
    assert payload["seed"] == 3


def test_flag_overrides_seed(workdir):
    cfg = _config(workdir, "t2.json")
    out = workdir / "seed9.json"
    assert main(["test", "--config", str(cfg), "--seed", "9", "--output", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["seed"] == 9


def test_missing_exposure_column(workdir, capsys):
    cfg = _config(workdir, "bad.json", exposure="dose")
    assert main(["test", "--config", str(cfg)]) == EXIT_INVALID
    assert "dose" in capsys.readouterr().err


@pytest.mark.parametrize(
    "fields",
    [{"bogus": 1}, {"estimator": "nope"}, {"kappa": -3}],
)
def test_invalid_configs(workdir, fields):
    cfg = _config(workdir, "inv.json", **fields)
    assert main(["test", "--config", str(cfg)]) == EXIT_INVALID


def test_seed_required(workdir):
    path = workdir / "noseed.json"
    path.write_text(json.dumps({"input": "x.csv"}))
    assert main(["test", "--config", str(path)]) == EXIT_INVALID


def test_bands_grid_of_three(workdir):
    stem = workdir / "band"
    cfg = _config(workdir, "b.json", grid_size=3, output=str(stem))
    assert main(["bands", "--config", str(cfg)]) == EXIT_OK
    lines = (workdir / "band.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and "seed=3" in lines[0]
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 3 and set(rows[0]) == {"a", "lower", "upper"}
    meta = json.loads((workdir / "band.json").read_text())
    assert meta["config_hash"] == config_hash(json.loads(cfg.read_text()))


def test_bands_zero_nu(workdir, capsys):
    cfg = _config(workdir, "nu0.json", nu=0, grid_size=3, output=str(workdir / "nu0"))
    assert main(["bands", "--config", str(cfg)]) == EXIT_INVALID
    assert "increase nu" in capsys.readouterr().err


def test_simulate_small_and_reproducible(workdir):
    spec = {"setting": 1, "seed": 2, "reps": 2, "n_list": [100], "M": 100,
            "methods": ["one_step_oracle", "primitive"], "output": str(workdir / "mc")}
    path = workdir / "sim.json"
    path.write_text(json.dumps(spec))
    assert main(["simulate", "--config", str(path)]) == EXIT_OK
    first = (workdir / "mc.csv").read_bytes(), (workdir / "mc.json").read_bytes()
    payload = json.loads(first[1])
    assert sum(r["method"] == "one_step_oracle" for r in payload["records"]) == 2
    assert main(["simulate", "--config", str(path)]) == EXIT_OK
    assert ((workdir / "mc.csv").read_bytes(), (workdir / "mc.json").read_bytes()) == first


def test_simulate_unknown_setting(workdir):
    path = workdir / "s3.json"
    path.write_text(json.dumps({"setting": 3, "seed": 1}))
    assert main(["simulate", "--config", str(path)]) == EXIT_INVALID


def test_config_hash_ignores_output():
    assert config_hash({"seed": 1, "output": "a"}) == config_hash({"seed": 1, "output": "b"})
    assert config_hash({"seed": 1}) != config_hash({"seed": 2})
