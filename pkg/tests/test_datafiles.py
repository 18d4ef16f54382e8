"""Dataset serialization and run-config parsing."""

import json
import logging
import os

import numpy as np
import pytest

from dta.datafiles import (
    load_run_config,
    parse_dta_hyperparams,
    parse_experiment_config,
    parse_hyper_grid,
    parse_rmsn_hyperparams,
    parse_sim_config,
    read_dataset,
    validate_dataset,
    write_dataset,
)
from dta.errors import ConfigError, FormatError, ParseError
from dta.simgen import SimConfig, simulate, simulate_counterfactuals


@pytest.fixture()
def dataset_dir(tmp_path, small_dataset):
    path = tmp_path / "ds"
    write_dataset(small_dataset, path, seed_info={"seed": 5})
    return path


def test_round_trip_is_lossless(dataset_dir, small_dataset):
    loaded = read_dataset(dataset_dir)
    assert np.array_equal(loaded.x, small_dataset.x)
    assert np.array_equal(loaded.a, small_dataset.a)
    assert np.array_equal(loaded.y, small_dataset.y)
    assert np.array_equal(loaded.z, small_dataset.z)
    assert np.array_equal(loaded.eta, small_dataset.eta)
    assert np.array_equal(loaded.cf_a, small_dataset.cf_a)
    assert np.array_equal(loaded.cf_y, small_dataset.cf_y)
    assert loaded.anchor_t == small_dataset.anchor_t


def test_main_table_schema(dataset_dir, small_dataset):
    N, T, p = small_dataset.x.shape
    k = small_dataset.a.shape[2]
    lines = (dataset_dir / "data.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["patient_id", "t"]
    assert len(lines) == 1 + N * T
    assert all(len(line.split(",")) == 2 + p + k + 1 for line in lines)


def test_manifest_contents(dataset_dir, small_dataset):
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    assert manifest["format_version"] == 1
    assert manifest["N"] == small_dataset.n_patients
    assert manifest["has_oracle"] and manifest["has_counterfactuals"]
    assert manifest["anchor_t"] == small_dataset.anchor_t
    assert manifest["seed_info"] == {"seed": 5}


def test_oracle_optional(tmp_path, small_dataset):
    import dataclasses

    bare = dataclasses.replace(
        small_dataset, z=None, eta=None, cf_a=None, cf_y=None, anchor_t=None
    )
    path = tmp_path / "bare"
    write_dataset(bare, path)
    loaded = read_dataset(path)
    assert loaded.z is None and loaded.cf_y is None
    assert not os.path.exists(path / "oracle.csv")


def test_overwrite_is_byte_identical(tmp_path, small_dataset):
    p1, p2 = tmp_path / "d1", tmp_path / "d2"
    write_dataset(small_dataset, p1)
    write_dataset(small_dataset, p2)
    for name in ("data.csv", "oracle.csv", "counterfactual.csv", "manifest.json"):
        assert (p1 / name).read_bytes() == (p2 / name).read_bytes()


def _edit_line(path, line_no, fn):
    lines = path.read_text().splitlines()
    lines[line_no - 1] = fn(lines[line_no - 1])
    path.write_text("\n".join(lines) + "\n")


def test_nonbinary_treatment_rejected_with_line(dataset_dir, small_dataset):
    p = small_dataset.x.shape[2]
    data = dataset_dir / "data.csv"

    def poison(line):
        cells = line.split(",")
        cells[2 + p] = "2"
        return ",".join(cells)

    _edit_line(data, 5, poison)
    with pytest.raises(ParseError, match="line 5") as err:
        read_dataset(dataset_dir)
    assert err.value.line == 5


def test_wrong_column_count_rejected_with_line(dataset_dir):
    _edit_line(dataset_dir / "data.csv", 7, lambda l: l + ",0.0")
    with pytest.raises(ParseError, match="line 7"):
        read_dataset(dataset_dir)


def test_nonfinite_value_rejected(dataset_dir):
    def poison(line):
        cells = line.split(",")
        cells[2] = "inf"
        return ",".join(cells)

    _edit_line(dataset_dir / "data.csv", 3, poison)
    with pytest.raises(ParseError, match="non-finite"):
        read_dataset(dataset_dir)


def test_header_mismatch_rejected(dataset_dir):
    _edit_line(dataset_dir / "data.csv", 1, lambda l: l.replace("x_1", "q_1"))
    with pytest.raises(ParseError, match="header"):
        read_dataset(dataset_dir)


def test_version_mismatch_rejected(dataset_dir):
    mpath = dataset_dir / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["format_version"] = 99
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(FormatError, match="version"):
        read_dataset(dataset_dir)


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(FormatError, match="manifest"):
        read_dataset(tmp_path / "nope")


def test_row_count_mismatch_rejected(dataset_dir):
    data = dataset_dir / "data.csv"
    lines = data.read_text().splitlines()
    data.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(FormatError, match="rows"):
        read_dataset(dataset_dir)


def test_validate_accepts_simulate_output(tmp_path):
    for cfg in (
        SimConfig(N=3, T=2, r=1, p=1, k=1, h=1, tau_cf=1, seed=0),
        SimConfig(N=5, T=7, r=3, p=2, k=3, h=4, tau_cf=7, seed=1),
    ):
        ds, params = simulate(cfg)
        ds = simulate_counterfactuals(cfg, params, ds)
        path = tmp_path / f"corner{cfg.seed}"
        write_dataset(ds, path)
        manifest = validate_dataset(path)
        assert manifest["N"] == cfg.N


# ---------------------------------------------------------------------------
# run configs


def test_parse_sim_config_roundtrip():
    cfg = parse_sim_config({"N": 12, "T": 6, "r": 2, "p": 3, "k": 1, "h": 2,
                            "gamma_a": 0.3, "gamma_y": 0.7, "tau_cf": 2, "seed": 9})
    assert cfg == SimConfig(N=12, T=6, r=2, p=3, k=1, h=2,
                            gamma_a=0.3, gamma_y=0.7, tau_cf=2, seed=9)


def test_parse_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_sim_config({"N": 5, "banana": 1})
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_dta_hyperparams({"p_z": 2, "warmup": 3})


def test_parse_defaults_are_logged(caplog):
    with caplog.at_level(logging.INFO, logger="dta"):
        cfg = parse_sim_config({"N": 7})
    assert cfg.N == 7 and cfg.T == 30
    assert any("T not given" in rec.message for rec in caplog.records)


def test_parse_hyper_grid_lists_become_tuples():
    grid = parse_hyper_grid({"batch_size": [16], "learning_rate": [0.01],
                             "dropout_rate": [0.0], "theta": [1.0],
                             "alpha": [1.0], "p_z": [2]})
    assert grid.batch_size == (16,)


def test_parse_experiment_config_nested():
    doc = {
        "gamma_grid": [0.0, 0.8],
        "n_datasets": 1,
        "sim": {"N": 40, "T": 8, "r": 2, "p": 3, "k": 1, "h": 2, "tau_cf": 3},
        "tau": 3,
        "methods": ["conf_msm"],
        "grid": {"batch_size": [8], "learning_rate": [0.01], "dropout_rate": [0.0],
                 "theta": [1.0], "alpha": [1.0], "p_z": [2]},
        "rmsn": {"hidden_dim": 4, "propensity_epochs": 1, "outcome_epochs": 1},
        "dta_epochs": 1,
    }
    cfg = parse_experiment_config(doc)
    assert cfg.gamma_grid == (0.0, 0.8)
    assert cfg.sim.N == 40
    assert cfg.grid.p_z == (2,)
    assert cfg.rmsn.hidden_dim == 4
    assert cfg.methods == ("conf_msm",)


def test_parse_rmsn_hyperparams_defaults():
    hp = parse_rmsn_hyperparams({})
    assert hp.hidden_dim == 16


def test_load_run_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_run_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  broken\n}")
    with pytest.raises(ParseError) as err:
        load_run_config(bad)
    assert err.value.line == 2
