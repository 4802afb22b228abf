import csv
import json
import logging

import numpy as np
import pytest
import yaml

from stucco.cli import build_config, main, make_parser, parse_seeds
from stucco.experiment import (ExperimentConfig, emit_plot_data, observe, plot_table, read_summary,
                               residual_model, run_experiment, simulate)


def test_parse_seeds():
    assert parse_seeds("0-3") == [0, 1, 2, 3]
    assert parse_seeds("1,4,7-9") == [1, 4, 7, 8, 9]
    assert parse_seeds("5, 5") == [5]
    for bad in ("3-1", "", "-2"):
        with pytest.raises(Exception):
            parse_seeds(bad)


def test_build_config_flags_override_params(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump({"presets": ["TC"], "methods": ["dbscan"], "seeds": [1, 2],
                                 "tracker": {"n_particles": 50}}))
    args = make_parser().parse_args(["run", "--params", str(p), "--method", "stucco",
                                     "--seeds", "3", "--out", str(tmp_path / "o")])
    cfg = build_config(args)
    assert cfg.presets == ["TC"]
    assert cfg.methods == ["stucco"]
    assert cfg.seeds == [3]
    assert cfg.tracker_params().n_particles == 50


def test_config_defaults_and_validation():
    cfg = ExperimentConfig()
    tp = cfg.tracker_params()
    assert (tp.n_particles, tp.length_scale, tp.penetration_scale, tp.connection_threshold) == \
        (100, 0.02, 0.002, 0.4)
    with pytest.raises(ValueError):
        ExperimentConfig(methods=["birch"]).validate()
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_cli_single_seed_gap2(tmp_path):
    out = tmp_path / "run"
    rc = main(["run", "--preset", "gap2", "--method", "stucco", "--seeds", "0", "--out", str(out),
               "--no-report"])
    assert rc == 0
    rows = read_summary(out / "summary.csv")
    assert len(rows) == 1 and rows[0]["method"] == "stucco"
    logs = sorted(p.name for p in (out / "gap2" / "seed000").glob("stucco*.jsonl"))
    assert logs == ["stucco.jsonl"]
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    assert cfg["presets"] == ["gap2"] and cfg["tracker"]["n_particles"] == 100
    first = json.loads((out / "gap2" / "seed000" / "stucco.jsonl").read_text().splitlines()[0])
    assert {"step", "contact", "weights", "map_index", "labels"} <= set(first)


def test_cli_report(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--preset", "gap2", "--seeds", "0", "--out", str(out)]) == 0
    assert (out / "fmi_ce.png").stat().st_size > 0
    assert (out / "plot_all.csv").exists() and (out / "plot_ambiguous.csv").exists()
    (out / "fmi_ce.png").unlink()
    assert main(["report", str(out)]) == 0
    assert (out / "fmi_ce.png").exists()


def test_cli_errors(tmp_path):
    assert main(["report", str(tmp_path / "missing")]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--preset", "nowhere"])


def test_methods_share_trajectory_and_rerun_identical(tmp_path):
    cfg = ExperimentConfig(presets=["gap2"], methods=["stucco", "dbscan"], seeds=[1],
                           out=str(tmp_path / "a"))
    run_experiment(cfg)
    seed_dir = tmp_path / "a" / "gap2" / "seed001"
    d = json.loads((seed_dir / "stucco_final.json").read_text())
    e = json.loads((seed_dir / "dbscan_final.json").read_text())
    assert d["truth"] == e["truth"]
    assert len(d["points"]) == len(e["points"])
    cfg.out = str(tmp_path / "b")
    run_experiment(cfg)
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_custom_trajectory(tmp_path):
    traj = tmp_path / "t.yaml"
    traj.write_text("actions:\n  - [0.0, 0.03, 3]\n  - [0.0, 0.0, 2]\n")
    cfg = ExperimentConfig(presets=["gap2"], methods=["dbscan"], seeds=[0], trajectory=str(traj),
                           write_logs=False, out=str(tmp_path / "o"))
    env, records = simulate(cfg, "gap2", 0)
    assert len(records) == 5


def test_observe_labels_false_positives_uniquely(tmp_path):
    cfg = ExperimentConfig(contact_threshold=1.0)
    env, records = simulate(cfg, "gap2", 0)
    obs = observe(records, env, residual_model(cfg, env))
    fp = [o.truth for o in obs if o.contact is not None and o.truth < 0]
    assert fp and len(set(fp)) == len(fp)


def _row(method, fmi, ce, amb):
    return {"preset": "gap2", "seed": 0, "method": method, "status": "ok", "fmi": fmi, "ce_cm": ce,
            "ambiguity": amb}


def test_plot_table_single_and_identical_runs():
    one = plot_table([_row("stucco", 0.8, 0.3, 0.5)])
    assert one[0]["fmi_median"] == one[0]["fmi_p20"] == one[0]["fmi_p80"] == 0.8
    same = plot_table([_row("dbscan", 0.5, 1.0, 0.5)] * 4)
    assert same[0]["ce_cm_p20"] == same[0]["ce_cm_p80"] == 1.0
    assert same[0]["runs"] == 4


def test_emit_plot_data_ambiguity_filter(tmp_path, caplog):
    rows = [_row("stucco", 0.8, 0.3, 0.1), _row("stucco", 0.6, 0.5, 0.2)]
    with caplog.at_level(logging.WARNING):
        tables = emit_plot_data(rows, tmp_path)
    assert tables["ambiguous"] == []
    assert "ambiguity" in caplog.text
    with open(tmp_path / "plot_ambiguous.csv") as f:
        assert len(list(csv.reader(f))) == 1
    assert tables["all"][0]["fmi_median"] == pytest.approx(0.7)
