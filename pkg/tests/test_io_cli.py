import json

import pytest

import fedtrust.harness as H
from fedtrust import gradcheck
from fedtrust.cli import main
from fedtrust.config import (ExperimentConfig, desk_preset, enable_defense, from_dict, load_config, paper_preset,
                             replace, save_config)
from fedtrust.errors import ConfigurationError
from fedtrust.io import (CLIENT_COLUMNS, ROUND_COLUMNS, SUMMARY_COLUMNS, emit_csv, emit_json, fmt, read_csv,
                         report, round_rows, write_run)


def _cfg(**kw):
    base = {"rounds": 3, "dataset.samples": 2000}
    base.update(kw)
    return enable_defense(desk_preset(**base))


# --------------------------------------------------------------------------
# config


def test_config_round_trips(tmp_path):
    for cfg in (desk_preset(), _cfg(**{"attack.kind": "scaling", "attack.fraction": 0.3}), paper_preset()):
        save_config(cfg, tmp_path / "c.json")
        back = load_config(tmp_path / "c.json")
        assert back == cfg
        assert from_dict(json.loads(cfg.to_json())).to_json() == cfg.to_json()


def test_config_rejects_unknown_keys_and_bad_types():
    data = desk_preset().to_dict()
    with pytest.raises(ConfigurationError, match="unknown key"):
        from_dict({**data, "colour": "red"})
    nested = json.loads(json.dumps(data))
    nested["defense"]["dqn"]["momentum"] = 0.9
    with pytest.raises(ConfigurationError, match="defense.dqn"):
        from_dict(nested)
    bad = json.loads(json.dumps(data))
    bad["rounds"] = "15"
    with pytest.raises(ConfigurationError, match="rounds"):
        from_dict(bad)
    missing = dict(data)
    del missing["schema_version"]
    with pytest.raises(ConfigurationError):
        from_dict(missing)


@pytest.mark.parametrize("change", [
    {"rounds": 0}, {"clients": 1}, {"lr": 0.0}, {"participation": 0.5}, {"attack.kind": "backdoor"},
    {"aggregator.kind": "bulyan"}, {"model.kind": "logreg", "model.hidden": [4]}, {"defense.shapley": True},
    {"quantization.bits": 17}, {"schema_version": 2}, {"local_epochs": 65}, {"defense.attention.optimizer": "rmsprop"},
])
def test_config_validation(change):
    with pytest.raises(ConfigurationError):
        replace(desk_preset(), **change)


def test_replace_unknown_path():
    with pytest.raises(ConfigurationError):
        replace(desk_preset(), **{"dataset.colour": 1})


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(p)


def test_presets():
    d, p = desk_preset(), paper_preset()
    assert isinstance(d, ExperimentConfig)
    assert (d.rounds, d.local_epochs, d.batch_size) == (15, 3, 64)
    assert (p.rounds, p.local_epochs, p.lr, p.dataset.kind) == (30, 5, 1e-4, "mnist")


# --------------------------------------------------------------------------
# persistence


def test_fmt_six_significant_digits():
    assert fmt(1 / 3) == "0.333333"
    assert fmt(123456789.0) == "1.23457e+08"
    assert fmt(True) == "1" and fmt(7) == "7" and fmt(float("nan")) == "nan"


def test_csv_round_trip_and_header(tmp_path):
    records = H.run_experiment(_cfg())
    rows = round_rows(records)
    emit_csv(records, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        assert fh.readline().strip() == ",".join(ROUND_COLUMNS)
    assert read_csv(tmp_path / "r.csv") == rows


def test_run_files_are_deterministic(tmp_path):
    cfg = _cfg(**{"attack.kind": "sign_flip", "attack.fraction": 0.3})
    write_run(tmp_path / "a", cfg, H.run_experiment(cfg))
    write_run(tmp_path / "b", cfg, H.run_experiment(cfg))
    for name in ("rounds.csv", "clients.csv", "summary.json", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with open(tmp_path / "a" / "clients.csv") as fh:
        assert fh.readline().strip() == ",".join(CLIENT_COLUMNS)
    assert len(read_csv(tmp_path / "a" / "clients.csv")) == cfg.rounds * cfg.clients


def test_report_reproduces_summary(tmp_path):
    cfg = _cfg()
    summary = write_run(tmp_path, cfg, H.run_experiment(cfg))
    assert report(tmp_path) == summary
    assert list(summary) == list(SUMMARY_COLUMNS)
    assert summary["method"] == "fedbnp_trust"


def test_empty_summary_csv_has_header(tmp_path):
    emit_csv([], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().strip() == ",".join(SUMMARY_COLUMNS)


def test_emit_json_nan_becomes_null(tmp_path):
    emit_json({"a": float("nan"), "b": [0.1234567891]}, tmp_path / "x.json")
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": None, "b": [0.123457]}


# --------------------------------------------------------------------------
# CLI


def test_cli_unknown_flag_is_usage_error(capsys):
    assert main(["run", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["shapley-check", "--n", "20"]) == 1


def test_cli_help_exits_zero(capsys):
    assert main(["--help"]) == 0


def test_cli_run_then_report(tmp_path, capsys):
    save_config(_cfg(), tmp_path / "cfg.json")
    assert main(["run", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "out")]) == 0
    assert main(["report", "--in", str(tmp_path / "out")]) == 0
    out = capsys.readouterr().out
    assert "fedbnp_trust" in out
    emit_json(report(tmp_path / "out"), tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == (tmp_path / "out" / "summary.json").read_bytes()


def test_cli_runtime_failures_exit_two(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDTRUST_DATA_DIR", raising=False)
    assert main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    save_config(paper_preset(**{"dataset.data_dir": str(tmp_path)}), tmp_path / "mnist.json")
    assert main(["run", "--config", str(tmp_path / "mnist.json"), "--out", str(tmp_path / "o")]) == 2
    assert main(["report", "--in", str(tmp_path)]) == 2


def test_cli_grid(tmp_path, capsys):
    d = tmp_path / "grid"
    d.mkdir()
    for kind in ("fedavg", "coord_median"):
        save_config(desk_preset(**{"rounds": 2, "dataset.samples": 2000, "aggregator.kind": kind, "name": kind}),
                    d / f"{kind}.json")
    assert main(["grid", "--configs", str(d)]) == 0
    rows = read_csv(d / "results" / "grid.csv")
    assert [r["method"] for r in rows] == ["coord_median", "fedavg"]
    assert (d / "results" / "fedavg" / "rounds.csv").exists()
    assert main(["report", "--in", str(d / "results")]) == 0
    assert "avg" in capsys.readouterr().out


def test_cli_shapley_check(capsys):
    assert main(["shapley-check", "--n", "5", "--m", "500"]) == 0
    assert "monte_carlo" in capsys.readouterr().out


def test_gradcheck_suite_passes(capsys):
    results = gradcheck.run_suite(range(2))
    assert results and all(r.passed for r in results)
    assert main(["gradcheck", "--seeds", "1"]) == 0
