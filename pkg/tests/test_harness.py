import json
import subprocess
import sys
from pathlib import Path

import pytest

from fdprivlab.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main, parse_values
from fdprivlab.errors import PipelineError
from fdprivlab.harness import (ConfigError, load_spec, recompute_metrics, run_experiment,
                               run_sweep, spec_from_dict, sweep_specs)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = {
    "seed": 0,
    "data": {"n": 2000, "n_test": 600, "alpha": 10.0, "targets_per_client": 30},
    "fd": {"num_clients": 4, "rounds": 2, "round_public_count": 200, "first_round_epochs": 4,
           "local_epochs": 1, "distill_epochs": 1, "hidden": [16]},
    "attacks": {"ldia": {}, "coop": {}, "distillation": {"num_reference_models": 4, "distill_epochs": 3},
                "evade_shadow": {"distill_epochs": 3}, "evade_indirect": {"count": 3}},
}


def tiny(**overrides):
    doc = json.loads(json.dumps(TINY))
    for key, value in overrides.items():
        doc[key] = value
    return spec_from_dict(doc)


def strip_volatile(report):
    return {k: v for k, v in report.items() if k not in ("created_at", "wall_seconds")}


# --- config validation -------------------------------------------------------------


def test_shipped_configs_load():
    for path in CONFIGS.glob("*.json"):
        load_spec(path)


@pytest.mark.parametrize("doc, message", [
    ({"bogus": 1}, "unknown top-level"),
    ({"data": {"alhpa": 1.0}}, "alhpa"),
    ({"fd": {"framework": "fedavg"}}, "(?i)framework"),
    ({"schema_version": 9}, "schema_version"),
    ({"attacks": ["ldia", "magic"]}, "magic"),
    ({"data": {"source": "csv", "train_path": "/nonexistent.csv", "test_path": "/x.csv"}}, "does not exist"),
])
def test_invalid_configs_rejected(doc, message):
    with pytest.raises(ConfigError, match=message):
        spec_from_dict(doc)


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_spec(bad)


def test_unknown_sweep_axis_lists_valid_ones():
    with pytest.raises(ConfigError, match="valid axes: .*alpha"):
        sweep_specs(tiny(), "learning_rate", [0.1])


def test_parse_values():
    assert parse_values("0,1.0, 2") == [0, 1.0, 2]
    assert parse_values("fedmd,dsfl") == ["fedmd", "dsfl"]


# --- experiments -------------------------------------------------------------------


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    report = run_experiment(tiny(), out)
    return out, report


def test_report_structure(run_dir):
    out, report = run_dir
    assert report["schema"] == "fdprivlab.report/v1"
    assert len(report["fd"]["rounds"]) == 2
    assert {"coop", "distillation", "evade_shadow", "evade_indirect"} <= set(report["attacks"])
    assert len(report["ldia"]["per_client"]) == 4
    for name in ("report.json", "trace.ndjson", "attacks.json"):
        assert (out / name).exists()
    assert list(out.glob("roc_*.csv"))
    assert json.loads((out / "report.json").read_text()) == json.loads(json.dumps(report))


def test_metrics_recompute_from_persisted_outputs(run_dir):
    out, report = run_dir
    rebuilt = recompute_metrics(out)
    saved = json.loads((out / "report.json").read_text())
    for key in ("fd", "ldia", "attacks"):
        assert rebuilt[key] == saved[key]


def test_runs_are_deterministic():
    a = run_experiment(tiny())
    b = run_experiment(tiny())
    assert json.dumps(strip_volatile(a), sort_keys=True) == json.dumps(strip_volatile(b), sort_keys=True)


def test_seed_changes_results():
    a = run_experiment(tiny(attacks=[]))
    b = run_experiment(tiny(attacks=[], seed=1))
    assert a["fd"]["rounds"] != b["fd"]["rounds"]


def test_fd_only_run_has_no_attack_sections(tmp_path):
    report = run_experiment(tiny(attacks=[]), tmp_path)
    assert "attacks" not in report and "ldia" not in report
    assert not (tmp_path / "attacks.json").exists()
    assert recompute_metrics(tmp_path)["fd"] == report["fd"]


def test_abstaining_clients_are_reported():
    report = run_experiment(tiny(attacks={"coop": {"kl_threshold": 0.0}}))
    section = report["attacks"]["coop"]["0"]
    assert all(row["status"] == "no usable references" for row in section["per_client"])
    assert section["mean"]["auc"] is None
    assert section["effective_mean"]["auc"] == 0.5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_failure_names_module_round_client():
    doc = json.loads(json.dumps(TINY))
    doc["fd"]["train"] = {"learning_rate": 1e6}
    with pytest.raises(PipelineError, match=r"fd-sim, round 0, client \d"):
        run_experiment(spec_from_dict(doc))


def test_sweep_one_report_per_value(tmp_path):
    reports = run_sweep(tiny(attacks=[]), "dp_noise", [0.0, 1.0], tmp_path)
    assert [r["sweep"]["value"] for r in reports] == [0.0, 1.0]
    assert [r["config"]["fd"]["train"]["dp"]["noise_multiplier"] for r in reports] == [0.0, 1.0]
    assert (tmp_path / "dp_noise=1.0" / "report.json").exists()
    specs = sweep_specs(tiny(), "alpha", [0.1, 10.0])
    assert [s.data.alpha for s in specs] == [0.1, 10.0]
    specs = sweep_specs(tiny(), "num_reference_models", [2, 4])
    assert [s.attacks["distillation"]["num_reference_models"] for s in specs] == [2, 4]


# --- CLI ---------------------------------------------------------------------------


def write_config(tmp_path, doc, name="c.json"):
    doc = dict(doc, output_dir=str(tmp_path / "out"))
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_exit_codes(tmp_path, capsys):
    good = write_config(tmp_path, dict(TINY, attacks=["ldia"]))
    assert main(["run", "--config", str(good)]) == EXIT_OK
    assert "ldia_kl=" in capsys.readouterr().out
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["run", "--config", str(good), "--sweep", "bogus=1"]) == EXIT_CONFIG
    broken = dict(TINY, fd=dict(TINY["fd"], train={"learning_rate": 1e6}))
    bad = write_config(tmp_path, broken, "bad.json")
    assert main(["run", "--config", str(bad)]) == EXIT_RUNTIME
    assert "round 0, client" in capsys.readouterr().err


def test_cli_sweep(tmp_path, capsys):
    cfg = write_config(tmp_path, dict(TINY, attacks=[]))
    assert main(["sweep", "--config", str(cfg), "--axis", "local_epochs", "--values", "1,2"]) == EXIT_OK
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("local_epochs=")]
    assert len(lines) == 2


def test_cli_module_entry_point_is_deterministic(tmp_path):
    reports = []
    for run in ("a", "b"):
        cfg = write_config(tmp_path, dict(TINY, attacks=["ldia", "coop"]), f"{run}.json")
        out = tmp_path / run
        proc = subprocess.run([sys.executable, "-m", "fdprivlab", "run", "--config", str(cfg),
                               "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        reports.append(strip_volatile(json.loads((out / "report.json").read_text())))
    reports[0]["config"].pop("output_dir")
    reports[1]["config"].pop("output_dir")
    assert reports[0] == reports[1]
