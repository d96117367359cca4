import json

import pytest

from fedglu.cgm_data import SyntheticCohortSpec, load_csv
from fedglu.cli import main
from fedglu.config import ConfigError, parse_config
from fedglu.report import load_report, verify_manifest

TINY = {
    "data": {"synthetic": {"n_patients": 2, "days_per_patient": 4, "rng_seed": 3}},
    "folds": {"k": 5, "run": [1]},
    "train": {"max_epochs": 2},
    "finetune": {"max_epochs": 1},
    "federated": {"rounds": 2},
    "loss": {"loss": "hh", "alpha_grid": [0.0, 1.0]},
    "layer_dims": [24, 8, 1],
    "regimes": ["local"],
}


def write_cfg(tmp_path, **overrides):
    cfg = {**TINY, **overrides, "output_dir": str(tmp_path / "out")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


# -- config ---------------------------------------------------------------------

def test_defaults_parse():
    cfg = parse_config({"data": {"synthetic": {}}})
    assert cfg.layer_dims == (24, 512, 256, 256, 64, 1)
    assert cfg.train.batch_size == 500 and cfg.federated.rounds == 50
    assert isinstance(cfg.data.synthetic, SyntheticCohortSpec)
    assert parse_config(cfg.to_dict()) == cfg


@pytest.mark.parametrize("patch,path", [
    ({"train": {"batch_sise": 5}}, "train.batch_sise"),
    ({"bogus": 1}, "bogus"),
    ({"train": {"max_epochs": "10"}}, "train.max_epochs"),
    ({"regimes": []}, "regimes"),
    ({"regimes": ["fedglu"]}, "regimes"),
    ({"regimes": ["nonsense"]}, "regimes"),
    ({"loss": {"alpha": 1.5}}, "loss.alpha"),
    ({"loss": {"loss": "mse"}, "regimes": ["federated", "fedglu"]}, "loss.loss"),
    ({"folds": {"k": 5, "run": [6]}}, "folds.run"),
    ({"layer_dims": [20, 1]}, "layer_dims"),
    ({"data": {}}, "data"),
    ({"data": {"synthetic": {"target_hypo_fraction": 2.0}}}, "data.synthetic"),
])
def test_config_errors_name_the_field(patch, path):
    with pytest.raises(ConfigError) as err:
        parse_config({**TINY, **patch})
    assert err.value.path == path


# -- synth ----------------------------------------------------------------------

def test_synth_writes_cohort_and_audit(tmp_path, capsys):
    out = tmp_path / "c.csv"
    assert main(["synth", "--patients", "20", "--days", "30", "--seed", "7", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert len({s.patient_id for s in load_csv(out)}) == 20
    median_line = [l for l in text.splitlines() if l.startswith("median")][0]
    assert abs(float(median_line.split()[1]) - 2.8) <= 1.0
    again = tmp_path / "d.csv"
    main(["synth", "--patients", "20", "--days", "30", "--seed", "7", "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_synth_bad_spec_is_config_error(tmp_path):
    assert main(["synth", "--hypo", "0.7", "--hyper", "0.6", "--out", str(tmp_path / "x.csv")]) == 2


# -- run / report -----------------------------------------------------------------

def test_run_local_only(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["run", str(cfg)]) == 0
    report = load_report(tmp_path / "out")
    assert set(report["regimes"]) == {"local_mse", "local_hh"}
    assert set(report["regimes"]["local_mse"]["1"]) == {"P1", "P2"}
    rows = (tmp_path / "out" / "report.csv").read_text().splitlines()
    assert rows[0] == "patient,regime,fold,metric,value"
    assert any(r.startswith("P2,local_hh,1,rmse_overall,") for r in rows)
    assert verify_manifest(tmp_path / "out") >= 2


def test_run_federated_report_and_verify(tmp_path, capsys):
    cfg = write_cfg(tmp_path, regimes=["local", "federated", "fedglu"])
    assert main(["run", str(cfg)]) == 0
    out = tmp_path / "out"
    assert (out / "fold_1" / "ledger.json").is_file()
    assert (out / "fold_1" / "rounds" / "round_2.json").is_file()
    assert (out / "models" / "fed_global_fold1.json").is_file()
    capsys.readouterr()
    assert main(["report", str(out), "--verify"]) == 0
    text = capsys.readouterr().out
    assert "manifest ok" in text and "fedglu vs local_hh" in text
    report = load_report(out)
    for name, comp in report["comparisons"]["1"].items():
        for entry in comp.values():
            assert entry["n_improved"] <= entry["n"] <= 2
            if entry["p"] is not None:
                # rendering adds no computation: the stored p-value is printed as is
                assert f"{entry['p']:.4g}" in text
    (out / "report.csv").write_text("tampered")
    assert main(["report", str(out), "--verify"]) == 4


def test_report_missing_dir(tmp_path):
    assert main(["report", str(tmp_path / "nope")]) == 4


def test_run_bad_config_exit_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({**TINY, "unknown": 1}))
    assert main(["run", str(path)]) == 2
    path.write_text("{not json")
    assert main(["run", str(path)]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2


def test_run_bad_csv_exit_code(tmp_path):
    csv = tmp_path / "c.csv"
    csv.write_text("patient_id,timestamp_s,glucose\np1,0,abc\n")
    cfg = write_cfg(tmp_path, data={"csv": str(csv)})
    assert main(["run", str(cfg)]) == 3


def test_alpha_sweep_rows(tmp_path, capsys):
    cfg = write_cfg(tmp_path, regimes=["central"])
    out = tmp_path / "sweep"
    assert main(["alpha-sweep", str(cfg), "--alphas", "0,0.5,1", "--output-dir", str(out)]) == 0
    sweep = json.loads((out / "alpha_sweep.json").read_text())
    assert [r["alpha"] for r in sweep["rows"]] == [0.0, 0.5, 1.0]
    lines = (out / "alpha_sweep.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 + 1  # header, grid, MSE baseline
    assert main(["report", str(out), "--verify"]) == 0


def test_alpha_sweep_requires_regime(tmp_path):
    cfg = write_cfg(tmp_path, regimes=["local"])
    assert main(["alpha-sweep", str(cfg), "--alphas", "0,1"]) == 2
