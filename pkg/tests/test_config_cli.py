import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from wavestack import pipeline
from wavestack.cli import ENV_OUT, main
from wavestack.config import ConfigError, RunConfig, bundled_config, load_config
from wavestack.ensemble import IdentityRegressor
from wavestack.persistence import save_stacked

pytestmark = pytest.mark.filterwarnings("ignore::wavestack.learners.trend.RankDeficientWarning")

SMOKE = Path(__file__).resolve().parents[1] / "src" / "wavestack" / "configs" / "smoke.yaml"


def write_cfg(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def smoke_dict():
    return yaml.safe_load(SMOKE.read_text())


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    cfg = str(SMOKE)
    assert main(["gen-data", "--config", cfg, "--out", str(out)]) == 0
    assert main(["train", "--config", cfg, "--out", str(out), "--deterministic"]) == 0
    return out, cfg


# ---------------------------------------------------------------- config


def test_config_round_trip():
    for cfg in (RunConfig().validate(), bundled_config("desk"), bundled_config("smoke")):
        again = RunConfig.from_yaml(cfg.to_yaml())
        assert again == cfg and again.to_yaml() == cfg.to_yaml()


def test_defaults_match_reference_settings():
    cfg = RunConfig().validate()
    assert cfg.plant.C2 == 0.5 and cfg.plant.C3 == 2.1790e-5 and cfg.plant.C5 == -5.8165
    assert cfg.plant.C6 == 0.0038 and cfg.plant.wave_impedance == 62.1208
    assert cfg.dataset.window_len == 100 and cfg.dataset.train_frac == 0.85 and cfg.dataset.K == 5
    assert cfg.meta.n_estimators == 200 and cfg.meta.learning_rate == 0.05
    assert cfg.meta.max_depth == 5 and cfg.meta.subsample == 0.8


@pytest.mark.parametrize("patch,field", [
    ({"dataset": {"K": 1}}, "dataset.K"),
    ({"plant": {"dt": -0.01}}, "plant.dt"),
    ({"dataset": {"train_frac": 1.5}}, "dataset.train_frac"),
    ({"learners": {"cnn_lstm": {"filters": 0}}}, "learners.cnn_lstm.filters"),
    ({"learners": {"transformer": {}}}, "learners.transformer"),
    ({"bogus": 1}, "bogus"),
])
def test_invalid_fields_named(patch, field):
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(patch)
    assert err.value.field == field


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", {"dataset": {"K": 1}})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "dataset.K" in capsys.readouterr().err


# ---------------------------------------------------------------- gen-data


def one_step(tmp_path, duration=10.0):
    return write_cfg(tmp_path / "one.yaml",
                     {"dataset": {"scenarios": [{"kind": "step", "duration": duration}]}})


def test_single_step_rows_and_determinism(tmp_path):
    cfg = one_step(tmp_path)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "data" / "dataset.csv").read_bytes()
    assert a == (tmp_path / "b" / "data" / "dataset.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1 + 1000
    manifest = json.loads((tmp_path / "a" / "data" / "manifest.json").read_text())
    assert manifest["n_rows"] == 1000 and len(manifest["scenarios"]) == 1


def test_short_scenario_is_data_error(tmp_path, capsys):
    cfg = one_step(tmp_path, duration=0.5)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert "scenario 0" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path):
    cfg = write_cfg(tmp_path / "d.yaml", {"plant": {"overflow_bound": 1e-3},
                                          "dataset": {"scenarios": [{"kind": "step", "duration": 2.0}]}})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 4


def test_env_output_override(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_OUT, str(tmp_path / "env"))
    assert main(["gen-data", "--config", one_step(tmp_path)]) == 0
    assert (tmp_path / "env" / "data" / "dataset.csv").exists()


def test_seed_flag_changes_data(tmp_path):
    d = smoke_dict()
    cfg = write_cfg(tmp_path / "s.yaml", d)
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "2"])
    a = (tmp_path / "a" / "data" / "dataset.csv").read_bytes()
    assert a != (tmp_path / "b" / "data" / "dataset.csv").read_bytes()


# ---------------------------------------------------------------- train / eval


def read_metrics(path):
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


def test_train_outputs(run):
    out, _ = run
    rows = read_metrics(out / "reports" / "train_metrics.csv")
    assert {r["model"] for r in rows} == {"prophet_lstm", "cnn_lstm", "lstm_km_rf", "meta"}
    assert {r["output"] for r in rows} == {"N1", "M2"} and len(rows) == 8
    assert (out / "model" / "manifest.json").exists()
    assert not [p for p in out.iterdir() if p.name.startswith(".model")]


def test_eval_reproduces_train_metrics(run):
    out, cfg = run
    assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    assert (read_metrics(out / "reports" / "eval_test_metrics.csv")
            == read_metrics(out / "reports" / "train_metrics.csv"))


def test_train_split_needs_override(run):
    out, cfg = run
    assert main(["eval", "--config", cfg, "--out", str(out), "--split", "train"]) == 2
    assert main(["eval", "--config", cfg, "--out", str(out), "--split", "train", "--allow-train-split"]) == 0


def test_missing_archive(run, tmp_path, capsys):
    out, cfg = run
    assert main(["eval", "--config", cfg, "--out", str(out), "--model", str(tmp_path / "none")]) == 3
    assert "no model artifact" in capsys.readouterr().err


def test_corrupt_dataset_rejected(run, tmp_path):
    out, cfg = run
    import shutil
    shutil.copytree(out / "data", tmp_path / "data")
    with open(tmp_path / "data" / "dataset.csv", "a") as fh:
        fh.write("0,0,0,0,0,0,0\n")
    assert main(["eval", "--config", cfg, "--out", str(out), "--data", str(tmp_path / "data")]) == 3


def test_retrain_is_deterministic(run, tmp_path):
    out, cfg = run
    assert main(["train", "--config", cfg, "--out", str(tmp_path), "--data", str(out / "data"),
                 "--deterministic"]) == 0
    assert (read_metrics(tmp_path / "reports" / "train_metrics.csv")
            == read_metrics(out / "reports" / "train_metrics.csv"))


def test_train_does_not_mutate_inputs(run, tmp_path):
    out, cfg = run
    before = (out / "data" / "dataset.csv").read_bytes()
    main(["eval", "--config", cfg, "--out", str(out)])
    assert (out / "data" / "dataset.csv").read_bytes() == before


# ---------------------------------------------------------------- stability / plot


def test_stability_deterministic(run):
    out, cfg = run
    assert main(["stability", "--config", cfg, "--out", str(out), "--budget", "500"]) == 0
    first = (out / "reports" / "stability.json").read_text()
    assert main(["stability", "--config", cfg, "--out", str(out), "--budget", "500"]) == 0
    assert (out / "reports" / "stability.json").read_text() == first
    s = json.loads(first)["stability"]
    assert abs(s["L_avg"] - np.mean(s["L_per_output"])) < 1e-12 and s["pair_budget"] == 500


def test_identity_stub_stability(run, tmp_path):
    out, cfg = run
    config = load_config(cfg)
    _, data = pipeline.read_dataset(out / "data", config)
    model = pipeline.fit_stack(pipeline.build_stack(config, meta=IdentityRegressor()), data)
    save_stacked(model, tmp_path / "stub", {"data_format_version": 1})
    assert main(["stability", "--config", cfg, "--out", str(tmp_path), "--model", str(tmp_path / "stub"),
                 "--data", str(out / "data"), "--budget", "2000"]) == 0
    s = json.loads((tmp_path / "reports" / "stability.json").read_text())["stability"]
    assert abs(s["L_joint"] - 1.0) < 1e-12 and "identity" in s["note"]


def test_plot_overlay(run):
    out, cfg = run
    assert main(["plot", "--config", cfg, "--out", str(out)]) == 0
    text = (out / "plots" / "overlay.csv").read_text()
    header = text.splitlines()[0].split(",")
    assert header == ["t", "truth_N1", "pred_N1_base1", "pred_N1_base2", "pred_N1_base3", "pred_N1_meta",
                      "truth_M2", "pred_M2_base1", "pred_M2_base2", "pred_M2_base3", "pred_M2_meta"]
    _, data = pipeline.read_dataset(out / "data", load_config(cfg))
    assert len(text.splitlines()) - 1 == len(data.test)
    assert main(["plot", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "plots" / "overlay.csv").read_text() == text


def test_overlay_length_mismatch():
    with pytest.raises(ValueError):
        pipeline.overlay_table(np.arange(3), np.zeros((3, 2)), [np.zeros((2, 2))], np.zeros((3, 2)))
