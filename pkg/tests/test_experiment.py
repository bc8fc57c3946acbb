import csv
import json
from pathlib import Path

import pytest

import run_experiment
from stoxnet.errors import ConfigError, DivergenceError
from stoxnet import settings
from stoxnet.experiment import ExperimentConfig, apply_override, load_config, parse_value

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMOKE = str(CONFIGS / "digits_smoke.json")
FAST = ["--override", "train.train_limit=200", "--override", "train.test_limit=100", "--override", "train.epochs=2"]


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert run_experiment.main(["train", "--config", SMOKE, "--out", str(out), *FAST]) == 0
    return out


class TestLoadConfig:
    def test_smoke_config(self):
        config = load_config(SMOKE)
        assert config.train.dataset == "digits" and config.seed == 7 and config.train.seed == 7
        assert config.input_shape == (1, 8, 8)
        assert config.sensitivity.magnitudes == (0.1,)

    def test_overrides_and_seed_flag(self):
        config = load_config(SMOKE, ["train.epochs=5", "quant.mode=expectation", "arch.columns=64"], seed=11)
        assert config.train.epochs == 5 and config.quant.mode == "expectation"
        assert config.arch.columns == 64
        assert config.seed == 11 and config.train.seed == 11

    def test_layer_override_validated(self):
        with pytest.raises(ConfigError, match="n_samples"):
            load_config(str(CONFIGS / "mnist_stox_cnn.json"), ["layer_overrides.conv1.n_samples=9"])

    @pytest.mark.parametrize(
        "data, match",
        [
            ({"quantization": {}}, "unknown config keys"),
            ({"train": {"epoch": 3}}, "epoch"),
            ({"train": {"seed": 3}}, "top level"),
            ({"model": {"depth": 3}}, "depth"),
            ({"seed": -1}, "seed"),
            ({"train": {"dataset": "svhn"}}, "dataset"),
        ],
    )
    def test_invalid_configs(self, data, match):
        with pytest.raises(ConfigError, match=match):
            ExperimentConfig.from_dict(data)

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_round_trip_and_hash(self):
        config = load_config(str(CONFIGS / "mnist_stox_cnn.json"))
        again = ExperimentConfig.from_dict(json.loads(json.dumps(config.to_dict())))
        assert again == config
        assert again.config_hash() == config.config_hash()
        assert load_config(str(CONFIGS / "mnist_stox_cnn.json"), seed=8).config_hash() != config.config_hash()

    def test_apply_override(self):
        data = apply_override({}, "quant.alpha=2.5")
        assert data == {"quant": {"alpha": 2.5}}
        with pytest.raises(ConfigError):
            apply_override({"seed": 1}, "seed.x=1")
        with pytest.raises(ConfigError):
            apply_override({}, "novalue")

    def test_parse_value(self):
        assert parse_value("4") == 4
        assert parse_value("[0.1, 0.2]") == [0.1, 0.2]
        assert parse_value("true") is True
        assert parse_value("stochastic") == "stochastic"


class TestSweep:
    def test_cartesian_product(self):
        combos = run_experiment.parse_sweep(["n_samples=1,4", "mode=stochastic,expectation"])
        assert combos == [
            {"n_samples": 1, "mode": "stochastic"},
            {"n_samples": 1, "mode": "expectation"},
            {"n_samples": 4, "mode": "stochastic"},
            {"n_samples": 4, "mode": "expectation"},
        ]

    def test_no_sweep(self):
        assert run_experiment.parse_sweep(None) == [{}]

    @pytest.mark.parametrize("item", ["r_arr=64,128", "n_samples"])
    def test_rejected(self, item):
        with pytest.raises(ConfigError):
            run_experiment.parse_sweep([item])


class TestCommands:
    def test_train_outputs(self, trained):
        for name in ("metrics.csv", "checkpoint.npz", "manifest.json"):
            assert (trained / name).exists()
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["command"] == "train" and manifest["seed"] == 7
        assert manifest["outputs"] == ["checkpoint.npz", "metrics.csv"]

    def test_train_rerun_is_byte_identical(self, trained, tmp_path):
        assert run_experiment.main(["train", "--config", SMOKE, "--out", str(tmp_path), *FAST]) == 0
        for name in ("metrics.csv", "manifest.json"):
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()

    def test_eval_reproduces_training_accuracy(self, trained, tmp_path):
        args = ["eval", "--config", SMOKE, "--out", str(tmp_path), "--checkpoint", str(trained / "checkpoint.npz")]
        assert run_experiment.main([*args, *FAST]) == 0
        final = [r for r in read_rows(trained / "metrics.csv") if r["split"] == "test"][-1]
        (row,) = read_rows(tmp_path / "eval.csv")
        assert row["n_samples"] == "checkpoint"
        assert float(row["accuracy"]) == pytest.approx(float(final["accuracy"]), abs=1e-6)

    def test_eval_sweep_with_diagnostics(self, trained, tmp_path):
        args = ["eval", "--config", SMOKE, "--out", str(tmp_path), "--checkpoint", str(trained / "checkpoint.npz"),
                "--sweep", "n_samples=1,8", "--sweep", "mode=stochastic,expectation", "--diagnostics", *FAST]
        assert run_experiment.main(args) == 0
        rows = read_rows(tmp_path / "eval.csv")
        assert [(r["n_samples"], r["mode"]) for r in rows] == [
            ("1", "stochastic"), ("1", "expectation"), ("8", "stochastic"), ("8", "expectation"),
        ]
        # expectation mode ignores the sample count
        assert rows[1]["accuracy"] == rows[3]["accuracy"]
        hist = read_rows(tmp_path / "partial_sums.csv")
        assert len(hist) == 101
        assert sum(float(r["normalized_frequency"]) for r in hist) == pytest.approx(1.0)
        stats = json.loads((tmp_path / "manifest.json").read_text())["partial_sums"]
        assert set(stats) == {"mean", "std", "kurtosis", "activity"}
        assert 0 < stats["std"] <= 1 and stats["kurtosis"] >= 1 and 0 < stats["activity"] < 1

    def test_hwreport_uses_measured_activity(self, trained, tmp_path):
        evaluated = tmp_path / "eval"
        args = ["eval", "--config", SMOKE, "--out", str(evaluated), "--checkpoint", str(trained / "checkpoint.npz"),
                "--diagnostics", *FAST]
        assert run_experiment.main(args) == 0
        activity = json.loads((evaluated / "manifest.json").read_text())["partial_sums"]["activity"]

        def report(out, *extra):
            args = ["hwreport", "--config", SMOKE, "--out", str(out), "--model", "config", "--variants", "StoX-1", *extra]
            assert run_experiment.main(args) == 0
            (total,) = [r for r in read_rows(out / "hwreport.csv") if r["layer"] == "total" and r["metric"] == "energy_pj"]
            return float(total["absolute"]), json.loads((out / "manifest.json").read_text())["input_activity"]

        default_energy, default_activity = report(tmp_path / "default")
        measured_energy, recorded = report(tmp_path / "measured", "--activity-from", str(evaluated / "manifest.json"))
        assert recorded == pytest.approx(activity)
        assert (measured_energy > default_energy) == (activity > default_activity)

    def test_activity_needs_diagnostics_manifest(self, trained, tmp_path):
        args = ["eval", "--config", SMOKE, "--out", str(tmp_path), "--checkpoint", str(trained / "checkpoint.npz"), *FAST]
        assert run_experiment.main(args) == 0
        args = ["hwreport", "--config", SMOKE, "--out", str(tmp_path / "hw"), "--model", "config",
                "--activity-from", str(tmp_path / "manifest.json")]
        assert run_experiment.main(args) == 2

    def test_sensitivity_then_mixed_hwreport(self, trained, tmp_path, capsys):
        common = ["--config", SMOKE, "--out", str(tmp_path), *FAST]
        checkpoint = str(trained / "checkpoint.npz")
        assert run_experiment.main(["sensitivity", *common, "--checkpoint", checkpoint]) == 0
        rows = read_rows(tmp_path / "sensitivity.csv")
        assert [r["layer"] for r in rows] == ["conv1", "conv2", "conv3", "fc1"]
        schedule = json.loads((tmp_path / "schedule.json").read_text())
        assert set(schedule["samples"]) == {"conv1", "conv2", "conv3", "fc1"}
        assert 1.0 <= schedule["relative_conversions"] <= 1.15

        args = ["hwreport", *common, "--model", "config", "--schedule", str(tmp_path / "schedule.json")]
        assert run_experiment.main(args) == 0
        variants = {r["variant"] for r in read_rows(tmp_path / "hwreport.csv")}
        assert variants == {"HPFA", "SFA", "StoX-1", "StoX-4", "StoX-8", "StoX-1-HPF", "Mix"}
        assert "Mix" in capsys.readouterr().out

    def test_resnet20_hwreport(self, tmp_path, capsys):
        args = ["hwreport", "--config", str(CONFIGS / "resnet20_hw.json"), "--out", str(tmp_path),
                "--variants", "HPFA,StoX-1"]
        assert run_experiment.main(args) == 0
        rows = read_rows(tmp_path / "hwreport.csv")
        assert len(rows) == 2 * 21 * 4
        edp = [r for r in rows if r["variant"] == "StoX-1" and r["layer"] == "total" and r["metric"] == "edp"]
        assert 333 <= 1 / float(edp[0]["normalized_to_HPFA"]) <= 1332
        assert "StoX-1" in capsys.readouterr().out


class TestExitCodes:
    def test_invalid_sample_count(self, tmp_path, capsys):
        code = run_experiment.main(["train", "--override", "quant.n_samples=9", "--out", str(tmp_path)])
        assert code == 2
        assert "n_samples" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(settings, "ALLOW_DOWNLOAD", False)
        monkeypatch.setattr(settings, "DATASET_FALLBACK", False)
        args = ["train", "--override", f"data_dir={tmp_path / 'empty'}", "--out", str(tmp_path / "out")]
        assert run_experiment.main(args) == 3
        assert "MNIST" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        args = ["eval", "--config", SMOKE, "--out", str(tmp_path), "--checkpoint", str(tmp_path / "none.npz")]
        assert run_experiment.main(args) == 2

    def test_divergence(self, tmp_path, monkeypatch, capsys):
        def diverge(args, config):
            raise DivergenceError("conv2")

        monkeypatch.setitem(run_experiment.COMMANDS, "train", diverge)
        assert run_experiment.main(["train", "--out", str(tmp_path)]) == 4
        assert "conv2" in capsys.readouterr().err
