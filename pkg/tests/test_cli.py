"""Harness subcommands: config validation, outputs, idempotence, exit codes."""
import json
import subprocess
import sys

import numpy as np
import pytest

from qttt import cli, data


def write_config(tmp_path, overrides=None, name="cfg.json"):
    cfg = {
        "datasets": {"families": ["linearly-separable"], "d_x": 5, "seeds": [0]},
        "train": {"epochs": 2},
        "ttt": {"epochs": 2},
        "ttt_online": {"epochs": 1},
    }
    if overrides:
        for key, value in overrides.items():
            if isinstance(value, dict) and key in cfg:
                cfg[key].update(value)
            else:
                cfg[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"dataset": {}}))
        with pytest.raises(cli.ConfigError, match="unknown config key"):
            cli.ExperimentConfig.from_file(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"epoch": 5}}))
        with pytest.raises(cli.ConfigError):
            cli.ExperimentConfig.from_file(path)

    def test_unknown_family_rejected(self, tmp_path):
        path = write_config(tmp_path, {"datasets": {"families": ["mnist"]}})
        with pytest.raises(cli.ConfigError, match="family"):
            cli.ExperimentConfig.from_file(path)

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(cli.ConfigError):
            cli.ExperimentConfig.from_file(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(cli.ConfigError):
            cli.ExperimentConfig.from_file(tmp_path / "nope.json")

    def test_defaults_fill_in(self, tmp_path):
        cfg = cli.ExperimentConfig.from_file(write_config(tmp_path))
        assert cfg.raw["train"]["batch_size"] == 32
        assert cfg.raw["sweep"]["variants"] == ["baseline-no-ttt", "qttt-batch", "qttt-online"]

    def test_hash_stable_and_sensitive(self, tmp_path):
        a = cli.ExperimentConfig.from_file(write_config(tmp_path, name="a.json"))
        b = cli.ExperimentConfig.from_file(write_config(tmp_path, name="b.json"))
        c = cli.ExperimentConfig.from_file(
            write_config(tmp_path, {"train": {"epochs": 3}}, name="c.json")
        )
        assert a.config_hash == b.config_hash
        assert a.config_hash != c.config_hash

    def test_exit_code_for_config_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"nonsense": 1}))
        rc = cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 1

    def test_exit_code_ok(self, tmp_path):
        rc = cli.main([
            "generate", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "o"),
        ])
        assert rc == 0

    def test_console_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "qttt.cli", "--help"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        for sub in ("generate", "train", "sweep", "ablation", "complexity", "theorem"):
            assert sub in proc.stdout


class TestGenerate:
    def test_writes_all_family_seed_pairs(self, tmp_path):
        path = write_config(
            tmp_path,
            {"datasets": {"families": list(data.FAMILIES), "seeds": [0, 1, 2]}},
        )
        out = tmp_path / "out"
        assert cli.main(["generate", "--config", str(path), "--out", str(out)]) == 0
        csvs = sorted((out / "datasets").glob("*.csv"))
        assert len(csvs) == 15

    def test_rerun_is_idempotent(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "out"
        cli.main(["generate", "--config", str(path), "--out", str(out)])
        csv = next((out / "datasets").glob("*.csv"))
        blob = csv.read_bytes()
        cli.main(["generate", "--config", str(path), "--out", str(out)])
        assert csv.read_bytes() == blob


class TestTrain:
    def test_checkpoint_and_history(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "out"
        assert cli.main(["train", "--config", str(path), "--out", str(out)]) == 0
        ckpts = list((out / "checkpoints").glob("*.json"))
        assert len(ckpts) == 1
        blob = json.loads(ckpts[0].read_text())
        assert blob["version"] == 1 and "segments" in blob
        history = ckpts[0].with_suffix(".history.csv").read_text().strip().split("\n")
        assert len(history) == 3  # header + 2 epochs
        assert history[0].startswith("epoch,")

    def test_zero_epoch_checkpoint_equals_initialization(self, tmp_path):
        from qttt.circuits import ArchitectureConfig, QtttParams

        path = write_config(tmp_path, {"train": {"epochs": 0}})
        out = tmp_path / "out"
        cli.main(["train", "--config", str(path), "--out", str(out)])
        ckpt = next((out / "checkpoints").glob("*.json"))
        params = QtttParams.from_dict(json.loads(ckpt.read_text()))
        init = QtttParams.init(ArchitectureConfig(d_x=5), seed=0)
        np.testing.assert_array_equal(params.values, init.values)

    def test_reproducible_across_runs(self, tmp_path):
        path = write_config(tmp_path)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        cli.main(["train", "--config", str(path), "--out", str(out1)])
        cli.main(["train", "--config", str(path), "--out", str(out2)])
        c1 = next((out1 / "checkpoints").glob("*.json")).read_text()
        c2 = next((out2 / "checkpoints").glob("*.json")).read_text()
        assert c1 == c2


@pytest.fixture(scope="module")
def sweep_out(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    path = write_config(
        tmp,
        {
            "train": {"epochs": 4},
            "sweep": {
                "noise_epsilons": [0.0, 0.3],
                "corruptions": [{"kind": "gaussian", "levels": [0.0, 0.5]}],
            },
        },
    )
    out = tmp / "out"
    rc = cli.main(["sweep", "--config", str(path), "--out", str(out)])
    assert rc == 0
    return path, out


class TestSweep:

    def _rows(self, out):
        csv = next(out.glob("metrics_*.csv"))
        lines = csv.read_text().strip().split("\n")
        header = lines[0].split(",")
        assert tuple(header) == cli.METRICS_COLUMNS
        return [dict(zip(header, line.split(","))) for line in lines[1:]]

    def test_row_grid(self, sweep_out):
        _, out = sweep_out
        rows = self._rows(out)
        # (2 noise points + 2 corruption points) x 3 variants x 1 family x 1 seed
        assert len(rows) == 12

    def test_zero_corruption_point_reproduces_clean_accuracy(self, sweep_out):
        _, out = sweep_out
        rows = self._rows(out)
        base = {
            (r["corruption_kind"], r["corruption_level"], r["epsilon_theta"]): r["accuracy"]
            for r in rows
            if r["variant"] == "baseline-no-ttt"
        }
        assert base[("none", "0.0", "0.0")] == base[("gaussian", "0.0", "0.0")]

    def test_ttt_descent_in_every_row(self, sweep_out):
        _, out = sweep_out
        for r in self._rows(out):
            if r["variant"] == "qttt-batch":
                assert float(r["l_ae_after"]) <= float(r["l_ae_before"]) + 1e-9

    def test_rerun_skips(self, sweep_out, capsys):
        path, out = sweep_out
        csv = next(out.glob("metrics_*.csv"))
        blob = csv.read_bytes()
        rc = cli.main(["sweep", "--config", str(path), "--out", str(out)])
        assert rc == 0
        assert csv.read_bytes() == blob
        assert "nothing to do" in capsys.readouterr().out

    def test_zero_noise_point_ttt_near_neutral(self, sweep_out):
        _, out = sweep_out
        rows = self._rows(out)
        clean = {
            r["variant"]: float(r["accuracy"])
            for r in rows
            if r["epsilon_theta"] == "0.0" and r["corruption_kind"] == "none"
        }
        assert abs(clean["qttt-batch"] - clean["baseline-no-ttt"]) <= 5.0

    def test_noise_resample_changes_evaluations(self, tmp_path):
        overrides = {
            "train": {"epochs": 2},
            "sweep": {"noise_epsilons": [0.9], "variants": ["baseline-no-ttt", "qttt-batch"]},
        }
        out_fixed, out_rs = tmp_path / "fixed", tmp_path / "resampled"
        path = write_config(tmp_path, overrides)
        assert cli.main(["sweep", "--config", str(path), "--out", str(out_fixed)]) == 0
        assert cli.main(
            ["sweep", "--config", str(path), "--out", str(out_rs), "--noise-resample"]
        ) == 0
        fixed = next(out_fixed.glob("metrics_*.csv")).read_text()
        resampled = next(out_rs.glob("metrics_*.csv")).read_text()
        assert fixed != resampled  # adaptation faces a different draw than evaluation

    def test_ttt_curve_recorded_when_asked(self, tmp_path):
        path = write_config(
            tmp_path,
            {"sweep": {"noise_epsilons": [0.3], "record_ttt_curve": True,
                       "variants": ["qttt-batch"]}},
        )
        out = tmp_path / "out"
        assert cli.main(["sweep", "--config", str(path), "--out", str(out)]) == 0
        curve = next(out.glob("ttt_curve_*.csv"))
        lines = curve.read_text().strip().split("\n")
        assert tuple(lines[0].split(",")) == cli.CURVE_COLUMNS
        assert len(lines) == 1 + 3  # header + epochs 0..2


class TestComplexity:
    def test_report_written_and_verified(self, tmp_path):
        path = write_config(tmp_path, {"complexity": {"L_M_values": [4, 8]}})
        out = tmp_path / "out"
        assert cli.main(["complexity", "--config", str(path), "--out", str(out)]) == 0
        blob = json.loads(next(out.glob("complexity_*.json")).read_text())
        assert len(blob) == 2
        assert all(entry["instrumented_match"] for entry in blob)
        assert blob[0]["measured_ratio"] > blob[1]["measured_ratio"]


class TestTheorem:
    def test_probe_summary(self, tmp_path):
        path = write_config(
            tmp_path, {"theorem": {"n_probes": 6, "train_epochs": 2}}
        )
        out = tmp_path / "out"
        assert cli.main(["theorem", "--config", str(path), "--out", str(out)]) == 0
        blob = json.loads(next(out.glob("theorem_*.json")).read_text())
        assert blob["n_probes"] == 6
        assert len(blob["probes"]) == 6
        assert 0.0 <= blob["alignment_rate"] <= 1.0


class TestAblation:
    def test_unknown_variant_rejected(self, tmp_path):
        path = write_config(tmp_path, {"ablation": {"variants": ["no-such-thing"]}})
        with pytest.raises(cli.ConfigError):
            cli.ExperimentConfig.from_file(path)

    def test_emits_all_eight_variants(self, tmp_path):
        path = write_config(
            tmp_path,
            {
                "train": {"epochs": 1},
                "ttt": {"epochs": 1},
                "ablation": {"noise_epsilons": [0.3]},
            },
        )
        out = tmp_path / "out"
        assert cli.main(["ablation", "--config", str(path), "--out", str(out)]) == 0
        csv = next(out.glob("ablation_*.csv"))
        lines = csv.read_text().strip().split("\n")
        rows = [dict(zip(lines[0].split(","), l.split(","))) for l in lines[1:]]
        assert {r["variant"] for r in rows} == set(cli.ABLATION_VARIANTS)
        assert len(rows) == 8

    def test_no_ttt_matches_sweep_baseline(self, tmp_path):
        overrides = {
            "train": {"epochs": 2},
            "sweep": {"noise_epsilons": [0.4], "variants": ["baseline-no-ttt"]},
            "ablation": {"variants": ["ablation-no-ttt"], "noise_epsilons": [0.4]},
        }
        path = write_config(tmp_path, overrides)
        out = tmp_path / "out"
        assert cli.main(["sweep", "--config", str(path), "--out", str(out)]) == 0
        assert cli.main(["ablation", "--config", str(path), "--out", str(out)]) == 0
        sweep_rows = next(out.glob("metrics_*.csv")).read_text().strip().split("\n")[1:]
        abl_rows = next(out.glob("ablation_*.csv")).read_text().strip().split("\n")[1:]
        sweep_acc = sweep_rows[0].split(",")[6]
        abl_acc = abl_rows[0].split(",")[6]
        assert sweep_acc == abl_acc


class TestStableSeed:
    def test_deterministic_and_distinct(self):
        assert cli.stable_seed(1, 0.5) == cli.stable_seed(1, 0.5)
        assert cli.stable_seed(1, 0.5) != cli.stable_seed(2, 0.5)
        assert 0 <= cli.stable_seed("x") < 2**31
