import json
from pathlib import Path

import numpy as np
import pytest

from phmm.cli import main
from phmm.data import (
    CsvSchema,
    Sample,
    SeriesDataset,
    SynthSpec,
    load_csv,
    save_csv,
)

FIXTURE = Path(__file__).parent.parent / "src" / "phmm" / "fixtures" / "uea_accuracy_grid.csv"


def small_synth(tmp_path, seed=0) -> Path:
    """Tiny planted dataset on disk for fast CLI runs."""
    out = tmp_path / f"synth{seed}"
    spec = SynthSpec(
        regime_count=2, regime_durations=[2, 2],
        emission_means=[[1.0, -1.0], [-1.0, 1.0]],
        emission_stds=[[0.3, 0.3], [0.3, 0.3]],
        transition=[[0.5, 0.5], [0.5, 0.5]],
        T=8, D=2, n_train=16, n_test=8, seed=seed, name="cli-smoke")
    spec_path = tmp_path / f"spec{seed}.json"
    spec.save(spec_path)
    assert main(["synth", "--spec", str(spec_path), "--out", str(out)]) == 0
    return out / "data.csv"


def read_log(path: Path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestSynthCommand:
    def test_preset_and_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            code = main(["synth", "--preset", "planted4", "--seed", "3",
                         "--out", str(out)])
            assert code == 0
        assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()
        assert (a / "regimes.csv").read_bytes() == (b / "regimes.csv").read_bytes()
        assert (a / "spec.json").read_bytes() == (b / "spec.json").read_bytes()

    def test_regime_blocks_match_duration(self, tmp_path):
        out = tmp_path / "blocks"
        assert main(["synth", "--preset", "planted4", "--seed", "1",
                     "--out", str(out)]) == 0
        lines = (out / "regimes.csv").read_text().splitlines()[1:]
        row = [int(v) for v in lines[0].split(",")[1:]]
        for start in range(0, len(row), 4):
            assert len(set(row[start : start + 4])) == 1

    def test_generated_csv_loads_back(self, tmp_path):
        path = small_synth(tmp_path)
        ds = load_csv(path, CsvSchema(id_col="id", time_col="t",
                                      value_cols=["v0", "v1"],
                                      label_col="label", split_col="split"))
        assert len(ds.train_samples) == 16
        assert len(ds.test_samples) == 8

    def test_unknown_preset_exits_2(self, tmp_path):
        assert main(["synth", "--preset", "nope", "--out", str(tmp_path / "x")]) == 2

    def test_spec_and_preset_together_rejected(self, tmp_path):
        assert main(["synth", "--preset", "planted4", "--spec", "s.json",
                     "--out", str(tmp_path / "x")]) == 2


class TestTrainCommand:
    def test_train_writes_checkpoint_log_manifest(self, tmp_path):
        data = small_synth(tmp_path)
        out = tmp_path / "run"
        code = main(["train", "--data", str(data), "--format", "csv",
                     "--k", "2", "--m", "2", "--hidden-dim", "6",
                     "--epochs", "2", "--seed", "7", "--out", str(out)])
        assert code == 0
        assert (out / "checkpoint.json").exists()
        assert (out / "manifest.json").exists()
        log = read_log(out / "train_log.jsonl")
        assert len(log) == 2
        for key in ("elbo", "recon_ll", "kl_total", "head_ll",
                    "train_metric", "val_metric", "wall_time_ms"):
            assert key in log[0]

    def test_missing_file_exits_2(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "absent.csv"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_repeat_run_is_byte_identical(self, tmp_path):
        data = small_synth(tmp_path)
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["train", "--data", str(data), "--format", "csv",
                         "--epochs", "2", "--seed", "11",
                         "--out", str(out)]) == 0
            outs.append(out)
        a, b = outs
        assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        log_a = read_log(a / "train_log.jsonl")
        log_b = read_log(b / "train_log.jsonl")
        for ra, rb in zip(log_a, log_b):
            ra.pop("wall_time_ms"), rb.pop("wall_time_ms")
            assert ra == rb

    def test_config_file_and_flag_precedence(self, tmp_path):
        data = small_synth(tmp_path)
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 1, "k": 4, "hidden_dim": 6}))
        out = tmp_path / "cfgrun"
        assert main(["train", "--data", str(data), "--config", str(cfg),
                     "--k", "2", "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["model"]["k"] == 2        # flag wins
        assert manifest["config"]["model"]["hidden_dim"] == 6  # file beats default
        assert manifest["config"]["train"]["epochs"] == 1


class TestEvalCommand:
    def test_memorizable_toy_reaches_high_train_accuracy(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = []
        for i in range(10):
            label = i % 2
            base = np.array([2.0, -2.0]) * (1 if label == 0 else -1)
            samples.append(Sample(base + 0.05 * rng.standard_normal((8, 2)),
                                  label, "train"))
        ds = SeriesDataset(samples, task="classification", num_classes=2)
        data = tmp_path / "toy.csv"
        save_csv(data, ds)
        run = tmp_path / "run"
        assert main(["train", "--data", str(data), "--format", "csv",
                     "--k", "2", "--m", "1", "--hidden-dim", "8",
                     "--epochs", "30", "--lr", "0.01", "--batch-size", "5",
                     "--seed", "1", "--out", str(run)]) == 0
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(run / "checkpoint.json"),
                     "--data", str(data), "--format", "csv",
                     "--split", "train", "--out", str(out)]) == 0
        report = json.loads((out / "eval_report.json").read_text())
        assert report["accuracy"] >= 0.9

    def test_corrupt_checkpoint_exits_2(self, tmp_path):
        data = small_synth(tmp_path)
        bad = tmp_path / "bad.json"
        bad.write_text("{\"format_version\": 42}")
        assert main(["eval", "--checkpoint", str(bad), "--data", str(data),
                     "--out", str(tmp_path / "o")]) == 2

    def test_dim_mismatch_exits_2(self, tmp_path):
        data = small_synth(tmp_path)
        run = tmp_path / "run"
        assert main(["train", "--data", str(data), "--format", "csv",
                     "--epochs", "1", "--out", str(run)]) == 0
        other = tmp_path / "other"
        spec = SynthSpec(regime_count=2, regime_durations=[2, 2],
                         emission_means=[[1.0], [-1.0]],
                         emission_stds=[[0.3], [0.3]],
                         transition=[[0.5, 0.5], [0.5, 0.5]],
                         T=8, D=1, n_train=4, n_test=2, seed=0)
        spec_path = tmp_path / "d1.json"
        spec.save(spec_path)
        assert main(["synth", "--spec", str(spec_path), "--out", str(other)]) == 0
        assert main(["eval", "--checkpoint", str(run / "checkpoint.json"),
                     "--data", str(other / "data.csv"),
                     "--out", str(tmp_path / "o2")]) == 2


class TestForecastPipeline:
    def test_forecast_runs_and_reports_ratio(self, tmp_path):
        spec = SynthSpec(
            regime_count=2, regime_durations=[8, 8],
            emission_means=[[0.15], [-0.15]], emission_stds=[[0.05], [0.05]],
            transition=[[0.5, 0.5], [0.5, 0.5]],
            T=40, D=1, n_train=24, n_test=8, seed=2,
            task="forecasting", horizon=8, walk=True, name="walk-smoke")
        spec_path = tmp_path / "walk.json"
        spec.save(spec_path)
        synth_out = tmp_path / "walkdata"
        assert main(["synth", "--spec", str(spec_path), "--out", str(synth_out)]) == 0
        run = tmp_path / "run"
        assert main(["train", "--data", str(synth_out / "data.csv"),
                     "--format", "csv", "--head", "predictor",
                     "--horizon", "8", "--k", "2", "--m", "2",
                     "--hidden-dim", "6", "--epochs", "2",
                     "--out", str(run)]) == 0
        out = tmp_path / "fc"
        assert main(["forecast", "--checkpoint", str(run / "checkpoint.json"),
                     "--data", str(synth_out / "data.csv"), "--format", "csv",
                     "--horizon", "8", "--out", str(out)]) == 0
        report = json.loads((out / "forecast_report.json").read_text())
        assert report["rmse"] > 0 and report["persistence_rmse"] > 0
        assert (out / "forecasts.csv").exists()


class TestAblateCommand:
    def test_single_cell_matches_train_eval(self, tmp_path):
        data = small_synth(tmp_path)
        ab = tmp_path / "ab"
        assert main(["ablate", "--data", str(data), "--format", "csv",
                     "--k-list", "2", "--m-list", "1", "--hidden-dim", "6",
                     "--epochs", "2", "--seed", "5", "--out", str(ab)]) == 0
        grid = json.loads((ab / "ablation_report.json").read_text())["grid"]

        run = tmp_path / "single"
        assert main(["train", "--data", str(data), "--format", "csv",
                     "--k", "2", "--m", "1", "--hidden-dim", "6",
                     "--epochs", "2", "--seed", "5", "--out", str(run)]) == 0
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(run / "checkpoint.json"),
                     "--data", str(data), "--format", "csv",
                     "--split", "test", "--out", str(out)]) == 0
        report = json.loads((out / "eval_report.json").read_text())
        assert grid[0][0] == pytest.approx(report["accuracy"])

    def test_bad_list_exits_2(self, tmp_path):
        data = small_synth(tmp_path)
        assert main(["ablate", "--data", str(data), "--k-list", "2,x",
                     "--m-list", "1", "--out", str(tmp_path / "o")]) == 2


class TestStatsCommand:
    def test_fixture_aggregates(self, tmp_path):
        out = tmp_path / "stats"
        assert main(["stats", "--results", str(FIXTURE), "--focus", "PHMM",
                     "--out", str(out)]) == 0
        report = json.loads((out / "stats_report.json").read_text())
        assert abs(report["avg_rank_dense"]["PHMM"] - 2.300) <= 1e-9
        assert report["wins_ties"]["PHMM"] == 12
        assert (out / "rank_summary.csv").exists()

    def test_degenerate_pair_is_na(self, tmp_path):
        # method A is identical to the focus method, so the paired test
        # against it has no nonzero differences and must surface as N/A
        grid = tmp_path / "grid.csv"
        rows = ["dataset,A,B,C"]
        for i in range(6):
            v = 0.1 * (i + 1)
            rows.append(f"d{i},{v + 0.05},{v},{v + 0.05}")
        grid.write_text("\n".join(rows) + "\n")
        out = tmp_path / "stats"
        assert main(["stats", "--results", str(grid), "--focus", "C",
                     "--out", str(out)]) == 0
        report = json.loads((out / "stats_report.json").read_text())
        assert report["wilcoxon_p"]["A"] is None
        assert report["wilcoxon_p"]["B"] is not None
        summary = (out / "rank_summary.csv").read_text()
        assert "N/A" in summary

    def test_row_permutation_leaves_outputs_unchanged(self, tmp_path):
        lines = FIXTURE.read_text().splitlines()
        permuted = [lines[0]] + lines[1:][::-1]
        shuffled = tmp_path / "shuffled.csv"
        shuffled.write_text("\n".join(permuted) + "\n")
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["stats", "--results", str(FIXTURE), "--focus", "PHMM",
                     "--out", str(out_a)]) == 0
        assert main(["stats", "--results", str(shuffled), "--focus", "PHMM",
                     "--out", str(out_b)]) == 0
        ra = json.loads((out_a / "stats_report.json").read_text())
        rb = json.loads((out_b / "stats_report.json").read_text())
        assert ra == rb

    def test_malformed_grid_exits_2(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("dataset,A,B\nd0,0.5\n")
        assert main(["stats", "--results", str(bad),
                     "--out", str(tmp_path / "o")]) == 2


class TestNumericalExit:
    def test_nan_train_exits_3(self, tmp_path):
        # an absurd learning rate explodes the parameters after the first
        # update; the next batch's loss goes non-finite and must abort
        data = small_synth(tmp_path)
        out = tmp_path / "nanrun"
        code = main(["train", "--data", str(data), "--format", "csv",
                     "--epochs", "3", "--lr", "1e20",
                     "--out", str(out)])
        assert code == 3
