import json

import numpy as np
import pytest

from lrimpute import data as D
from lrimpute.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def make_run_config(tmp_path, data_path, mask_path, **overrides):
    cfg = {
        "seed": 0,
        "data": str(data_path),
        "mask": str(mask_path),
        "model": {"window": 12, "input_hidden": 8, "node_embed_total": 24,
                  "node_embed_key_dim": 4, "model_dim": 16, "projected_dim": 3,
                  "n_layers": 1, "ffn_hidden": 24, "steps_per_day": 12},
        "train": {"max_epochs": 2, "batch_size": 4},
        "whiten": {"mode": "fixed", "rate": 0.25},
        "window": {"length": 12},
    }
    cfg.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def pipeline_files(tmp_path, capsys):
    data_path = tmp_path / "data.csv"
    mask_path = tmp_path / "mask.csv"
    code, _, _ = run_cli(capsys, "synth", "--nodes", "6", "--steps", "120",
                         "--rank", "2", "--noise", "0.05", "--steps-per-day", "12",
                         "--seed", "1", "-o", str(data_path))
    assert code == 0
    code, _, _ = run_cli(capsys, "mask", "-i", str(data_path), "-o", str(mask_path),
                         "--pattern", "point", "--rate", "0.3", "--seed", "2")
    assert code == 0
    return data_path, mask_path


class TestSynthAndMask:
    def test_synth_writes_data_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "d.csv"
        code, _, _ = run_cli(capsys, "synth", "--nodes", "4", "--steps", "48",
                             "--rank", "2", "-o", str(out))
        assert code == 0
        assert out.exists()
        manifest = json.loads((tmp_path / "d.csv.manifest.json").read_text())
        assert manifest["nodes"] == 4 and manifest["seed"] == 0

    def test_synth_deterministic_bytes(self, tmp_path, capsys):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        for out in (a, b):
            code, _, _ = run_cli(capsys, "synth", "--nodes", "5", "--steps", "60",
                                 "--seed", "7", "-o", str(out))
            assert code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_mask_block_pattern(self, tmp_path, capsys):
        data_path = tmp_path / "d.csv"
        run_cli(capsys, "synth", "--nodes", "6", "--steps", "400", "-o", str(data_path))
        mask_path = tmp_path / "m.csv"
        code, _, _ = run_cli(capsys, "mask", "-i", str(data_path), "-o", str(mask_path),
                             "--pattern", "block", "--duration", "6..12", "--seed", "3")
        assert code == 0
        mask = D.load_mask_csv(mask_path)
        assert 0 < mask.mean() < 1

    def test_mask_spec_config_file(self, tmp_path, capsys):
        data_path = tmp_path / "d.csv"
        run_cli(capsys, "synth", "--nodes", "4", "--steps", "60", "--rank", "2",
                "-o", str(data_path))
        spec_path = tmp_path / "missing.json"
        spec_path.write_text(json.dumps(
            {"kind": "point", "point_rate": 0.5, "seed": 5}))
        code, _, _ = run_cli(capsys, "mask", "-i", str(data_path),
                             "-o", str(tmp_path / "m.csv"), "--config", str(spec_path))
        assert code == 0


class TestTrainImputeEval:
    def test_full_pipeline(self, tmp_path, capsys, pipeline_files):
        data_path, mask_path = pipeline_files
        run_json = make_run_config(tmp_path, data_path, mask_path)
        out_dir = tmp_path / "run"
        code, out, _ = run_cli(capsys, "train", "-c", str(run_json), "-o", str(out_dir))
        assert code == 0
        summary = json.loads(out)
        assert (out_dir / "model.ckpt").exists()
        assert (out_dir / "resolved.json").exists()
        assert (out_dir / "history.csv").exists()
        assert summary["epochs"] == 2

        imputed_path = tmp_path / "imputed.csv"
        code, _, _ = run_cli(capsys, "impute", "-m", str(out_dir / "model.ckpt"),
                             "-i", str(data_path), "--mask", str(mask_path),
                             "-o", str(imputed_path))
        assert code == 0

        code, out, _ = run_cli(capsys, "eval", "--pred", str(imputed_path),
                               "--truth", str(data_path), "--mask", str(mask_path))
        assert code == 0
        metrics = json.loads(out)
        assert metrics["count"] > 0 and np.isfinite(metrics["mae"])

        # observed coordinates must be untouched by imputation
        truth = D.load_dataset_csv(data_path)
        pred = D.load_dataset_csv(imputed_path)
        mask = D.load_mask_csv(mask_path)
        assert np.array_equal(pred.values[mask], truth.values[mask])

    def test_eval_identical_inputs_is_zero(self, tmp_path, capsys, pipeline_files):
        data_path, mask_path = pipeline_files
        code, out, _ = run_cli(capsys, "eval", "--pred", str(data_path),
                               "--truth", str(data_path), "--mask", str(mask_path))
        assert code == 0
        metrics = json.loads(out)
        assert metrics["mae"] == 0.0 and metrics["rmse"] == 0.0

    def test_unknown_config_key_exits_3(self, tmp_path, capsys, pipeline_files):
        data_path, mask_path = pipeline_files
        run_json = make_run_config(tmp_path, data_path, mask_path, optimizer="sgd")
        code, _, err = run_cli(capsys, "train", "-c", str(run_json),
                               "-o", str(tmp_path / "x"))
        assert code == 3
        assert json.loads(err)["error"] == "ConfigError"

    def test_missing_data_file_exits_3(self, tmp_path, capsys):
        run_json = tmp_path / "run.json"
        run_json.write_text(json.dumps({"data": str(tmp_path / "absent.csv")}))
        code, _, err = run_cli(capsys, "train", "-c", str(run_json),
                               "-o", str(tmp_path / "x"))
        assert code == 3

    def test_whiten_zero_refused(self, tmp_path, capsys, pipeline_files):
        data_path, mask_path = pipeline_files
        run_json = make_run_config(tmp_path, data_path, mask_path,
                                   whiten={"mode": "fixed", "rate": 0.0})
        code, _, err = run_cli(capsys, "train", "-c", str(run_json),
                               "-o", str(tmp_path / "x"))
        assert code == 3

    def test_bad_split_rejected(self, tmp_path, capsys, pipeline_files):
        data_path, mask_path = pipeline_files
        run_json = make_run_config(tmp_path, data_path, mask_path,
                                   split={"train": 0.9, "val": 0.3, "test": 0.2})
        code, _, err = run_cli(capsys, "train", "-c", str(run_json),
                               "-o", str(tmp_path / "x"))
        assert code == 3

    def test_custom_split_recorded(self, tmp_path, capsys, pipeline_files):
        data_path, mask_path = pipeline_files
        run_json = make_run_config(tmp_path, data_path, mask_path,
                                   split={"train": 0.6, "val": 0.2, "test": 0.2})
        out_dir = tmp_path / "split_run"
        code, _, _ = run_cli(capsys, "train", "-c", str(run_json), "-o", str(out_dir))
        assert code == 0
        resolved = json.loads((out_dir / "resolved.json").read_text())
        assert resolved["split"]["train"] == 0.6

    def test_seed_env_override(self, tmp_path, capsys, monkeypatch, pipeline_files):
        data_path, mask_path = pipeline_files
        monkeypatch.setenv("LRIMPUTE_SEED", "123")
        run_json = make_run_config(tmp_path, data_path, mask_path)
        out_dir = tmp_path / "seeded"
        code, _, _ = run_cli(capsys, "train", "-c", str(run_json), "-o", str(out_dir))
        assert code == 0
        resolved = json.loads((out_dir / "resolved.json").read_text())
        assert resolved["seed"] == 123


class TestBaselineCommand:
    def test_mean_baseline(self, tmp_path, capsys, pipeline_files):
        data_path, mask_path = pipeline_files
        out = tmp_path / "mean.csv"
        code, _, _ = run_cli(capsys, "baseline", "--method", "mean",
                             "-i", str(data_path), "--mask", str(mask_path),
                             "-o", str(out))
        assert code == 0
        truth = D.load_dataset_csv(data_path)
        pred = D.load_dataset_csv(out)
        mask = D.load_mask_csv(mask_path)
        assert np.array_equal(pred.values[mask], truth.values[mask])
        assert pred.gt_available.all()


class TestSpectrum:
    def test_exports_values_and_energy(self, tmp_path, capsys, pipeline_files):
        data_path, _ = pipeline_files
        out = tmp_path / "sv.csv"
        code, _, _ = run_cli(capsys, "spectrum", "-i", str(data_path), "-o", str(out))
        assert code == 0
        rows = out.read_text().strip().splitlines()
        assert rows[0] == "index,singular_value,cumulative_energy"
        last = rows[-1].split(",")
        assert abs(float(last[2]) - 1.0) < 1e-9

    def test_rejects_incomplete_matrix(self, tmp_path, capsys):
        path = tmp_path / "holes.csv"
        path.write_text("s0,s1\n1.0,\n2.0,3.0\n")
        code, _, err = run_cli(capsys, "spectrum", "-i", str(path),
                               "-o", str(tmp_path / "sv.csv"))
        assert code == 3
        assert "missing" in json.loads(err)["message"]


class TestBench:
    def test_temporal_report_structure(self, capsys):
        code, out, _ = run_cli(capsys, "bench", "--attention", "temporal",
                               "--sizes", "32,64", "--repeats", "2", "--dim", "16")
        assert code == 0
        report = json.loads(out)
        assert [row["size"] for row in report["rows"]] == [32, 64]
        assert report["ratios"][0]["factored_ratio"] > 0

    def test_rejects_single_size(self, capsys):
        code, _, err = run_cli(capsys, "bench", "--attention", "temporal",
                               "--sizes", "64", "--repeats", "2")
        assert code == 3
