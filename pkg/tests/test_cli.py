"""Командная строка: коды возврата, файлы результатов, воспроизводимость."""

import json

import pandas as pd
import pytest

from deformer.cli import main
from deformer.core.config import settings
from deformer.core.exceptions import EXIT_FAILURE, EXIT_OK, EXIT_USAGE
from deformer.schemas.reports import RunManifest
from deformer.services.dataset_io import read_dataset
from deformer.utils.hashing import sha256_file


@pytest.fixture
def dataset_file(tmp_path, spec_file):
    path = tmp_path / "small.eegd"
    argv = ["generate-data", "--spec", str(spec_file), "--out", str(path)]
    assert main([*argv, "--seed", "1"]) == 0
    return path


@pytest.fixture
def trained_dir(tmp_path, dataset_file):
    out = tmp_path / "run"
    argv = ["train", "--dataset", str(dataset_file), "--out-dir", str(out)]
    argv += ["--config", "toy"]
    assert main([*argv, "--epochs", "1"]) == EXIT_OK
    return out


class TestInfo:
    def test_embedding_length(self, capsys):
        assert main(["info", "--preset", "dataset-i", "--json"]) == EXIT_OK
        info = json.loads(capsys.readouterr().out)
        assert info["embedding_len"] == 1856
        assert info["kernel_len"] == 21
        assert info["ablations"]["ftl_enabled"] is True

    def test_ablation_shrinks_model(self, capsys):
        main(["info", "--preset", "dataset-i", "--json"])
        full = json.loads(capsys.readouterr().out)
        ablation = ["--set", "model.ftl_enabled=false"]
        main(["info", "--preset", "dataset-i", "--json", *ablation])
        ablated = json.loads(capsys.readouterr().out)
        assert ablated["param_count"] < full["param_count"]
        assert ablated["macs"] < full["macs"]

    def test_removed_ip_unit(self, capsys):
        main(["info", "--preset", "toy", "--json"])
        full = json.loads(capsys.readouterr().out)
        argv = ["info", "--preset", "toy", "--set", "model.ip_removed=[0]", "--json"]
        assert main(argv) == EXIT_OK
        ablated = json.loads(capsys.readouterr().out)
        assert ablated["ablations"]["ip_removed"] == [0]
        assert full["embedding_len"] - ablated["embedding_len"] == 8
        assert "blocks.0.ip" not in ablated["shapes"]

    def test_text_output(self, capsys):
        assert main(["info", "--config", "toy"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "embedding length: 80" in out
        assert "lengths: 64 -> 32 -> 16 -> 8" in out

    def test_unknown_config(self, capsys):
        assert main(["info", "--config", "no-such-config"]) == EXIT_USAGE
        assert "Config not found" in capsys.readouterr().err

    def test_requires_a_model(self):
        assert main(["info"]) == EXIT_USAGE

    def test_invalid_preset_override(self, capsys):
        code = main(["info", "--preset", "toy", "--set", "model.n_hct=10"])
        assert code == EXIT_USAGE
        assert "collapses" in capsys.readouterr().err


def test_no_command_prints_help(capsys):
    assert main([]) == EXIT_USAGE
    assert "generate-data" in capsys.readouterr().out


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    expected = f"{settings.PROJECT_NAME} {settings.VERSION}"
    assert capsys.readouterr().out.strip() == expected


class TestGradcheck:
    def test_sampled_check_passes(self, capsys):
        assert main(["gradcheck", "--samples", "5"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "encoder.temporal.weight" in out
        assert "max relative error" in out

    def test_zero_tolerance_fails(self, capsys):
        assert main(["gradcheck", "--samples", "2", "--tolerance", "0"]) == EXIT_FAILURE
        assert "GradientCheckError" in capsys.readouterr().err


class TestGenerateData:
    def test_output_is_readable(self, dataset_file):
        dataset = read_dataset(dataset_file)
        assert dataset.subject_ids == ["S01", "S02", "S03"]
        assert dataset.geometry == (4, 64)
        assert len(dataset.subjects[0]) == 12

    def test_manifest_is_written(self, dataset_file):
        manifest_path = dataset_file.with_name(dataset_file.name + ".manifest.json")
        text = manifest_path.read_text(encoding="utf-8")
        manifest = RunManifest.model_validate_json(text)
        assert manifest.seeds == {"data": 1}
        assert manifest.input_hashes["output"] == sha256_file(dataset_file)
        assert manifest.format_versions["eegd"] == 1

    def test_same_seed_same_bytes(self, tmp_path, spec_file, dataset_file):
        again = tmp_path / "again.eegd"
        generate = ["generate-data", "--spec", str(spec_file)]
        main([*generate, "--out", str(again), "--seed", "1"])
        assert sha256_file(again) == sha256_file(dataset_file)

    def test_environment_seed_wins(self, tmp_path, spec_file, monkeypatch):
        plain, forced = tmp_path / "plain.eegd", tmp_path / "forced.eegd"
        generate = ["generate-data", "--spec", str(spec_file)]
        main([*generate, "--out", str(plain), "--seed", "11"])
        monkeypatch.setattr(settings, "seed", 11)
        main([*generate, "--out", str(forced), "--seed", "0"])
        assert sha256_file(plain) == sha256_file(forced)

    def test_segment_index(self, tmp_path, spec_file):
        index = tmp_path / "index.csv"
        out = tmp_path / "d.eegd"
        argv = ["generate-data", "--spec", str(spec_file), "--out", str(out)]
        assert main([*argv, "--index-csv", str(index)]) == EXIT_OK
        assert len(pd.read_csv(index)) == 36

    def test_nyquist_violation(self, tmp_path, spec_file, capsys):
        out = tmp_path / "bad.eegd"
        argv = ["generate-data", "--spec", str(spec_file), "--out", str(out)]
        assert main([*argv, "--set", "data.sampling_rate=16.0"]) == EXIT_USAGE
        assert "center_hz" in capsys.readouterr().err
        assert not out.exists()


class TestTrain:
    def test_outputs(self, trained_dir):
        outputs = ("checkpoint/manifest.json", "checkpoint/tensors.bin", "history.csv")
        for name in outputs:
            assert (trained_dir / name).exists()
        metrics = json.loads((trained_dir / "metrics.json").read_text(encoding="utf-8"))
        assert set(metrics) == {"val"}
        history = pd.read_csv(trained_dir / "history.csv")
        assert list(history.columns) == ["epoch", "lr", "train_loss", "val_acc"]
        assert len(history) == 1

    def test_rerun_from_manifest_is_identical(
        self, tmp_path, dataset_file, trained_dir
    ):
        rerun = tmp_path / "rerun"
        argv = ["train", "--dataset", str(dataset_file), "--out-dir", str(rerun)]
        assert main([*argv, "--config", str(trained_dir / "manifest.json")]) == EXIT_OK
        outputs = ("history.csv", "checkpoint/tensors.bin", "checkpoint/manifest.json")
        for name in outputs:
            assert (rerun / name).read_bytes() == (trained_dir / name).read_bytes()

    def test_holdout_adds_test_metrics(self, tmp_path, dataset_file):
        out = tmp_path / "holdout"
        argv = ["train", "--dataset", str(dataset_file), "--out-dir", str(out)]
        argv += ["--config", "toy"]
        assert main([*argv, "--epochs", "1", "--holdout", "S02"]) == EXIT_OK
        metrics = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
        assert metrics["test"]["n_samples"] == 12

    def test_geometry_mismatch(self, tmp_path, dataset_file, capsys):
        argv = ["train", "--dataset", str(dataset_file)]
        argv += ["--out-dir", str(tmp_path / "x")]
        assert main([*argv, "--config", "synthetic"]) == EXIT_USAGE
        assert "model.channels=8 vs dataset 4" in capsys.readouterr().err


def test_loso_summary(tmp_path, dataset_file, capsys):
    out = tmp_path / "loso"
    argv = ["loso", "--dataset", str(dataset_file), "--out-dir", str(out)]
    argv += ["--config", "toy"]
    capsys.readouterr()
    assert main([*argv, "--epochs", "1"]) == EXIT_OK
    summary = pd.read_csv(out / "summary.csv")
    assert list(summary.columns) == ["subject", "acc", "f1_macro"]
    assert summary["subject"].tolist() == ["S01", "S02", "S03", "mean", "std"]
    assert summary["acc"].iloc[3] == pytest.approx(summary["acc"].iloc[:3].mean())
    for sid in ("S01", "S02", "S03"):
        assert (out / sid / "checkpoint" / "tensors.bin").exists()
    summary_json = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary_json["std_kind"] == "population"
    assert capsys.readouterr().out.startswith("ACC ")


def test_eval_report(tmp_path, dataset_file, trained_dir, capsys):
    report_path = tmp_path / "report.json"
    argv = ["eval", "--checkpoint", str(trained_dir / "checkpoint")]
    argv += ["--dataset", str(dataset_file)]
    capsys.readouterr()
    assert main([*argv, "--subject", "S03", "--out", str(report_path)]) == EXIT_OK
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["n_samples"] == 12
    assert json.loads(capsys.readouterr().out) == report


def test_eval_without_blob(tmp_path, dataset_file, trained_dir, capsys):
    (trained_dir / "checkpoint" / "tensors.bin").unlink()
    argv = ["eval", "--checkpoint", str(trained_dir / "checkpoint")]
    argv += ["--dataset", str(dataset_file)]
    assert main(argv) == EXIT_FAILURE
    assert "checkpoint tensor blob not found" in capsys.readouterr().err


class TestSaliency:
    def test_csv_export(self, tmp_path, dataset_file, trained_dir, capsys):
        out = tmp_path / "sal.csv"
        argv = ["saliency", "--checkpoint", str(trained_dir / "checkpoint")]
        argv += ["--dataset", str(dataset_file), "--class", "1", "--out", str(out)]
        capsys.readouterr()
        assert main(argv) == EXIT_OK
        assert len(pd.read_csv(out)) == 4
        assert (tmp_path / "sal_matrix.csv").exists()
        assert len(capsys.readouterr().out.splitlines()) == 4

    def test_bad_class(self, tmp_path, dataset_file, trained_dir, capsys):
        argv = ["saliency", "--checkpoint", str(trained_dir / "checkpoint")]
        argv += ["--dataset", str(dataset_file), "--class", "5"]
        argv += ["--out", str(tmp_path / "s.csv")]
        assert main(argv) == EXIT_USAGE
        assert "--class 5" in capsys.readouterr().err
