import json

import pandas as pd
import pytest

from app.cli import main, read_ensemble_manifest
from app.core.checkpoint import load_params, save_params
from app.core.errors import NumericError

SMALL_RUN = {
    "model": {
        "embed_dim": 8, "depth": 1, "heads": 2, "mlp_ratio": 2, "target_frames": 128, "num_classes": 2,
        "grid": {"patch_f": 16, "patch_t": 16, "stride_f": 16, "stride_t": 16},
    },
    "train": {"batch_size": 4, "initial_lr": 1e-3, "mixup_ratio": 0.0, "time_mask_max": 0, "freq_mask_max": 0},
}


TOY_RUN = {
    "model": {
        "embed_dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2, "target_frames": 128, "num_classes": 4,
        "grid": {"patch_f": 16, "patch_t": 16, "stride_f": 16, "stride_t": 16},
    },
    "train": {"batch_size": 16, "initial_lr": 1e-3, "schedule": "schedule.constant", "mixup_ratio": 0.0,
              "time_mask_max": 0, "freq_mask_max": 0},
}


def _report_value(text, key):
    return next(line.split(": ", 1)[1] for line in text.splitlines() if line.startswith(f"{key}: "))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> featurize -> train (2 epochs), shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps(SMALL_RUN))
    corpus, cache, run = root / "corpus", root / "features.astc", root / "run"

    assert main(["synth", "--out", str(corpus), "--n", "8", "--classes", "2",
                 "--min-seconds", "0.5", "--max-seconds", "0.5", "--eval-fraction", "0.25"]) == 0
    assert main(["featurize", "--config", str(config), "--manifest", str(corpus / "manifest.csv"),
                 "--labels", str(corpus / "labels.json"), "--out", str(root)]) == 0
    assert main(["train", "--config", str(config), "--cache", str(cache), "--epochs", "2", "--out", str(run)]) == 0
    return {"root": root, "config": config, "corpus": corpus, "cache": cache, "run": run}


def test_pipeline_outputs(workspace):
    assert (workspace["corpus"] / "manifest.csv").exists()
    assert workspace["cache"].exists()
    run = workspace["run"]
    for name in ["epoch_001.astc", "epoch_002.astc", "averaged.astc", "metrics.jsonl", "run_config.json"]:
        assert (run / name).exists()
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 2
    _, config, meta = load_params(run / "averaged.astc")
    assert config.num_classes == 2
    assert meta["labels"] == ["c00", "c01"]
    assert "normalization" in meta


def test_zero_epochs_writes_initial_checkpoint(workspace, tmp_path):
    out = tmp_path / "zero"
    assert main(["train", "--config", str(workspace["config"]), "--cache", str(workspace["cache"]),
                 "--epochs", "0", "--out", str(out)]) == 0
    assert (out / "averaged.astc").exists()
    assert (out / "metrics.jsonl").read_text() == ""


def test_eval_writes_report_and_csv(workspace, tmp_path):
    out = tmp_path / "eval"
    code = main(["eval", str(workspace["run"] / "averaged.astc"), "--config", str(workspace["config"]),
                 "--cache", str(workspace["cache"]), "--out", str(out)])
    assert code == 0
    assert "mAP:" in (out / "report.txt").read_text()
    frame = pd.read_csv(out / "per_class_ap.csv")
    assert len(frame) == 2


def test_eval_several_runs_and_ensemble(workspace, tmp_path, capsys):
    run = workspace["run"]
    members = [str(run / "epoch_001.astc"), str(run / "epoch_002.astc")]
    assert main(["eval", *members, "--config", str(workspace["config"]), "--cache", str(workspace["cache"])]) == 0
    assert "mAP_runs:" in capsys.readouterr().out

    manifest = tmp_path / "ensemble.json"
    manifest.write_text(json.dumps([{"checkpoint": m} for m in members]))
    assert main(["eval", "--ensemble", str(manifest), "--config", str(workspace["config"]),
                 "--cache", str(workspace["cache"])]) == 0
    assert "mode: ensemble" in capsys.readouterr().out


class TestEnsembleManifest:
    def test_relative_paths_resolve_against_manifest(self, tmp_path):
        manifest = tmp_path / "ens.json"
        manifest.write_text(json.dumps([{"checkpoint": "a.astc"}, {"checkpoint": "/abs/b.astc"}]))
        assert read_ensemble_manifest(str(manifest)) == [str(tmp_path / "a.astc"), "/abs/b.astc"]

    @pytest.mark.parametrize("body", [
        "[]", "{}", "not json", json.dumps([{"path": "a.astc"}]), json.dumps(["a.astc"]),
        json.dumps([{"checkpoint": 3}]),
    ])
    def test_malformed_manifest_exits_with_1(self, workspace, tmp_path, body):
        manifest = tmp_path / "ens.json"
        manifest.write_text(body)
        assert main(["eval", "--ensemble", str(manifest), "--config", str(workspace["config"]),
                     "--cache", str(workspace["cache"])]) == 1

    def test_members_must_agree_on_label_mode(self, workspace, tmp_path):
        params, config, meta = load_params(workspace["run"] / "averaged.astc")
        single = save_params(tmp_path / "single.astc", params, config.model_copy(update={"multi_label": False}),
                             **{k: meta[k] for k in ("labels", "normalization")})
        manifest = tmp_path / "ens.json"
        manifest.write_text(json.dumps([{"checkpoint": str(workspace["run"] / "averaged.astc")},
                                        {"checkpoint": str(single)}]))
        assert main(["eval", "--ensemble", str(manifest), "--config", str(workspace["config"]),
                     "--cache", str(workspace["cache"])]) == 1


def test_predict_prints_top_k(workspace, capsys):
    wav = workspace["corpus"] / "audio" / "clip_0000.wav"
    assert main(["predict", str(workspace["run"] / "averaged.astc"), str(wav), "--top", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    assert {line.split()[1] for line in lines} == {"c00", "c01"}


def test_adapt_then_train_from_vision_source(workspace, tmp_path):
    out = tmp_path / "adapt"
    assert main(["adapt", "--config", str(workspace["config"]), "--synthetic-source", "--out", str(out)]) == 0
    report = json.loads((out / "adaptation_report.json").read_text())
    assert report["source_grid"] == 24
    assert report["target_grid"] == [8, 8]
    for init in ("adapted.astc", "source.astc"):
        run = tmp_path / f"from_{init}"
        assert main(["train", "--config", str(workspace["config"]), "--cache", str(workspace["cache"]),
                     "--epochs", "1", "--init-checkpoint", str(out / init), "--out", str(run)]) == 0
        assert (run / "averaged.astc").exists()


def test_overlap_ablation_table(workspace, tmp_path):
    out = tmp_path / "ablate"
    assert main(["ablate", "--sweep", "overlap", "--config", str(workspace["config"]),
                 "--cache", str(workspace["cache"]), "--epochs", "1", "--out", str(out)]) == 0
    table = pd.read_csv(out / "ablation_overlap.csv")
    assert list(table["setting"]) == ["No Overlap", "Overlap-2", "Overlap-4", "Overlap-6 (Used)"]
    assert list(table["# Patches"]) == [512, 657, 850, 1212]


def _ablate(workspace, tmp_path, sweep):
    out = tmp_path / sweep
    assert main(["ablate", "--sweep", sweep, "--config", str(workspace["config"]),
                 "--cache", str(workspace["cache"]), "--epochs", "1", "--out", str(out)]) == 0
    return pd.read_csv(out / f"ablation_{sweep}.csv", dtype=str, keep_default_na=False)


def test_patch_shape_ablation_table(workspace, tmp_path):
    table = _ablate(workspace, tmp_path, "patch")
    assert list(table["setting"]) == ["128×2", "16×16 (Used)", "32×32"]
    assert list(table["# Patches"]) == ["512", "512", "128"]
    assert list(table["w/ Pretrain"] == "-") == [True, False, True]
    assert not (table["w/o Pretrain"] == "-").any()
    assert 0.0 <= float(table["w/ Pretrain"][1]) <= 1.0


def test_positional_ablation_table(workspace, tmp_path):
    table = _ablate(workspace, tmp_path, "posembed")
    assert list(table["setting"]) == [
        "Reinitialize", "Nearest Neighbor Interpolation", "Bilinear Interpolation (Used)",
    ]
    assert list(table.columns) == ["setting", "mAP"]
    assert all(0.0 <= float(v) <= 1.0 for v in table["mAP"])


def test_pretrain_ablation_table(workspace, tmp_path):
    table = _ablate(workspace, tmp_path, "pretrain")
    assert list(table["setting"]) == ["No Pretrain", "Vision Pretrain (Used)"]
    assert list(table.columns) == ["setting", "mAP"]
    assert all(0.0 <= float(v) <= 1.0 for v in table["mAP"])


class TestExitCodes:
    def test_usage_errors_exit_with_1(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            main(["train", "--preset", "imagenet"])
        assert exc.value.code == 1

    def test_configuration_errors_return_1(self, workspace, tmp_path):
        assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
        assert main(["train", "--config", str(workspace["config"]), "--cache", str(workspace["cache"]),
                     "--patch", "16x16", "--overlap", "20", "--out", str(tmp_path)]) == 1
        assert main(["train", "--config", str(workspace["config"]), "--out", str(tmp_path)]) == 1

    def test_data_errors_return_2(self, workspace, tmp_path):
        wav = workspace["corpus"] / "audio" / "clip_0000.wav"
        assert main(["predict", str(tmp_path / "missing.astc"), str(wav)]) == 2
        bad = tmp_path / "bad.wav"
        bad.write_bytes(b"garbage")
        assert main(["predict", str(workspace["run"] / "averaged.astc"), str(bad)]) == 2

    def test_diverging_training_exits_with_3(self, workspace, tmp_path):
        """An absurd learning rate pushes weights past float32 range; the NaN loss aborts the run."""
        assert NumericError.exit_code == 3
        config = tmp_path / "diverge.json"
        config.write_text(json.dumps({**SMALL_RUN, "train": {**SMALL_RUN["train"], "initial_lr": 1e38}}))
        out = tmp_path / "diverge"
        assert main(["train", "--config", str(config), "--cache", str(workspace["cache"]),
                     "--epochs", "2", "--out", str(out)]) == 3
        assert not (out / "averaged.astc").exists()


def test_eval_after_overfitting_toy_corpus(tmp_path):
    """16 one-second clips, 4 classes: 200 epochs memorise the training set."""
    config = tmp_path / "toy.json"
    config.write_text(json.dumps(TOY_RUN))
    corpus, run, out = tmp_path / "corpus", tmp_path / "run", tmp_path / "eval"
    assert main(["synth", "--out", str(corpus), "--n", "16", "--classes", "4",
                 "--min-seconds", "1.0", "--max-seconds", "1.0", "--eval-fraction", "0"]) == 0
    assert main(["featurize", "--config", str(config), "--manifest", str(corpus / "manifest.csv"),
                 "--labels", str(corpus / "labels.json"), "--out", str(tmp_path)]) == 0
    cache = str(tmp_path / "features.astc")
    assert main(["train", "--config", str(config), "--cache", cache, "--epochs", "200", "--out", str(run)]) == 0
    assert main(["eval", str(run / "epoch_200.astc"), "--config", str(config), "--cache", cache,
                 "--out", str(out)]) == 0
    assert float(_report_value((out / "report.txt").read_text(), "mAP")) >= 0.99
