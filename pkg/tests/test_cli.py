import csv
import json
import os
import shutil

import numpy as np
import pytest

from fairfader import cli, data, nets
from fairfader.data import SampleRecord

TINY = {
    "synth": {"n_samples": 600, "image_size": 16},
    "arch": {"input_size": 16, "depth": 2, "base_channels": 4, "dis_hidden": 8,
             "clf_channels": [8, 8, 4, 4]},
    "split": {"n_test_per_race": 3, "val_fraction": 0.1},
    "fader": {"lambda_e": 0.05, "eta": 0.05, "epochs": 1, "eval_every": 4},
    "ae": {"lambda_e": 0.0, "eta": 0.05, "epochs": 1, "eval_every": 4},
    "clf": {"eta": 0.05, "epochs": 1},
    "probe": {"eta": 0.05, "epochs": 1},
}


def write_config(path, **override):
    cfg = json.loads(json.dumps(TINY))
    for sec, vals in override.items():
        if isinstance(vals, dict):
            cfg.setdefault(sec, {}).update(vals)
        else:
            cfg[sec] = vals
    path.write_text(json.dumps(cfg))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Config, a synthetic dataset and one finished fader run."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    assert run("gen-synth", "--config", cfg, "--out", root / "data") == 0
    assert run("train-fader", root / "data", "--config", cfg, "--out", root / "fader") == 0
    assert run("train-ae", root / "data", "--config", cfg, "--out", root / "ae") == 0
    return root, cfg


# gen-synth


def test_gen_synth_writes_every_sample(ws):
    root, _ = ws
    files = [f for f in os.listdir(root / "data") if f.endswith(".f32")]
    assert len(files) == 600
    assert len(json.loads((root / "data" / "manifest.json").read_text())) == 600


def test_gen_synth_is_deterministic(ws, tmp_path):
    root, cfg = ws
    assert run("gen-synth", "--config", cfg, "--out", tmp_path / "again") == 0
    a, b = root / "data", tmp_path / "again"
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert (a / "run.json").read_bytes() == (b / "run.json").read_bytes()
    assert data.manifest_hash(data.read_synthetic(a)) == data.manifest_hash(data.read_synthetic(b))


def test_seed_flag_overrides_config(ws, tmp_path):
    _, cfg = ws
    assert run("gen-synth", "--config", cfg, "--seed", 9, "--out", tmp_path / "s9") == 0
    saved = json.loads((tmp_path / "s9" / "config.json").read_text())
    assert saved["seed"] == 9


def test_invalid_fractions_exit_2_naming_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", synth={"class_fractions": [0.5, 0.5, 0.0, 0.0, 0.0]})
    assert run("gen-synth", "--config", cfg, "--out", tmp_path / "d") == 2
    assert "synth.class_fractions" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_unknown_config_key_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", fader={"lamda_e": 0.1})
    assert run("gen-synth", "--config", cfg, "--out", tmp_path / "d") == 2
    assert "fader.lamda_e: unknown key" in capsys.readouterr().err


def test_wrongly_typed_config_value_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", ae={"epochs": "ten"})
    assert run("gen-synth", "--config", cfg, "--out", tmp_path / "d") == 2
    assert "ae.epochs" in capsys.readouterr().err


def test_bad_arguments_exit_2(tmp_path):
    assert run("train-fader") == 2
    assert run("no-such-command") == 2


def test_bad_thread_setting_exit_2(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FAIRFADER_THREADS", "zero")
    cfg = write_config(tmp_path / "c.json")
    assert run("gen-synth", "--config", cfg, "--out", tmp_path / "d") == 2
    assert "FAIRFADER_THREADS" in capsys.readouterr().err


def test_thread_setting_does_not_change_results(ws, tmp_path, monkeypatch):
    root, cfg = ws
    monkeypatch.setenv("FAIRFADER_THREADS", "2")
    assert run("train-ae", root / "data", "--config", cfg, "--out", tmp_path / "ae") == 0
    assert (tmp_path / "ae" / "run.json").read_bytes() == (root / "ae" / "run.json").read_bytes()


# train-fader / train-ae


def test_fader_run_artifacts(ws):
    root, _ = ws
    run_dir = root / "fader"
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["kind"] == "fader" and manifest["checkpoints"]
    sel = json.loads((run_dir / "selected.json").read_text())
    assert "dis_val_acc" in sel["metrics"] and "val_l_ae" in sel["metrics"]
    assert sel in manifest["checkpoints"]
    assert set(sel["files"]) == {"encoder", "decoder", "discriminator"}
    for rel in sel["files"].values():
        nets.load_model(run_dir / rel)
    rows = read_csv(run_dir / "losses.csv")
    assert list(rows[0]) == ["step", "l_ae", "l_dis", "l_adv", "l_total", "dis_val_acc"]
    stamp = json.loads((run_dir / "run.json").read_text())
    assert stamp["command"] == "train-fader"
    assert all(len(h) == 64 for h in stamp["artifacts"].values())


def test_zero_lambda_fader_matches_conditioned_ae(ws, tmp_path):
    root, _ = ws
    cfg = write_config(tmp_path / "c.json", fader={"lambda_e": 0.0})
    assert run("train-fader", root / "data", "--config", cfg, "--out", tmp_path / "f0") == 0
    assert run("train-ae", root / "data", "--conditioned", "--config", cfg, "--out", tmp_path / "ae") == 0
    fader = [r["l_ae"] for r in read_csv(tmp_path / "f0" / "losses.csv")]
    ae = [r["l_ae"] for r in read_csv(tmp_path / "ae" / "losses.csv")]
    assert len(fader) > 5 and fader == ae


def test_resume_continues_without_step_gaps(ws, tmp_path):
    root, cfg = ws
    full = root / "fader"
    crashed = tmp_path / "crashed"
    shutil.copytree(full, crashed)
    # state after a crash shortly past the second checkpoint
    manifest = json.loads((crashed / "manifest.json").read_text())
    keep = manifest["checkpoints"][:2]
    manifest["checkpoints"] = keep
    (crashed / "manifest.json").write_text(json.dumps(manifest))
    lines = (crashed / "losses.csv").read_text().splitlines(keepends=True)
    (crashed / "losses.csv").write_text("".join(lines[: keep[-1]["step"] + 3]))
    (crashed / "selected.json").unlink()

    assert run("train-fader", root / "data", "--resume", "--config", cfg, "--out", crashed) == 0
    steps = [int(r["step"]) for r in read_csv(crashed / "losses.csv")]
    assert steps == list(range(1, len(steps) + 1))
    assert (crashed / "losses.csv").read_bytes() == (full / "losses.csv").read_bytes()
    assert (crashed / "selected.json").read_bytes() == (full / "selected.json").read_bytes()


def test_resume_refuses_a_different_config(ws, tmp_path):
    root, _ = ws
    shutil.copytree(root / "fader", tmp_path / "run")
    cfg = write_config(tmp_path / "c.json", fader={"eta": 0.01})
    assert run("train-fader", root / "data", "--resume", "--config", cfg, "--out", tmp_path / "run") == 2


def test_training_failure_exit_1_keeps_partial_artifacts(ws, tmp_path, monkeypatch, capsys):
    root, cfg = ws
    real, calls = nets.save_model, []

    def flaky_save(model, path):
        calls.append(path)
        if len(calls) > 2:
            raise OSError(28, "No space left on device")
        real(model, path)

    monkeypatch.setattr(nets, "save_model", flaky_save)
    out = tmp_path / "boom"
    assert run("train-ae", root / "data", "--config", cfg, "--out", out) == 1
    assert "No space left" in capsys.readouterr().err
    assert (out / "config.json").exists() and (out / "losses.csv").exists()
    assert len(json.loads((out / "manifest.json").read_text())["checkpoints"]) == 1
    assert not (out / "selected.json").exists()


def test_missing_dataset_exit_2(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert run("train-ae", tmp_path / "nothing", "--config", cfg, "--out", tmp_path / "o") == 2


# train-clf


def test_classifier_from_fader_encoder(ws, tmp_path):
    root, cfg = ws
    out = tmp_path / "clf"
    assert run("train-clf", root / "data", root / "fader", "--config", cfg, "--out", out) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["model_id"] == "FaderCNN" and m["encoder_kind"] == "fader" and m["weighted"] is False
    clf = nets.load_model(out / "classifier.ffm")
    assert isinstance(clf, nets.Classifier)
    assert nets.model_bytes(clf) == (out / "classifier.ffm").read_bytes()


def test_weighted_classifier_logs_weights(ws, tmp_path, caplog):
    root, cfg = ws
    out = tmp_path / "wl"
    with caplog.at_level("INFO", logger="fairfader"):
        assert run("train-clf", root / "data", root / "ae", "--weighted", "--config", cfg, "--out", out) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["model_id"] == "SimpleCNN-WL"
    w = np.array(m["class_weights"])
    assert w.mean() == pytest.approx(1.0, abs=1e-12)
    # the rarest race gets the largest weight
    split = json.loads((out / "split.json").read_text())
    assert split
    assert any("class weights" in r.getMessage() for r in caplog.records)
    logged = next(r.getMessage() for r in caplog.records if "class weights" in r.getMessage())
    np.testing.assert_allclose([float(v) for v in logged.split(":")[1].split()], w, atol=1e-4)


def test_missing_encoder_exit_2(ws, tmp_path, capsys):
    root, cfg = ws
    assert run("train-clf", root / "data", tmp_path / "nope.ffm", "--config", cfg, "--out", tmp_path / "c") == 2
    assert "encoder" in capsys.readouterr().err


def balanced_dataset(directory, per_race=12, size=16):
    rng = np.random.default_rng(0)
    recs = [SampleRecord(rng.uniform(-1, 1, (1, size, size)).astype(np.float32), i % 2, (i // 2) % 5, None,
                         f"u{i:04d}") for i in range(10 * per_race)]
    data.write_synthetic(recs, directory)


def test_weighted_equals_unweighted_on_uniform_data(ws, tmp_path):
    root, _ = ws
    balanced_dataset(tmp_path / "uniform")
    cfg = write_config(tmp_path / "c.json", split={"n_test_per_race": 4, "val_fraction": 0.0})
    args = ("train-clf", tmp_path / "uniform", root / "ae", "--config", cfg)
    assert run(*args, "--out", tmp_path / "plain") == 0
    assert run(*args, "--weighted", "--out", tmp_path / "weighted") == 0
    assert json.loads((tmp_path / "weighted" / "metrics.json").read_text())["class_weights"] == [1.0] * 5
    a, b = tmp_path / "plain", tmp_path / "weighted"
    assert (a / "classifier.ffm").read_bytes() == (b / "classifier.ffm").read_bytes()
    assert (a / "clf_losses.csv").read_bytes() == (b / "clf_losses.csv").read_bytes()


# eval


@pytest.fixture(scope="module")
def clf_dir(ws):
    root, cfg = ws
    out = root / "clf_ae"
    assert run("train-clf", root / "data", root / "ae", "--config", cfg, "--out", out) == 0
    return out


def test_eval_report(ws, clf_dir, tmp_path, capsys):
    root, cfg = ws
    out = tmp_path / "ev"
    assert run("eval", root / "data", clf_dir, root / "ae", "--config", cfg, "--out", out) == 0
    printed = json.loads(capsys.readouterr().out)
    rep = json.loads((out / "report.json").read_text())
    assert printed == rep
    assert rep["model_id"] == "SimpleCNN"
    assert rep["counts"] == [3] * 5
    assert rep["raw"]["overall_accuracy"] == pytest.approx(np.mean(rep["raw"]["per_class_accuracy"]), abs=1e-9)
    rows = read_csv(out / "predictions.csv")
    assert len(rows) == 15


def test_eval_rerun_is_byte_identical(ws, clf_dir, tmp_path):
    root, cfg = ws
    for name in ("a", "b"):
        assert run("eval", root / "data", clf_dir, root / "ae", "--config", cfg, "--out", tmp_path / name) == 0
    for f in ("report.json", "predictions.csv", "run.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_shape_mismatch_prints_both_specs(ws, clf_dir, tmp_path, capsys):
    root, _ = ws
    cfg = write_config(tmp_path / "c.json", arch={"base_channels": 2})
    assert run("train-ae", root / "data", "--config", cfg, "--out", tmp_path / "narrow") == 0
    capsys.readouterr()
    assert run("eval", root / "data", clf_dir, tmp_path / "narrow", "--config", cfg, "--out", tmp_path / "e") == 2
    err = capsys.readouterr().err
    assert "encoder ArchSpec" in err and "classifier ArchSpec" in err
    assert "base_channels" in err


def test_retraining_reproduces_snapshots(ws, tmp_path):
    root, cfg = ws
    assert run("train-fader", root / "data", "--config", cfg, "--out", tmp_path / "f") == 0
    for f in ("run.json", "losses.csv", "selected.json"):
        assert (tmp_path / "f" / f).read_bytes() == (root / "fader" / f).read_bytes()


# grad-check and the full pipeline


def test_grad_check_command(capsys):
    assert run("grad-check", "--instances", 2) == 0
    out = capsys.readouterr().out
    assert "PASS conv2d" in out and "ops passed" in out


def test_run_experiment(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert run("run-experiment", "--config", cfg, "--out", tmp_path / "x") == 0
    summary = json.loads((tmp_path / "x" / "summary.json").read_text())
    assert set(summary["reports"]) == {"SimpleCNN", "SimpleCNN-WL", "FaderCNN"}
    assert set(summary["probe_dis_val_acc"]) == {"ae", "fader"}
    assert "dis_val_acc" in summary["fader_selected"]
    out = capsys.readouterr().out
    assert "FaderCNN" in out and "variance" in out
