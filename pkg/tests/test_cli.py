import json

import pytest

from geofake import cli
from geofake.ingest import DatasetManifest
from geofake.models import CHECKPOINT_WEIGHTS, ModelSpec, build, save_checkpoint
from geofake.trainer import read_metrics


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--n-per-class", "100", "--seed", "4", "--out", str(out)]) == 0
    return out


def _train(out, manifest, *extra):
    return cli.main(["train", "--manifest", str(manifest), "--epochs", "3", "--out", str(out), *extra])


def test_synth_writes_manifest_and_config(synth_dir):
    manifest = DatasetManifest.load(synth_dir / "manifest.json")
    assert len(manifest.records) == 200
    resolved = json.loads((synth_dir / "config.resolved.json").read_text())
    assert resolved["command"] == "synth" and resolved["n_per_class"] == 100 and resolved["seed"] == 4


def test_prepare_on_synth_tree(tmp_path, synth_dir):
    assert cli.main(["prepare", "--root", str(synth_dir), "--out", str(tmp_path)]) == 0
    manifest = DatasetManifest.load(tmp_path / "manifest.json")
    assert len(manifest.records) == 200
    assert {r.label for r in manifest.records} == {0, 1}


def test_train_eval_explain_report(tmp_path, synth_dir):
    run = tmp_path / "run"
    assert _train(run, synth_dir / "manifest.json") == 0
    assert len(read_metrics(run / "cnn" / "metrics.jsonl")) == 6
    assert (run / "cnn" / "best").is_dir() and (run / "cnn" / "latest").is_dir()

    assert cli.main(["eval", "--checkpoint", str(run / "cnn"), "--manifest", str(synth_dir / "manifest.json"),
                     "--out", str(tmp_path / "eval")]) == 0
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert sum(map(sum, report["confusion"])) == len(DatasetManifest.load(synth_dir / "manifest.json").subset("test"))

    assert cli.main(["explain", "--checkpoint", str(run / "cnn" / "best"), "--manifest",
                     str(synth_dir / "manifest.json"), "--method", "gradcam", "--n-correct", "2",
                     "--n-wrong", "1", "--out", str(tmp_path / "gallery")]) == 0
    assert json.loads((tmp_path / "gallery" / "index.json").read_text())["samples"]

    assert cli.main(["report", "--run-dir", str(run)]) == 0
    assert (run / "curves.png").is_file() and "best val acc" in (run / "summary.md").read_text()


def test_train_repeatable_and_resumable(tmp_path, synth_dir):
    manifest = synth_dir / "manifest.json"
    assert _train(tmp_path / "a", manifest) == 0
    assert _train(tmp_path / "b", manifest) == 0
    text = (tmp_path / "a" / "cnn" / "metrics.jsonl").read_text()
    assert (tmp_path / "b" / "cnn" / "metrics.jsonl").read_text() == text

    assert cli.main(["train", "--manifest", str(manifest), "--epochs", "1", "--out", str(tmp_path / "c")]) == 0
    assert _train(tmp_path / "c", manifest, "--resume") == 0
    assert (tmp_path / "c" / "cnn" / "metrics.jsonl").read_text() == text


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_per_class": 10, "size": 128, "seed": 1}))
    assert cli.main(["synth", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "o")]) == 0
    resolved = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
    assert (resolved["n_per_class"], resolved["size"], resolved["seed"]) == (10, 128, 2)


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_INVALID
    assert cli.main(["train", "--out", str(tmp_path / "y")]) == cli.EXIT_INVALID  # manifest missing
    assert cli.main(["report", "--run-dir", str(tmp_path / "empty")]) == cli.EXIT_INVALID
    (tmp_path / "empty").mkdir(exist_ok=True)
    (tmp_path / "empty" / "metrics.jsonl").write_text("")
    assert cli.main(["report", "--run-dir", str(tmp_path / "empty")]) == cli.EXIT_INVALID

    ckpt = save_checkpoint(build(ModelSpec()), tmp_path / "ckpt", epoch=1, best_val_accuracy=0.5, seed=0)
    (ckpt / CHECKPOINT_WEIGHTS).write_bytes(b"truncated weights")  # readable metadata, corrupt payload
    assert cli.main(["synth", "--n-per-class", "10", "--out", str(tmp_path)]) == 0
    code = cli.main(["eval", "--checkpoint", str(ckpt), "--manifest", str(tmp_path / "manifest.json"),
                     "--out", str(tmp_path / "e")])
    assert code == cli.EXIT_RUNTIME
