import json

import numpy as np
import pytest

import dcgn.layers
from dcgn.cli import main
from dcgn.data_io import ManifestEntry, write_features, write_manifest

SYNTH = {"num_classes": 4, "dim": 8, "shots_per_video": [1, 3], "frames_per_shot": [4, 6],
         "noise_std": 0.2, "seed": 3}
TRAIN = {"epochs": 2, "layers": 3, "filter_size": 8, "shots_m": 4, "batch_size": 4,
         "base_lr": 0.01}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    lines = [l for l in out.splitlines() if l.strip()]
    return code, (json.loads(lines[-1]) if lines else None), err


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def corpus(tmp_path, capsys):
    cfg = write_json(tmp_path / "cfg.json",
                     {"synth": SYNTH, "train": TRAIN, "model": {"num_classes": 4}})
    code, res, _ = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "data",
                       "--count", 16, "--val-count", 6)
    assert code == 0
    return cfg, res["manifest"], res["val_manifest"]


def test_synth_writes_manifest_and_resolved_config(corpus, tmp_path):
    _, manifest, val = corpus
    assert len((tmp_path / "data" / "manifest.jsonl").read_text().splitlines()) == 16
    assert len((tmp_path / "data" / "val.jsonl").read_text().splitlines()) == 6
    resolved = json.loads((tmp_path / "data" / "resolved_config.json").read_text())
    assert resolved["synth"]["noise_std"] == 0.2
    assert resolved["synth"]["prototypes_per_class"] == 1


def test_synth_missing_dim_names_field(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"synth": {"num_classes": 4}})
    code, _, err = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "o", "--count", 2)
    assert code == 2 and "synth.dim" in err


def test_unknown_keys_rejected(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"train": {"epochz": 3}})
    code, _, err = run(capsys, "gradcheck", "--config", cfg)
    assert code == 2 and "train.epochz" in err
    cfg = write_json(tmp_path / "d.json", {"extra": {}})
    assert run(capsys, "gradcheck", "--config", cfg)[0] == 2


def test_train_then_eval(corpus, tmp_path, capsys):
    cfg, manifest, val = corpus
    code, res, _ = run(capsys, "train", "--config", cfg, "--train", manifest, "--val", val,
                       "--out", tmp_path / "run")
    assert code == 0
    assert [r["epoch"] for r in res["reports"]] == [1, 2]
    assert (tmp_path / "run" / "resolved_config.json").exists()
    code, rep, err = run(capsys, "eval", "--checkpoint", res["checkpoint"], "--manifest", val)
    assert code == 0
    assert rep["gap"] == res["reports"][-1]["gap"]
    assert "resolved config" in err

    # rerunning gives identical reports
    code, again, _ = run(capsys, "train", "--config", cfg, "--train", manifest, "--val", val,
                         "--out", tmp_path / "run2")
    assert again["reports"] == res["reports"]


def test_train_five_epochs_reports(corpus, tmp_path, capsys):
    cfg, manifest, val = corpus
    raw = json.loads(cfg.read_text())
    raw["train"]["epochs"] = 5
    cfg5 = write_json(tmp_path / "c5.json", raw)
    code, res, _ = run(capsys, "train", "--config", cfg5, "--train", manifest, "--val", val,
                       "--out", tmp_path / "r5")
    assert code == 0 and len(res["reports"]) == 5
    assert len((tmp_path / "r5" / "epochs.jsonl").read_text().splitlines()) == 5


def test_eval_width_mismatch(corpus, tmp_path, capsys):
    cfg, manifest, val = corpus
    raw = json.loads(cfg.read_text())
    raw["train"]["epochs"] = 1
    cfg1 = write_json(tmp_path / "c1.json", raw)
    _, res, _ = run(capsys, "train", "--config", cfg1, "--train", manifest, "--val", val,
                    "--out", tmp_path / "run")
    write_features(tmp_path / "wide.dcgn", np.zeros((12, 64)))
    write_manifest(tmp_path / "wide.jsonl", [ManifestEntry("w", tmp_path / "wide.dcgn", (0,))])
    code, _, err = run(capsys, "eval", "--checkpoint", res["checkpoint"],
                       "--manifest", tmp_path / "wide.jsonl")
    assert code == 6 and "64" in err


def test_eval_missing_checkpoint(tmp_path, capsys):
    write_manifest(tmp_path / "m.jsonl", [])
    code, _, _ = run(capsys, "eval", "--checkpoint", tmp_path / "nope.dcgm",
                     "--manifest", tmp_path / "m.jsonl")
    assert code == 6


def test_train_empty_manifest(corpus, tmp_path, capsys):
    cfg, _, val = corpus
    (tmp_path / "empty.jsonl").write_text("")
    code, _, _ = run(capsys, "train", "--config", cfg, "--train", tmp_path / "empty.jsonl",
                     "--val", val, "--out", tmp_path / "o")
    assert code == 2


def test_train_missing_manifest_is_io_error(corpus, tmp_path, capsys):
    cfg, _, val = corpus
    code, _, _ = run(capsys, "train", "--config", cfg, "--train", tmp_path / "nope.jsonl",
                     "--val", val, "--out", tmp_path / "o")
    assert code == 3


def test_segment_two_blocks(tmp_path, capsys):
    a, b = np.eye(3)[0], np.eye(3)[1]
    write_features(tmp_path / "f.dcgn", np.vstack([np.tile(a, (5, 1)), np.tile(b, (7, 1))]))
    code, res, _ = run(capsys, "segment", "--features", tmp_path / "f.dcgn", "--m", 2,
                       "--resolved-config", tmp_path / "r.json")
    assert code == 0
    assert res["cuts"] == [5] and res["cost"] == 0.0 and res["m"] == 2
    assert (tmp_path / "r.json").exists()
    code, res, _ = run(capsys, "segment", "--features", tmp_path / "f.dcgn", "--auto",
                       "--dump-similarity", tmp_path / "s.txt")
    assert code == 0 and res["cuts"] == [5]
    assert np.loadtxt(tmp_path / "s.txt").shape == (12, 12)


def test_segment_errors(tmp_path, capsys):
    write_features(tmp_path / "f.dcgn", np.ones((4, 2)))
    assert run(capsys, "segment", "--features", tmp_path / "f.dcgn", "--m", 5)[0] == 2
    assert run(capsys, "segment", "--features", tmp_path / "f.dcgn", "--m", 0)[0] == 2
    assert run(capsys, "segment", "--features", tmp_path / "missing.dcgn", "--m", 1)[0] == 3
    (tmp_path / "bad.dcgn").write_bytes(b"DCGX" + b"\0" * 12)
    code, _, err = run(capsys, "segment", "--features", tmp_path / "bad.dcgn", "--m", 1)
    assert code == 4 and "offset 0" in err


def test_segment_auto_constant_video(tmp_path, capsys):
    write_features(tmp_path / "c.dcgn", np.tile([0.3, -1.0, 2.0], (20, 1)))
    code, res, _ = run(capsys, "segment", "--features", tmp_path / "c.dcgn", "--auto")
    assert code == 0 and res["m"] == 1 and res["cuts"] == []


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradcheck_passes(capsys, seed):
    code, res, _ = run(capsys, "gradcheck", "--seed", seed)
    assert code == 0 and res["passed"] and res["failures"] == []


def test_gradcheck_catches_broken_backward(capsys, monkeypatch):
    real = dcgn.layers.convolve_backward

    def broken(h, idx, w, g):
        gh, gw = real(h, idx, w, g)
        return gh, gw * 1.5

    monkeypatch.setattr(dcgn.layers, "convolve_backward", broken)
    code, res, err = run(capsys, "gradcheck")
    assert code == 1 and not res["passed"]
    assert res["failures"] == ["layer1.w_conv", "layer2.w_conv"]
    assert "FAIL" in err and "layer1.w_conv" in err
