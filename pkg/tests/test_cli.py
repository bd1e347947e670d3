import json
import subprocess
import sys

import pytest
from PIL import Image

from vmrn import gradsuite
from vmrn.cli import main
from vmrn.dataio import SynthConfig, gen_synthetic_scene, load_corpus, save_png
from vmrn.detector import Detection
from vmrn.evaluation import DumpError, read_dump
from vmrn.model import VMRN

TINY = "widths = 4,8,8\nchannels = 8\nhidden = 16\nbatch_size = 4\npretrain_iters = 200\nmax_iters = 500\niters_per_epoch = 200\n"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--count", "10", "--seed", "3", "--out", str(root / "data")]) == 0
    (root / "tiny.txt").write_text(TINY)
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "tiny.txt"), "--out", str(root / "run")]) == 0
    return root


def test_synth_writes_corpus(trained, capsys):
    corpus = load_corpus(trained / "data")
    assert len(corpus.scenes) == 10
    assert (trained / "data" / "images" / "000009.png").exists()


def test_train_outputs(trained):
    for name in ("model.vmrn", "config.txt", "history.csv", "metrics.json"):
        assert (trained / "run" / name).exists()
    assert "hidden = 16" in (trained / "run" / "config.txt").read_text()


def test_eval_all_prints_report(trained, capsys, tmp_path):
    dump = tmp_path / "dump.jsonl"
    assert main(["eval", "--model", str(trained / "run"), "--data", str(trained / "data"), "--dump", str(dump)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"rel_accuracy", "obj_recall", "obj_precision", "img_accuracy", "map", "counts"}
    assert all(0.0 <= report[k] <= 1.0 for k in report if k != "counts")
    det_rows, rel_rows = read_dump(dump)
    assert all(r["image_id"] for r in det_rows + rel_rows)


def test_eval_single_metric_and_split(trained, capsys):
    args = ["eval", "--model", str(trained / "run" / "model.vmrn"), "--data", str(trained / "data")]
    assert main(args + ["--metric", "rel", "--split", "test"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert list(out) == ["rel_accuracy"]
    assert main(args + ["--metric", "obj"]) == 0
    assert list(json.loads(capsys.readouterr().out)) == ["obj_recall", "obj_precision"]


def two_object_image(tmp_path):
    cfg = SynthConfig(seed=0, min_objects=2, max_objects=2, stack_prob=1.0)
    k = next(k for k in range(100) if len(gen_synthetic_scene(cfg, k)[1].objects) == 2)
    image, scene = gen_synthetic_scene(cfg, k)
    path = tmp_path / "two.png"
    save_png(image, path)
    return path, scene


def test_predict_two_objects(trained, tmp_path, monkeypatch, capsys):
    path, scene = two_object_image(tmp_path)
    gt = [Detection(o.bbox, 0, (0.9,) + (0.01,) * 9) for o in scene.objects]
    # the tiny model cannot detect yet, so detection is fixed to the ground truth
    monkeypatch.setattr(VMRN, "detect", lambda self, feats, ranked=False: [list(gt)])
    out = tmp_path / "p.json"
    rc = main(
        [
            "predict",
            "--model", str(trained / "run"),
            "--image", str(path),
            "--out-json", str(out),
            "--out-dot", str(tmp_path / "p.dot"),
            "--out-png", str(tmp_path / "p.png"),
        ]
    )
    assert rc == 0
    doc = json.loads(out.read_text())
    assert len(doc["detections"]) == 2
    assert [(r["subj_idx"], r["obj_idx"]) for r in doc["relations"]] == [(0, 1), (1, 0)]
    assert len(doc["edges"]) <= 1
    dot = (tmp_path / "p.dot").read_text()
    assert dot.startswith("digraph") and dot.count("->") <= 1
    with Image.open(tmp_path / "p.png") as im:
        assert im.size == (256, 256)


def test_predict_rejects_wrong_size(trained, tmp_path):
    img = tmp_path / "small.png"
    Image.new("RGB", (32, 32)).save(img)
    assert main(["predict", "--model", str(trained / "run"), "--image", str(img), "--out-json", str(tmp_path / "x.json")]) == 1


def test_gradcheck_single_layer(capsys):
    assert main(["gradcheck", "--layer", "relu", "--seeds", "3"]) == 0
    assert "relu" in capsys.readouterr().out


def test_gradcheck_fails_above_threshold(monkeypatch, capsys):
    monkeypatch.setattr(gradsuite, "THRESHOLD", 0.0)
    assert main(["gradcheck", "--layer", "linear", "--seeds", "2"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_unknown_layer():
    assert main(["gradcheck", "--layer", "nope"]) == 1


def test_missing_data_is_io_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2


def test_bad_config_is_validation_error(trained, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("mu = 3\n")
    assert main(["train", "--data", str(trained / "data"), "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_corrupt_model_is_validation_error(trained, tmp_path):
    bad = tmp_path / "model.vmrn"
    bad.write_bytes(b"VMRNgarbage")
    assert main(["eval", "--model", str(bad), "--data", str(trained / "data")]) == 1


def test_read_dump_reports_bad_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"image_id": "a", "cls": 0, "conf": 0.5, "bbox": [0, 0, 1, 1]}\n{"image_id": "a"}\n')
    with pytest.raises(DumpError, match=":2:"):
        read_dump(p)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "vmrn", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "train", "eval", "predict", "gradcheck"):
        assert cmd in out.stdout
