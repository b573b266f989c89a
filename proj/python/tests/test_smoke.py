import os
import pathlib
import shutil
import tempfile

import numpy as np
import pytest

import waterseg


@pytest.fixture(scope="module")
def scratch():
    root = os.environ.get("WATERSEG_TEST_TMP")
    path = pathlib.Path(root) if root else pathlib.Path(tempfile.mkdtemp(prefix="waterseg_py_"))
    shutil.rmtree(path, ignore_errors=True)
    path.mkdir(parents=True)
    return path


@pytest.fixture(scope="module")
def corpus(scratch):
    return waterseg.synth(str(scratch / "data"), count=12, image_size=32, seed=2)


def test_metrics_worked_example():
    m = waterseg.metrics(3, 1, 1, 11)
    assert m["iou"] == pytest.approx(0.6)
    assert m["oa"] == pytest.approx(0.875)
    assert waterseg.metrics(0, 0, 0, 4)["iou"] is None


def test_confusion_matches_numpy():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 2, (16, 16), dtype=np.uint8)
    gt = rng.integers(0, 2, (16, 16), dtype=np.uint8)
    c = waterseg.confusion(pred, gt)
    assert c["tp"] == int(((pred == 1) & (gt == 1)).sum())
    assert c["fp"] == int(((pred == 1) & (gt == 0)).sum())
    assert c["fn"] == int(((pred == 0) & (gt == 1)).sum())
    with pytest.raises(waterseg.ShapeError):
        waterseg.confusion(pred, gt[:8])


def test_overlay_colours():
    img = np.full((2, 2, 3), 128, np.uint8)
    pred = np.array([[1, 1], [0, 0]], np.uint8)
    gt = np.array([[1, 0], [1, 0]], np.uint8)
    out = waterseg.overlay(img, pred, gt, 0.5)
    assert out[0, 0].tolist() == [64, 64, 191]
    assert out[0, 1].tolist() == [64, 191, 64]
    assert out[1, 0].tolist() == [191, 64, 64]
    assert out[1, 1].tolist() == [128, 128, 128]


def test_scene_and_summary():
    image, mask = waterseg.render_scene(64, 1)
    assert image.shape == (64, 64, 3)
    assert 0.1 <= mask.mean() <= 0.6
    s = waterseg.model_summary("nano", lora=True)
    assert s["trainable"] == 3840
    assert s["total"] == 455777 + 3840


def test_manifest_and_errors(corpus, scratch):
    m = waterseg.manifest(corpus)
    splits = [s["split"] for s in m["samples"]]
    assert len(splits) == 12
    assert set(splits) == {"train", "val", "test"}
    with pytest.raises(waterseg.IoError):
        waterseg.manifest(str(scratch / "missing"))
    with pytest.raises(waterseg.ConfigError):
        waterseg.train({"epochs": 0})


def test_train_evaluate_predict(corpus, scratch):
    record = waterseg.train(
        {"image_size": 32, "data": {"roots": [corpus]}, "epochs": 1, "batch_size": 4, "out": str(scratch / "run")}
    )
    test_iou = record["metrics"]["test"]["iou"]
    again = waterseg.evaluate(record["checkpoints"]["best"], corpus, image_size=32)
    assert again["iou"] == test_iou
    image = next((pathlib.Path(corpus) / "test" / "images").iterdir())
    mask = waterseg.predict(record["checkpoints"]["best"], image, scratch / "pred.png", image_size=32)
    assert mask.shape == (32, 32)
    assert set(np.unique(mask)) <= {0, 1}
