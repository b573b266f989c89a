"""SegFormer water segmentation: Python front end over the C++ core."""

import json as _json
import os as _os

from ._waterseg import (
    ConfigError,
    DivergenceError,
    IoError,
    ShapeError,
    StateError,
    ValidationError,
    WatersegError,
    confusion,
    model_summary as _model_summary,
    overlay,
    render_scene,
    synth,
)
from . import _waterseg as _core

__all__ = [
    "ConfigError",
    "DivergenceError",
    "IoError",
    "ShapeError",
    "StateError",
    "ValidationError",
    "WatersegError",
    "confusion",
    "evaluate",
    "experiment",
    "manifest",
    "metrics",
    "model_summary",
    "overlay",
    "predict",
    "render_scene",
    "synth",
    "train",
]


def _data(data):
    # a bare path or list of paths is shorthand for {"roots": [...]}
    if isinstance(data, (str, _os.PathLike)):
        data = {"roots": [_os.fspath(data)]}
    elif isinstance(data, (list, tuple)):
        data = {"roots": [_os.fspath(p) for p in data]}
    return _json.dumps(data)


def manifest(data):
    """Load, merge, dedup and subset dataset roots; returns the manifest dict."""
    return _json.loads(_core.prepare_manifest_json(_data(data)))


def metrics(tp, fp, fn, tn):
    """OA, precision, recall, F1 and IoU from pixel counts (None when undefined)."""
    return _json.loads(_core.metrics_json(tp, fp, fn, tn))


def train(config):
    """Train from a run-config dict; returns the run record."""
    return _json.loads(_core.train_json(_json.dumps(config)))


def evaluate(checkpoint, data, split="test", image_size=64, threshold=0.5, averaging="micro"):
    return _json.loads(
        _core.evaluate_json(_os.fspath(checkpoint), _data(data), split, image_size, threshold, averaging)
    )


def predict(checkpoint, image, out_png, image_size=64, threshold=0.5):
    """Writes a 0/255 PNG and returns the 0/1 mask as an array."""
    return _core.predict(_os.fspath(checkpoint), _os.fspath(image), _os.fspath(out_png), image_size, threshold)


def experiment(config):
    return _json.loads(_core.experiment_json(_json.dumps(config)))


def model_summary(model="nano", lora=False, seed=0):
    return _model_summary(_json.dumps(model), lora, seed)
