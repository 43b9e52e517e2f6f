"""Label-sweep classification, accuracy/error reporting, the optional softmax
readout on frozen features, and metrics emission."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import seeding
from .data import N_CLASSES, make_batches, overlay_labels
from .errors import ShapeError
from .model import IntFFModel, goodness_total
from .numerics import DenseLayer

EVAL_BATCH = 512


@dataclass
class EvalReport:
    accuracy: float
    error_rate: float
    confusion: np.ndarray          # (10, 10) counts, true label by row
    sample_count: int


def predict_label(model: IntFFModel, pixels) -> int:
    """Label sweep for one image: overlay each candidate label, run the
    model, return the argmax of total goodness (lowest label wins ties)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 1:
        raise ShapeError(f"predict_label expects one flat image, got {pixels.shape}")
    candidates = np.stack([np.asarray(pixels)] * N_CLASSES)
    swept = overlay_labels(candidates, np.arange(N_CLASSES))
    scores = goodness_total(model.forward(swept))
    return int(np.argmax(scores))


def predict_labels(model: IntFFModel, images, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Vectorized label sweep over a batch of images."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    scores = np.empty((N_CLASSES, n), dtype=np.float64)
    for label in range(N_CLASSES):
        for start in range(0, n, batch_size):
            chunk = images[start:start + batch_size]
            swept = overlay_labels(chunk, np.full(chunk.shape[0], label))
            scores[label, start:start + chunk.shape[0]] = goodness_total(model.forward(swept))
    return np.argmax(scores, axis=0)


def predict_labels_bp(model: IntFFModel, images, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Head-argmax prediction for the backprop baseline."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    preds = np.empty(n, dtype=np.int64)
    for start in range(0, n, batch_size):
        logits, _ = model.bp_forward(images[start:start + batch_size])
        preds[start:start + logits.shape[0]] = np.argmax(logits, axis=1)
    return preds


def evaluate(model: IntFFModel, images, labels,
             batch_size: int = EVAL_BATCH) -> EvalReport:
    """Predict the whole set and aggregate accuracy, error, and confusion.

    Models carrying a bp head are scored by head argmax, all others by
    label sweep.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("cannot evaluate an empty set")
    if images.shape[0] != labels.shape[0]:
        raise ShapeError(f"images {images.shape} vs labels {labels.shape}")
    if model.bp_head is not None:
        preds = predict_labels_bp(model, images, batch_size)
    else:
        preds = predict_labels(model, images, batch_size)
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    accuracy = float(np.trace(confusion)) / images.shape[0]
    return EvalReport(accuracy, 1.0 - accuracy, confusion, images.shape[0])


class Readout:
    """Linear softmax classifier over frozen selected-group features."""

    def __init__(self, layer: DenseLayer):
        self.layer = layer

    def predict(self, model: IntFFModel, images, batch_size: int = EVAL_BATCH) -> np.ndarray:
        feats = extract_features(model, images, batch_size)
        logits, _ = self.layer.forward(feats)
        return np.argmax(logits, axis=1)


def extract_features(model: IntFFModel, images, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Concatenate all selected-group activations under the neutral overlay."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    chunks = []
    for start in range(0, n, batch_size):
        trace = model.forward(overlay_labels(images[start:start + batch_size], None))
        chunks.append(np.concatenate([u.group for u in trace.units], axis=1))
    return np.concatenate(chunks, axis=0)


def train_readout(model: IntFFModel, images, labels, epochs: int = 5,
                  lr: float = 1e-3, batch_size: int = 64, seed: int = 0) -> Readout:
    """Fit the readout by cross-entropy with its own one-layer backprop; the
    trained model's parameters are never touched."""
    from .training import Adam  # deferred to avoid a module cycle

    feats = extract_features(model, images)
    labels = np.asarray(labels)
    rng = seeding.stream(seed, seeding.DOMAIN_READOUT)
    layer = DenseLayer.init(feats.shape[1], N_CLASSES, rng, activation="identity")
    optimizer = Adam(layer.params(), lr=lr)
    shuffle_rng = seeding.stream(seed, seeding.DOMAIN_READOUT + 100)
    for _ in range(epochs):
        for idx in make_batches(feats.shape[0], batch_size, shuffle_rng):
            x, y = feats[idx], labels[idx]
            logits, cache = layer.forward(x)
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            dlogits = np.exp(logp)
            dlogits[np.arange(len(idx)), y] -= 1.0
            dlogits /= len(idx)
            dW, db, _ = layer.backward(dlogits, cache)
            optimizer.step([dW, db])
    return Readout(layer)


def report_csv_text(report: EvalReport) -> str:
    """metric,value rows plus a confusion block (10 rows of 10 counts)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value"])
    writer.writerow(["accuracy", repr(report.accuracy)])
    writer.writerow(["error_rate", repr(report.error_rate)])
    writer.writerow(["sample_count", report.sample_count])
    buf.write("# confusion\n")
    for row in report.confusion:
        writer.writerow([int(v) for v in row])
    return buf.getvalue()


def parse_report_csv(path) -> EvalReport:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    header, *rest = lines
    if header != "metric,value":
        raise ValueError(f"unexpected report header {header!r}")
    metrics = {}
    confusion = []
    in_confusion = False
    for line in rest:
        if line == "# confusion":
            in_confusion = True
            continue
        if in_confusion:
            confusion.append([int(v) for v in line.split(",")])
        else:
            key, value = line.split(",", 1)
            metrics[key] = value
    return EvalReport(float(metrics["accuracy"]), float(metrics["error_rate"]),
                      np.asarray(confusion, dtype=np.int64), int(metrics["sample_count"]))


def emit_metrics_csv(obj, path):
    """Write a MetricsLog or EvalReport to CSV deterministically."""
    if isinstance(obj, EvalReport):
        text = report_csv_text(obj)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        obj.write_csv(path)
