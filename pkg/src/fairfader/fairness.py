"""Race-stratified evaluation and the accuracy-variance bias measure."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor, no_grad


@dataclass
class PredictionRecord:
    source_id: str
    predicted_gender: int
    true_gender: int
    race: int


@dataclass
class EvalReport:
    per_class_accuracy: list
    overall_accuracy: float
    variance: float
    counts: list
    model_id: str = ""

    @classmethod
    def from_predictions(cls, preds, K, model_id=""):
        per_class, overall = stratified_accuracy(preds, K)
        counts = np.bincount([p.race for p in preds], minlength=K).tolist()
        return cls(per_class, overall, accuracy_variance(per_class), counts, model_id)

    @classmethod
    def from_accuracies(cls, per_class, counts=None, model_id=""):
        per_class = [float(a) for a in per_class]
        counts = list(counts) if counts is not None else [1] * len(per_class)
        overall = float(np.dot(per_class, counts) / np.sum(counts))
        return cls(per_class, overall, accuracy_variance(per_class), counts, model_id)


def stratified_accuracy(preds, K):
    """Percent correct per race class and over all predictions."""
    correct = np.zeros(K)
    counts = np.zeros(K, dtype=np.int64)
    for p in preds:
        if not 0 <= p.race < K:
            raise ValueError(f"race {p.race} out of range [0, {K})")
        counts[p.race] += 1
        correct[p.race] += p.predicted_gender == p.true_gender
    for k in range(K):
        if counts[k] == 0:
            raise ValueError(f"race class {k} has no predictions")
    per_class = (100.0 * correct / counts).tolist()
    overall = 100.0 * correct.sum() / counts.sum()
    return per_class, float(overall)


def accuracy_variance(per_class):
    """Unbiased sample variance (denominator K - 1) of per-class accuracies."""
    a = np.asarray(per_class, dtype=np.float64)
    if a.ndim != 1 or a.size < 2:
        raise ValueError(f"need at least 2 class accuracies, got {a.size}")
    return float(np.var(a, ddof=1))


def balanced_accuracy(pred, labels, K):
    """Mean per-class recall in percent, over the classes present."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    recalls = [np.mean(pred[labels == k] == k) for k in range(K) if np.any(labels == k)]
    return 100.0 * float(np.mean(recalls))


def discriminator_accuracy(dis, latents, labels, balanced=False, batch_size=256):
    """Percent of latents whose argmax attribute (eval mode) matches the label.

    With ``balanced`` the mean per-class recall is returned instead, which is
    the plain accuracy of a class-balanced set.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("discriminator_accuracy needs a nonempty set")
    pred = predict(dis.logits, latents, batch_size)
    if balanced:
        return balanced_accuracy(pred, labels, dis.spec.num_attrs)
    return 100.0 * float(np.mean(pred == labels))


def predict(forward, latents, batch_size=256):
    """Argmax class of ``forward(z, "eval")`` over ``latents`` in batches.

    Ties resolve to the lower class index.
    """
    out = []
    with no_grad():
        for i in range(0, len(latents), batch_size):
            logits = forward(Tensor(latents[i : i + batch_size]), "eval")
            out.append(np.argmax(F.softmax(logits), axis=1))
    return np.concatenate(out)


def _rounded(v):
    return round(float(v), 2)


def report_dict(report: EvalReport):
    return {
        "model_id": report.model_id,
        "per_class_accuracy": [_rounded(a) for a in report.per_class_accuracy],
        "overall_accuracy": _rounded(report.overall_accuracy),
        "variance": _rounded(report.variance),
        "counts": [int(c) for c in report.counts],
        "raw": {
            "per_class_accuracy": [float(a) for a in report.per_class_accuracy],
            "overall_accuracy": float(report.overall_accuracy),
            "variance": float(report.variance),
        },
    }


def emit_report(report: EvalReport, path):
    """Canonical JSON: fixed key order, 2-decimal percents, raw values kept."""
    text = json.dumps(report_dict(report), indent=2) + "\n"
    with open(path, "w") as fh:
        fh.write(text)


def read_report(path) -> EvalReport:
    with open(path) as fh:
        d = json.load(fh)
    raw = d["raw"]
    return EvalReport(raw["per_class_accuracy"], raw["overall_accuracy"], raw["variance"],
                      d["counts"], d["model_id"])


PRED_FIELDS = ("source_id", "pred", "truth", "race")


def write_predictions(preds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_FIELDS)
        for p in preds:
            w.writerow((p.source_id, p.predicted_gender, p.true_gender, p.race))


def read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(PRED_FIELDS):
        raise ValueError(f"prediction CSV needs columns {PRED_FIELDS}, got {tuple(rows[0])}")
    return [PredictionRecord(r["source_id"], int(r["pred"]), int(r["truth"]), int(r["race"])) for r in rows]
