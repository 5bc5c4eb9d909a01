"""Confusion matrices, weighted P/R/F1 reports, and attention-map export.

Conventions: rows of the confusion matrix are true classes, columns are
predictions; precision/recall/F1 are defined as 0 whenever their
denominator vanishes; aggregate metrics are weighted by per-class support,
which makes weighted recall equal to plain accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from timbrecls import models
from timbrecls.dataset import CLASS_NAMES, N_CLASSES
from timbrecls.layers import AttentionTrace, cross_entropy


class LengthMismatch(ValueError):
    """Prediction and label sequences differ in length."""


class IndexOutOfRange(IndexError):
    """A class index falls outside [0, n_classes)."""


class ZeroTotalSupport(ValueError):
    """Weighted averages over zero samples are undefined."""


@dataclass
class EvalReport:
    confusion: np.ndarray       # [K, K] int64, rows true, cols predicted
    precision: np.ndarray       # [K]
    recall: np.ndarray          # [K]
    f1: np.ndarray              # [K]
    support: np.ndarray         # [K] int64
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    loss: float = float("nan")


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over classes; ties resolve to the lowest index."""
    return np.argmax(logits, axis=1)


def confusion(preds, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise LengthMismatch(f"preds {preds.shape} vs labels {labels.shape}")
    if preds.size and not (0 <= preds.min() and preds.max() < n_classes
                           and 0 <= labels.min() and labels.max() < n_classes):
        raise IndexOutOfRange(f"class indices must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def per_class_metrics(cm: np.ndarray):
    """(precision, recall, f1, support) per class, zero where undefined."""
    cm = np.asarray(cm)
    diag = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1)
    precision = np.divide(diag, predicted, out=np.zeros_like(diag), where=predicted > 0)
    recall = np.divide(diag, support, out=np.zeros_like(diag),
                       where=support.astype(np.float64) > 0)
    pr_sum = precision + recall
    f1 = np.divide(2.0 * precision * recall, pr_sum,
                   out=np.zeros_like(diag), where=pr_sum > 0)
    return precision, recall, f1, support.astype(np.int64)


def weighted_average(precision, recall, f1, support):
    """Support-weighted aggregates (P, R, F1)."""
    support = np.asarray(support, dtype=np.float64)
    total = support.sum()
    if total == 0:
        raise ZeroTotalSupport("no samples to average over")
    return (float(np.dot(precision, support) / total),
            float(np.dot(recall, support) / total),
            float(np.dot(f1, support) / total))


def report_from_predictions(preds, labels, loss: float = float("nan"),
                            n_classes: int = N_CLASSES) -> EvalReport:
    cm = confusion(preds, labels, n_classes)
    precision, recall, f1, support = per_class_metrics(cm)
    wp, wr, wf = weighted_average(precision, recall, f1, support)
    return EvalReport(confusion=cm, precision=precision, recall=recall, f1=f1,
                      support=support, weighted_precision=wp,
                      weighted_recall=wr, weighted_f1=wf, loss=loss)


def evaluate_model(params: models.ParamSet, values: np.ndarray, labels,
                   batch_size: int = 64) -> EvalReport:
    """Forward a whole split in chunks; report metrics plus mean loss.

    ``values`` is [n, n_mels, n_frames]; any float dtype.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ZeroTotalSupport("cannot evaluate an empty split")
    preds = np.zeros(n, dtype=np.int64)
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        batch = np.asarray(values[start:stop], dtype=np.float64)[:, None, :, :]
        logits = models.forward(params, batch)
        loss = cross_entropy(logits, labels[start:stop])
        loss_sum += float(loss.data) * (stop - start)
        preds[start:stop] = predict(logits.data)
    return report_from_predictions(preds, labels, loss=loss_sum / n,
                                   n_classes=params.spec.n_classes)


# ---------------------------------------------------------------------------
# Serialization of reports and traces

def report_to_dict(report: EvalReport, class_names=CLASS_NAMES) -> dict:
    return {
        "loss": report.loss,
        "weighted": {"precision": report.weighted_precision,
                     "recall": report.weighted_recall,
                     "f1": report.weighted_f1},
        "per_class": [
            {"name": class_names[i],
             "precision": float(report.precision[i]),
             "recall": float(report.recall[i]),
             "f1": float(report.f1[i]),
             "support": int(report.support[i])}
            for i in range(len(class_names))
        ],
    }


def write_report_json(path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report), indent=2) + "\n",
                          encoding="utf-8")


def write_confusion_csv(path, cm: np.ndarray, class_names=CLASS_NAMES) -> None:
    """Confusion matrix with class names on both the header row and column."""
    lines = ["true\\pred," + ",".join(class_names)]
    for i, name in enumerate(class_names):
        lines.append(name + "," + ",".join(str(int(v)) for v in cm[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_confusion_csv(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = [[int(v) for v in line.split(",")[1:]] for line in lines[1:] if line]
    return np.array(rows, dtype=np.int64)


def _write_matrix(path, matrix: np.ndarray) -> None:
    np.savetxt(path, matrix, delimiter=",", fmt="%.10e")


def attention_activation(trace: AttentionTrace, patch_values: np.ndarray) -> np.ndarray:
    """Head-averaged weights applied to the input patch, back in [128, 22].

    Column t of the result mixes the patch's time frames with the attention
    row for frame t, which is what the side-by-side activation panels show.
    """
    return np.asarray(patch_values, dtype=np.float64) @ trace.averaged.T


def export_attention(trace: AttentionTrace, patch_values: np.ndarray,
                     out_dir, stem: str) -> list[Path]:
    """Write per-head, averaged, and activation CSVs; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, head in enumerate(trace.per_head, start=1):
        path = out_dir / f"{stem}.head{i}.csv"
        _write_matrix(path, head)
        written.append(path)
    avg_path = out_dir / f"{stem}.avg.csv"
    _write_matrix(avg_path, trace.averaged)
    written.append(avg_path)
    act_path = out_dir / f"{stem}.act.csv"
    _write_matrix(act_path, attention_activation(trace, patch_values))
    written.append(act_path)
    return written
