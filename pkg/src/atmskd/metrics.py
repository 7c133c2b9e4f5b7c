"""Classification and distillation metrics, evaluation reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ParameterError, ValidationError
from .tensor import Tensor, no_grad


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns are predictions."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValidationError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValidationError("confusion matrix entries must be >= 0")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(cls, labels, preds, num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels), np.asarray(preds)), 1)
        return cls(counts)

    @classmethod
    def binary(cls, tp: int, tn: int, fp: int, fn: int, positive: int = 1) -> "ConfusionMatrix":
        counts = np.zeros((2, 2), dtype=np.int64)
        neg = 1 - positive
        counts[positive, positive] = tp
        counts[neg, neg] = tn
        counts[neg, positive] = fp
        counts[positive, neg] = fn
        return cls(counts)


def predict(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for ``images``."""
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(Tensor(images[start : start + batch_size])).data)
    return np.concatenate(out, axis=0)


def confusion(model, dataset, batch_size: int = 64) -> ConfusionMatrix:
    preds = predict(model, dataset.images, batch_size).argmax(axis=1)
    return ConfusionMatrix.from_predictions(dataset.labels, preds, dataset.num_classes)


def _pct(num: float, den: float) -> float:
    return 100.0 * num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r else 0.0


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float


def classification_metrics(cm: ConfusionMatrix, positive_class: int = 1) -> ClassificationMetrics:
    """Accuracy, precision, recall, F1 in percent.

    Binary matrices use ``positive_class``; larger ones are macro-averaged
    one-vs-rest.
    """
    c = cm.counts
    if cm.total == 0:
        raise ValidationError("empty confusion matrix")
    accuracy = _pct(np.trace(c), cm.total)
    if c.shape[0] == 2:
        if positive_class not in (0, 1):
            raise ParameterError(f"positive_class must be 0 or 1, got {positive_class}")
        tp = c[positive_class, positive_class]
        fp = c[:, positive_class].sum() - tp
        fn = c[positive_class, :].sum() - tp
        p, r = _pct(tp, tp + fp), _pct(tp, tp + fn)
        return ClassificationMetrics(accuracy, p, r, _f1(p, r))
    ps, rs, fs = [], [], []
    for k in range(c.shape[0]):
        tp = c[k, k]
        p, r = _pct(tp, c[:, k].sum()), _pct(tp, c[k, :].sum())
        ps.append(p)
        rs.append(r)
        fs.append(_f1(p, r))
    return ClassificationMetrics(accuracy, float(np.mean(ps)), float(np.mean(rs)), float(np.mean(fs)))


def macro_metrics(cm: ConfusionMatrix) -> ClassificationMetrics:
    """Macro average over every class taken as positive in turn."""
    per = [classification_metrics(cm, k) if cm.counts.shape[0] == 2 else classification_metrics(cm) for k in range(cm.counts.shape[0])]
    return ClassificationMetrics(
        per[0].accuracy,
        float(np.mean([m.precision for m in per])),
        float(np.mean([m.recall for m in per])),
        float(np.mean([m.f1 for m in per])),
    )


def knowledge_retention(student_acc: float, teacher_acc: float) -> float:
    """Student accuracy as a percentage of teacher accuracy."""
    if teacher_acc <= 0:
        raise ParameterError(f"teacher accuracy must be > 0, got {teacher_acc}")
    return 100.0 * student_acc / teacher_acc


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    kr: float | None = None
    avg_inference_ms: float | None = None
    median_inference_ms: float | None = None
    p95_inference_ms: float | None = None
    throughput: float | None = None
    model_size_mb: float | None = None
    params: int | None = None
    precision_macro: float | None = None
    recall_macro: float | None = None
    f1_macro: float | None = None
    positive_class: str | None = None
    n_samples: int | None = None
    confusion: list | None = None
    thread_mode: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def build_eval_report(
    cm: ConfusionMatrix,
    positive_class: int = 1,
    class_names=None,
    teacher_acc: float | None = None,
) -> EvalReport:
    binary = classification_metrics(cm, positive_class)
    macro = macro_metrics(cm)
    return EvalReport(
        accuracy=binary.accuracy,
        precision=binary.precision,
        recall=binary.recall,
        f1=binary.f1,
        kr=knowledge_retention(binary.accuracy, teacher_acc) if teacher_acc is not None else None,
        precision_macro=macro.precision,
        recall_macro=macro.recall,
        f1_macro=macro.f1,
        positive_class=(class_names[positive_class] if class_names else str(positive_class)),
        n_samples=cm.total,
        confusion=cm.counts.tolist(),
    )


def model_size_mb(path: str | Path) -> float:
    path = Path(path)
    try:
        return path.stat().st_size / 2**20
    except OSError as exc:
        raise OSError(f"cannot stat checkpoint {path}: {exc}") from exc


def emit_report(report, path: str | Path, fmt: str | None = None) -> Path:
    """Write a dataclass report as JSON or as a one-row CSV."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    data = asdict(report) if not isinstance(report, dict) else report
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        elif fmt == "csv":
            flat = {k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in data.items()}
            with path.open("w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(flat))
                writer.writeheader()
                writer.writerow(flat)
        else:
            raise ParameterError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    return path


def read_report(path: str | Path) -> EvalReport:
    path = Path(path)
    if path.suffix == ".json":
        return EvalReport.from_dict(json.loads(path.read_text()))
    with path.open(newline="") as fh:
        row = next(csv.DictReader(fh))
    parsed = {}
    for k, v in row.items():
        parsed[k] = None if v == "" else json.loads(v) if k == "confusion" else _parse_scalar(v)
    return EvalReport.from_dict(parsed)


def _parse_scalar(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v
