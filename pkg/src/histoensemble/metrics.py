"""Confusion matrices, classification/error metrics, ROC/AUC, and k-fold CV.

Conventions:
  * confusion rows are actual labels, columns predicted labels;
  * per-class precision/recall/F1 are one-vs-rest, a 0/0 ratio counts as 0;
  * multiclass summaries are macro (unweighted class means);
  * MAE/MSE/RMSE are computed on the integer label encodings;
  * ROC is one-vs-rest per class, AUC by trapezoidal integration; classes
    absent from ``actual`` get no curve and are left out of the macro AUC.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyInput, HistoEnsembleError, LabelError, ShapeError, StageError

SCALAR_METRICS = ("accuracy", "precision_macro", "recall_macro", "f1_macro",
                  "mae", "mse", "rmse", "auc_macro", "prediction_time")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    def one_vs_rest(self, c: int) -> dict[str, int]:
        tp = int(self.counts[c, c])
        fn = int(self.counts[c].sum()) - tp
        fp = int(self.counts[:, c].sum()) - tp
        return {"tp": tp, "fp": fp, "fn": fn, "tn": self.n - tp - fp - fn}

    def row_percentages(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(100.0 * self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def total_percentages(self) -> np.ndarray:
        return 100.0 * self.counts / self.n if self.n else np.zeros(self.counts.shape)

    def ovr_rate_percentages(self) -> list[dict[str, float]]:
        """Per-class TP/TN/FP/FN as percentages of all samples."""
        return [{k: 100.0 * v / self.n for k, v in self.one_vs_rest(c).items()} for c in range(self.k)]


def _labels(v, name: str) -> np.ndarray:
    a = np.asarray(v)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {a.shape}")
    if a.size and not np.issubdtype(a.dtype, np.integer):
        if not np.all(a == np.round(a)):
            raise LabelError(f"{name} holds non-integer labels")
    return a.astype(np.int64)


def confusion(actual, predicted, k: int) -> ConfusionMatrix:
    a, p = _labels(actual, "actual"), _labels(predicted, "predicted")
    if len(a) != len(p):
        raise ShapeError(f"actual has {len(a)} labels, predicted {len(p)}")
    for name, v in (("actual", a), ("predicted", p)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise LabelError(f"{name} label outside 0..{k - 1}")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (a, p), 1)
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]

    @property
    def precision_macro(self) -> float:
        return math.fsum(self.precision) / len(self.precision)

    @property
    def recall_macro(self) -> float:
        return math.fsum(self.recall) / len(self.recall)

    @property
    def f1_macro(self) -> float:
        return math.fsum(self.f1) / len(self.f1)


def classification_metrics(cm: ConfusionMatrix) -> ClassificationMetrics:
    if cm.n == 0:
        raise EmptyInput("confusion matrix is empty")
    precision, recall, f1, support = [], [], [], []
    for c in range(cm.k):
        r = cm.one_vs_rest(c)
        p = _ratio(r["tp"], r["tp"] + r["fp"])
        rc = _ratio(r["tp"], r["tp"] + r["fn"])
        precision.append(p)
        recall.append(rc)
        f1.append(_ratio(2 * p * rc, p + rc))
        support.append(r["tp"] + r["fn"])
    return ClassificationMetrics(int(np.trace(cm.counts)) / cm.n, precision, recall, f1, support)


def regression_errors(actual, predicted) -> tuple[float, float, float]:
    """(MAE, MSE, RMSE) between integer label encodings."""
    a, p = _labels(actual, "actual"), _labels(predicted, "predicted")
    if len(a) != len(p):
        raise ShapeError(f"actual has {len(a)} labels, predicted {len(p)}")
    if len(a) == 0:
        raise EmptyInput("no labels")
    diff = (p - a).astype(np.float64)
    mae = float(np.abs(diff).sum() / len(diff))
    mse = float((diff * diff).sum() / len(diff))
    return mae, mse, math.sqrt(mse)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[0] is +inf, the empty-positive-set point
    auc: float


def binary_roc(positive: np.ndarray, scores: np.ndarray) -> RocCurve | None:
    """Threshold sweep over distinct scores; None if either class is missing."""
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    # last index of each run of tied scores
    cut = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[cut]
    fp = (cut + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, np.r_[np.inf, s[cut]], auc)


@dataclass
class RocResult:
    curves: list[RocCurve | None]
    auc: list[float | None]
    macro_auc: float | None
    micro_auc: float | None = None


def roc_auc(actual, probs, micro: bool = False) -> RocResult:
    a = _labels(actual, "actual")
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim != 2 or len(P) != len(a):
        raise ShapeError(f"probabilities {P.shape} do not match {len(a)} labels")
    if a.size and (a.min() < 0 or a.max() >= P.shape[1]):
        raise LabelError("actual label outside the probability columns")
    curves = [binary_roc(a == c, P[:, c]) for c in range(P.shape[1])]
    aucs = [c.auc if c is not None else None for c in curves]
    defined = [x for x in aucs if x is not None]
    macro = math.fsum(defined) / len(defined) if defined else None
    micro_auc = None
    if micro:
        onehot = np.zeros_like(P, dtype=bool)
        onehot[np.arange(len(a)), a] = True
        pooled = binary_roc(onehot.ravel(), P.ravel())
        micro_auc = pooled.auc if pooled else None
    return RocResult(curves, aucs, macro, micro_auc)


@dataclass
class MetricsBundle:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    mae: float
    mse: float
    rmse: float
    auc_macro: float | None
    per_class: list[dict]
    confusion: list[list[int]]
    roc_points: dict[str, list[list[float]]] = field(default_factory=dict)
    prediction_time: float = 0.0
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsBundle":
        return cls(**d)


def evaluate(actual, predicted, probs=None, n_classes: int | None = None,
             prediction_time: float = 0.0, class_names: Sequence[str] | None = None) -> MetricsBundle:
    """Full metric bundle for one set of predictions."""
    a = _labels(actual, "actual")
    p = _labels(predicted, "predicted")
    if len(a) == 0:
        raise EmptyInput("no predictions to evaluate")
    if n_classes is None:
        n_classes = np.asarray(probs).shape[1] if probs is not None else int(max(a.max(), p.max()) + 1)
    names = list(class_names) if class_names is not None else [str(c) for c in range(n_classes)]
    cm = confusion(a, p, n_classes)
    cls = classification_metrics(cm)
    mae, mse, rmse = regression_errors(a, p)
    roc = roc_auc(a, probs) if probs is not None else None
    per_class, points = [], {}
    for c in range(n_classes):
        per_class.append({
            "label_id": c, "class_name": names[c], "support": cls.support[c],
            "precision": cls.precision[c], "recall": cls.recall[c], "f1": cls.f1[c],
            "auc": roc.auc[c] if roc else None,
        })
        if roc and roc.curves[c] is not None:
            points[names[c]] = [[float(x), float(y)] for x, y in zip(roc.curves[c].fpr, roc.curves[c].tpr)]
    return MetricsBundle(
        accuracy=cls.accuracy, precision_macro=cls.precision_macro, recall_macro=cls.recall_macro,
        f1_macro=cls.f1_macro, mae=mae, mse=mse, rmse=rmse,
        auc_macro=roc.macro_auc if roc else None,
        per_class=per_class, confusion=cm.counts.tolist(), roc_points=points,
        prediction_time=float(prediction_time), n=int(len(a)),
    )


def aggregate(bundles: Sequence[MetricsBundle]) -> dict[str, dict[str, float | None]]:
    """Per-metric mean and population standard deviation across folds.

    Sums use ``math.fsum`` so the result does not depend on fold order.
    """
    out = {}
    for name in SCALAR_METRICS:
        vals = [getattr(b, name) for b in bundles]
        if not vals or any(v is None for v in vals):
            out[name] = {"mean": None, "std": None}
            continue
        mean = math.fsum(vals) / len(vals)
        var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
        out[name] = {"mean": mean, "std": math.sqrt(var)}
    return out


@dataclass
class CVResult:
    folds: list[MetricsBundle]
    aggregate: dict
    predicted: np.ndarray
    probs: np.ndarray
    fold_of: np.ndarray


def cross_validate(fit: Callable, features, labels, fold_plan, n_classes: int | None = None,
                   class_names: Sequence[str] | None = None) -> CVResult:
    """Train on k-1 folds and evaluate on the held fold, for every fold.

    ``fit(X_train, y_train)`` returns a predictor exposing ``predict`` and
    ``predict_proba``; prediction time covers those two calls only.
    """
    X = np.asarray(features)
    y = _labels(labels, "labels")
    k = int(n_classes if n_classes is not None else y.max() + 1)
    predicted = np.full(len(y), -1, dtype=np.int64)
    probs = np.zeros((len(y), k))
    bundles = []
    for i in range(fold_plan.k):
        tr, te = fold_plan.train_test(i)
        try:
            model = fit(X[tr], y[tr])
            start = time.perf_counter()
            p = np.asarray(model.predict_proba(X[te]))
            lab = np.asarray(model.predict(X[te]))
            elapsed = time.perf_counter() - start
            bundles.append(evaluate(y[te], lab, p, k, elapsed, class_names))
        except StageError:
            raise
        except HistoEnsembleError as e:
            raise type(e)(f"fold {i}: {e}") from e
        except Exception as e:
            raise StageError(f"fold {i}", e) from e
        predicted[te] = lab
        probs[te] = p
    return CVResult(bundles, aggregate(bundles), predicted, probs, fold_plan.fold_of(len(y)))
