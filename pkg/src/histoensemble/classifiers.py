"""The six-classifier zoo: RF, SVM, LR, MLP, XGB, LGB.

All members share one contract: ``predict`` is the argmax of
``predict_proba`` (first maximum, i.e. lowest label id on ties), and
probability column j always means label id j of the label map, with zeros
for classes absent from the training labels.

The SVM has no native probabilities. Its one-vs-rest decision values are
turned into probabilities by a softmax whose temperature is fitted on
out-of-fold decision values (in-sample when a class has a single example).
"""

from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import joblib
import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.ensemble import RandomForestClassifier
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .errors import BundleError, DegenerateLabels, HyperparamError, NumericError, ShapeError

REGISTRY = ("RF", "SVM", "LR", "MLP", "XGB", "LGB")

_NUM = (int, float)
# classifier -> {hyperparam: (accepted types, default)}
SCHEMAS: dict[str, dict[str, tuple[tuple, Any]]] = {
    "RF": {
        "n_estimators": ((int,), 100),
        "max_depth": ((int, type(None)), None),
        "min_samples_leaf": ((int,), 1),
        "max_features": ((str, float, int, type(None)), "sqrt"),
        "n_jobs": ((int,), 1),
    },
    "SVM": {
        "C": (_NUM, 1.0),
        "kernel": ((str,), "rbf"),
        "gamma": ((str, float), "scale"),
        "calibration_folds": ((int,), 5),
    },
    "LR": {
        "C": (_NUM, 1.0),
        "max_iter": ((int,), 1000),
        "solver": ((str,), "lbfgs"),
    },
    "MLP": {
        "hidden_layer_sizes": ((list, tuple), (100,)),
        "alpha": (_NUM, 1e-4),
        "learning_rate_init": (_NUM, 1e-3),
        "max_iter": ((int,), 500),
    },
    "XGB": {
        "n_estimators": ((int,), 100),
        "max_depth": ((int,), 6),
        "learning_rate": (_NUM, 0.3),
        "min_child_weight": ((str, float, int), "auto"),
        "subsample": (_NUM, 1.0),
        "n_jobs": ((int,), 1),
    },
    "LGB": {
        "n_estimators": ((int,), 100),
        "num_leaves": ((int,), 31),
        "learning_rate": (_NUM, 0.1),
        "min_child_samples": ((str, int), "auto"),
        "n_jobs": ((int,), 1),
    },
}
for _schema in SCHEMAS.values():
    _schema["standardize"] = ((bool,), False)


def default_hyperparams(classifier_id: str) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, (_, v) in SCHEMAS[classifier_id].items()}


@dataclass(frozen=True)
class ClassifierSpec:
    classifier_id: str
    hyperparams: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.classifier_id not in REGISTRY:
            raise HyperparamError(f"unknown classifier {self.classifier_id!r}; registry is {REGISTRY}")
        schema = SCHEMAS[self.classifier_id]
        merged = default_hyperparams(self.classifier_id)
        for k, v in dict(self.hyperparams).items():
            if k not in schema:
                raise HyperparamError(f"{self.classifier_id}: unknown hyperparameter {k!r}")
            types = schema[k][0]
            if isinstance(v, bool) and bool not in types:
                raise HyperparamError(f"{self.classifier_id}.{k}: got bool {v!r}")
            if not isinstance(v, types):
                raise HyperparamError(f"{self.classifier_id}.{k}: {v!r} is not one of {[t.__name__ for t in types]}")
            merged[k] = list(v) if isinstance(v, tuple) else v
        for k in ("min_child_weight", "min_child_samples"):
            if isinstance(merged.get(k), str) and merged[k] != "auto":
                raise HyperparamError(f"{self.classifier_id}.{k}: only 'auto' is accepted as a string")
        object.__setattr__(self, "hyperparams", merged)

    @property
    def registry_index(self) -> int:
        return REGISTRY.index(self.classifier_id)

    def to_dict(self) -> dict:
        return {"classifier_id": self.classifier_id, "hyperparams": dict(self.hyperparams), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        return cls(d["classifier_id"], dict(d.get("hyperparams") or {}), int(d.get("seed", 0)))


class TemperatureSVC(ClassifierMixin, BaseEstimator):
    """RBF SVC with softmax-of-decision-values probabilities."""

    def __init__(self, C=1.0, kernel="rbf", gamma="scale", calibration_folds=5, random_state=0):
        self.C = C
        self.kernel = kernel
        self.gamma = gamma
        self.calibration_folds = calibration_folds
        self.random_state = random_state

    def _svc(self):
        return SVC(C=self.C, kernel=self.kernel, gamma=self.gamma, decision_function_shape="ovr")

    @staticmethod
    def _scores(svc, X):
        d = svc.decision_function(X)
        if d.ndim == 1:
            d = np.stack([-d / 2.0, d / 2.0], axis=1)
        return d

    def fit(self, X, y):
        self.classes_ = np.unique(y)
        counts = np.bincount(np.searchsorted(self.classes_, y))
        folds = min(self.calibration_folds, int(counts.min()))
        self.svc_ = self._svc().fit(X, y)
        if folds >= 2:
            scores = np.zeros((len(y), len(self.classes_)))
            cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=self.random_state)
            for tr, te in cv.split(X, y):
                scores[te] = self._scores(self._svc().fit(X[tr], y[tr]), X[te])
        else:
            scores = self._scores(self.svc_, X)
        self.temperature_ = self._fit_temperature(scores, y)
        return self

    def _fit_temperature(self, scores, y):
        target = np.searchsorted(self.classes_, y)

        def nll(log_a):
            lp = log_softmax(scores * 10.0 ** log_a, axis=1)
            return -lp[np.arange(len(y)), target].mean()

        res = minimize_scalar(nll, bounds=(-3.0, 3.0), method="bounded", options={"xatol": 1e-6})
        return float(10.0 ** res.x)

    def predict_proba(self, X):
        return softmax(self._scores(self.svc_, X) * self.temperature_, axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def _resolve_auto(cid: str, hp: dict, n: int, k: int) -> dict:
    hp = dict(hp)
    if cid == "XGB" and hp["min_child_weight"] == "auto":
        hp["min_child_weight"] = 1.0 if n >= 20 else 0.0
    if cid == "LGB" and hp["min_child_samples"] == "auto":
        hp["min_child_samples"] = min(20, max(1, n // (2 * k)))
    return hp


def build_estimator(spec: ClassifierSpec, n_samples: int, n_seen_classes: int):
    """Instantiate the unfitted estimator for ``spec``.

    ``"auto"`` booster settings keep library defaults on realistic data and
    relax the minimum-leaf constraints on tiny training sets so trees can
    still split.
    """
    cid, seed = spec.classifier_id, spec.seed
    hp = _resolve_auto(cid, spec.hyperparams, n_samples, n_seen_classes)
    standardize = hp.pop("standardize")
    if cid == "RF":
        est = RandomForestClassifier(random_state=seed, **hp)
    elif cid == "SVM":
        est = TemperatureSVC(random_state=seed, **hp)
    elif cid == "LR":
        est = LogisticRegression(penalty="l2", random_state=seed, **hp)
    elif cid == "MLP":
        hp["hidden_layer_sizes"] = tuple(hp["hidden_layer_sizes"])
        est = MLPClassifier(random_state=seed, **hp)
    elif cid == "XGB":
        from xgboost import XGBClassifier

        est = XGBClassifier(random_state=seed, tree_method="hist", verbosity=0, **hp)
    else:
        from lightgbm import LGBMClassifier

        mcs = hp["min_child_samples"]
        est = LGBMClassifier(random_state=seed, deterministic=True, force_row_wise=True, verbose=-1,
                             min_data_in_bin=min(3, mcs), **hp)
    return make_pipeline(StandardScaler(), est) if standardize else est


@dataclass
class TrainedModel:
    spec: ClassifierSpec
    estimator: Any
    classes: np.ndarray  # label ids seen in training, ascending
    n_classes: int
    n_features: int
    train_time: float

    @property
    def classifier_id(self) -> str:
        return self.spec.classifier_id

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, self.n_features)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"{self.classifier_id}: expected width {self.n_features}, got shape {X.shape}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        out = np.zeros((len(X), self.n_classes), dtype=np.float64)
        if len(X) == 0:
            return out
        p = np.asarray(self.estimator.predict_proba(X), dtype=np.float64)
        p = np.clip(p, 0.0, None)
        p /= p.sum(axis=1, keepdims=True)
        out[:, self.classes] = p
        return out

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1).astype(np.int64)


def train(spec: ClassifierSpec, features, labels, n_classes: int | None = None) -> TrainedModel:
    X = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"features {X.shape} and labels {y.shape} do not align")
    if not np.isfinite(X).all():
        raise NumericError(f"{spec.classifier_id}: non-finite training features")
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateLabels(f"{spec.classifier_id}: training labels hold a single class {classes.tolist()}")
    if classes[0] < 0:
        raise ShapeError("labels must be non-negative")
    n_classes = int(n_classes if n_classes is not None else classes[-1] + 1)
    if classes[-1] >= n_classes:
        raise ShapeError(f"label {classes[-1]} outside 0..{n_classes - 1}")
    est = build_estimator(spec, len(y), len(classes))
    y_enc = np.searchsorted(classes, y)
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        est.fit(X, y_enc)
    elapsed = time.perf_counter() - start
    return TrainedModel(spec, est, classes, n_classes, X.shape[1], elapsed)


def predict(model: TrainedModel, features) -> np.ndarray:
    return model.predict(features)


def predict_proba(model: TrainedModel, features) -> np.ndarray:
    return model.predict_proba(features)


# --------------------------------------------------------------------------
# bundles: <dir>/{spec.json, state.joblib, checksums.json}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_model(model: TrainedModel, bundle_dir, label_map=None) -> Path:
    bundle = Path(bundle_dir)
    bundle.mkdir(parents=True, exist_ok=True)
    spec = {
        **model.spec.to_dict(),
        "n_features": model.n_features,
        "n_classes": model.n_classes,
        "classes": model.classes.tolist(),
        "train_time": model.train_time,
        "label_map": label_map.to_list() if label_map is not None else None,
    }
    (bundle / "spec.json").write_text(json.dumps(spec, indent=2, sort_keys=True), encoding="utf-8")
    joblib.dump(model.estimator, bundle / "state.joblib")
    sums = {name: _sha256(bundle / name) for name in ("spec.json", "state.joblib")}
    (bundle / "checksums.json").write_text(json.dumps(sums, indent=2, sort_keys=True), encoding="utf-8")
    return bundle


def load_model(bundle_dir) -> TrainedModel:
    bundle = Path(bundle_dir)
    try:
        sums = json.loads((bundle / "checksums.json").read_text(encoding="utf-8"))
        for name in ("spec.json", "state.joblib"):
            if _sha256(bundle / name) != sums[name]:
                raise BundleError(f"{bundle / name} does not match its recorded checksum")
        spec = json.loads((bundle / "spec.json").read_text(encoding="utf-8"))
        estimator = joblib.load(bundle / "state.joblib")
    except BundleError:
        raise
    except (OSError, KeyError, ValueError) as e:
        raise BundleError(f"unreadable model bundle {bundle}: {e}") from e
    return TrainedModel(
        spec=ClassifierSpec.from_dict(spec),
        estimator=estimator,
        classes=np.array(spec["classes"], dtype=np.int64),
        n_classes=int(spec["n_classes"]),
        n_features=int(spec["n_features"]),
        train_time=float(spec["train_time"]),
    )
