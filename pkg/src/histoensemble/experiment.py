"""End-to-end experiment: ingest, extract, train the zoo, filter, vote, choose.

Order of decisions, per backbone: both voting modes are scored and the
better one kept (soft wins ties); the backbone with the best kept accuracy
is then chosen (earlier config entry wins ties). Accuracies are compared at
the same resolution HPF uses.

By default HPF ranks classifiers by validation accuracy from an inner
stratified k-fold run inside each training portion, so test folds never
influence the selection. ``hpf.paper_faithful`` ranks by test accuracy.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import classifiers as zoo
from .classifiers import REGISTRY, ClassifierSpec
from .data import (
    PRESET_LABEL_MAPS,
    ImageSample,
    LabelMap,
    PreprocessConfig,
    iter_samples,
    make_folds,
    preprocess_image,
    save_manifest,
    scan_dataset,
    stratified_split,
    write_skip_report,
)
from .ensemble import (
    CRITERIA,
    MODES,
    EnsembleModel,
    HPFSelection,
    Leaderboard,
    build_leaderboard,
    combine,
    ensemble_predict,
    load_ensemble,
    rank_score,
    save_ensemble,
    select_top_k,
)
from .errors import BundleError, CacheMiss, ConfigError, StageError, StaleCache
from .features import (
    BackboneSpec,
    CacheKey,
    cache_features,
    extract_features,
    extraction_hash,
    load_backbone,
    load_features,
)
from .metrics import MetricsBundle, aggregate, evaluate

log = logging.getLogger(__name__)

CACHE_ENV = "HISTOENS_CACHE_DIR"
EVAL_MODES = ("kfold", "holdout")


def derive_seed(master: int, *tags) -> int:
    digest = hashlib.sha256(json.dumps([int(master), *map(str, tags)]).encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


# --------------------------------------------------------------------------
# configuration


@dataclass
class EvaluationConfig:
    mode: str = "kfold"
    k: int = 10
    train_fraction: float = 0.8
    inner_k: int = 3


@dataclass
class HPFConfig:
    top_k: int = 3
    criterion: str = "average_across_backbones"
    paper_faithful: bool = False
    score_decimals: int | None = 4


@dataclass
class EnsembleConfig:
    modes: list[str] = field(default_factory=lambda: ["hard", "soft"])
    weights: list[float] | None = None


def _take(d: dict, allowed: set, where: str) -> dict:
    d = dict(d or {})
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")
    return d


@dataclass
class ExperimentConfig:
    dataset_root: str
    label_map: LabelMap
    backbones: list[BackboneSpec]
    classifiers: list[ClassifierSpec]
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    hpf: HPFConfig = field(default_factory=HPFConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    seed: int = 0
    batch_size: int = 32
    cache_dir: str = "cache"
    output_dir: str = "runs/latest"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.backbones:
            raise ConfigError("at least one backbone is required")
        ids = [b.backbone_id for b in self.backbones]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate backbones {ids}")
        cids = [c.classifier_id for c in self.classifiers]
        if len(set(cids)) != len(cids):
            raise ConfigError(f"duplicate classifiers {cids}")
        if len(cids) < self.hpf.top_k or self.hpf.top_k < 1:
            raise ConfigError(f"top_k={self.hpf.top_k} needs at least that many classifiers, have {len(cids)}")
        if self.hpf.criterion not in CRITERIA:
            raise ConfigError(f"hpf.criterion must be one of {CRITERIA}")
        ev = self.evaluation
        if ev.mode not in EVAL_MODES:
            raise ConfigError(f"evaluation.mode must be one of {EVAL_MODES}")
        if ev.k < 2 or ev.inner_k < 2:
            raise ConfigError("evaluation.k and evaluation.inner_k must be at least 2")
        if not 0.0 < ev.train_fraction < 1.0:
            raise ConfigError("evaluation.train_fraction must lie in (0, 1)")
        modes = self.ensemble.modes
        if not modes or any(m not in MODES for m in modes) or len(set(modes)) != len(modes):
            raise ConfigError(f"ensemble.modes must be a non-empty subset of {MODES}")
        w = self.ensemble.weights
        if w is not None and (len(w) != self.hpf.top_k or any(x < 0 for x in w) or sum(w) <= 0):
            raise ConfigError(f"ensemble.weights needs {self.hpf.top_k} non-negative values with a positive sum")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "dataset": {"root": self.dataset_root, "labels": self.label_map.to_list()},
            "preprocess": self.preprocess.to_dict(),
            "backbones": [b.to_dict() for b in self.backbones],
            "classifiers": [c.to_dict() for c in self.classifiers],
            "evaluation": vars(self.evaluation).copy(),
            "hpf": vars(self.hpf).copy(),
            "ensemble": {"modes": list(self.ensemble.modes), "weights": self.ensemble.weights},
            "batch_size": self.batch_size,
            "cache_dir": self.cache_dir,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = _take(d, {"seed", "dataset", "preprocess", "backbones", "classifiers", "evaluation",
                      "hpf", "ensemble", "batch_size", "cache_dir", "output_dir"}, "config")
        seed = int(d.get("seed", 0))
        ds = _take(d.get("dataset"), {"root", "labels"}, "dataset")
        if "root" not in ds:
            raise ConfigError("dataset.root is required")
        labels = ds.get("labels", "lung")
        if isinstance(labels, str):
            if labels not in PRESET_LABEL_MAPS:
                raise ConfigError(f"unknown label preset {labels!r}; known: {sorted(PRESET_LABEL_MAPS)}")
            label_map = PRESET_LABEL_MAPS[labels]
        elif labels and all(isinstance(x, str) for x in labels):
            label_map = LabelMap.from_names(labels)
        else:
            label_map = LabelMap.from_list(labels)
        backbones = []
        for b in d.get("backbones") or [{"backbone_id": "mock"}]:
            b = {"backbone_id": b} if isinstance(b, str) else b
            _take(b, {"backbone_id", "model_path", "input_shape", "normalize"}, "backbone")
            backbones.append(BackboneSpec.from_dict(b))
        classifiers = []
        for c in d.get("classifiers") or list(REGISTRY):
            c = {"classifier_id": c} if isinstance(c, str) else dict(c)
            _take(c, {"classifier_id", "hyperparams", "seed"}, "classifier")
            c.setdefault("seed", derive_seed(seed, "classifier", c.get("classifier_id")))
            classifiers.append(ClassifierSpec.from_dict(c))
        try:
            evaluation = EvaluationConfig(**_take(d.get("evaluation"), set(vars(EvaluationConfig())), "evaluation"))
            hpf = HPFConfig(**_take(d.get("hpf"), set(vars(HPFConfig())), "hpf"))
            ens = EnsembleConfig(**_take(d.get("ensemble"), {"modes", "weights"}, "ensemble"))
            pre = PreprocessConfig(**_take(d.get("preprocess"), {"size", "channel_order", "interpolation"},
                                           "preprocess"))
        except TypeError as e:
            raise ConfigError(str(e)) from e
        return cls(
            dataset_root=str(ds["root"]), label_map=label_map, backbones=backbones,
            classifiers=classifiers, evaluation=evaluation, hpf=hpf, ensemble=ens, preprocess=pre,
            seed=seed, batch_size=int(d.get("batch_size", 32)),
            cache_dir=str(d.get("cache_dir", "cache")), output_dir=str(d.get("output_dir", "runs/latest")),
        )

    def result_hash(self) -> str:
        """Hash of the settings that can change results (paths excluded)."""
        d = self.to_dict()
        for key in ("cache_dir", "output_dir"):
            d.pop(key)
        d["dataset"].pop("root")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return ExperimentConfig.from_dict(doc)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")


# --------------------------------------------------------------------------
# result


@dataclass
class ExperimentResult:
    config: dict
    provenance: dict
    feature_shapes: dict[str, list[int]]
    leaderboard: Leaderboard  # the board HPF ranked
    test_leaderboard: Leaderboard
    validation_leaderboard: Leaderboard | None
    selections: dict[str, HPFSelection]
    selection: HPFSelection
    ensemble_accuracy: dict[str, dict[str, float]]  # mode -> backbone -> accuracy
    ensemble_metrics: dict[str, dict[str, MetricsBundle]]  # backbone -> mode -> pooled metrics
    chosen_mode: str
    chosen_backbone: str
    final_metrics: MetricsBundle
    cv_folds: list[MetricsBundle]
    cv_aggregate: dict
    timings: dict

    @property
    def class_names(self) -> list[str]:
        return [n for n, _ in self.config["dataset"]["labels"]]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "provenance": self.provenance,
            "feature_shapes": self.feature_shapes,
            "leaderboard": self.leaderboard.to_dict(),
            "test_leaderboard": self.test_leaderboard.to_dict(),
            "validation_leaderboard": self.validation_leaderboard.to_dict() if self.validation_leaderboard else None,
            "selections": {b: s.to_dict() for b, s in self.selections.items()},
            "selection": self.selection.to_dict(),
            "ensemble_accuracy": self.ensemble_accuracy,
            "ensemble_metrics": {b: {m: mb.to_dict() for m, mb in v.items()} for b, v in self.ensemble_metrics.items()},
            "chosen_mode": self.chosen_mode,
            "chosen_backbone": self.chosen_backbone,
            "final_metrics": self.final_metrics.to_dict(),
            "cv_folds": [b.to_dict() for b in self.cv_folds],
            "cv_aggregate": self.cv_aggregate,
            "timings": self.timings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        vb = d.get("validation_leaderboard")
        return cls(
            config=d["config"], provenance=d["provenance"], feature_shapes=d["feature_shapes"],
            leaderboard=Leaderboard.from_dict(d["leaderboard"]),
            test_leaderboard=Leaderboard.from_dict(d["test_leaderboard"]),
            validation_leaderboard=Leaderboard.from_dict(vb) if vb else None,
            selections={b: HPFSelection.from_dict(s) for b, s in d["selections"].items()},
            selection=HPFSelection.from_dict(d["selection"]),
            ensemble_accuracy=d["ensemble_accuracy"],
            ensemble_metrics={b: {m: MetricsBundle.from_dict(x) for m, x in v.items()}
                              for b, v in d["ensemble_metrics"].items()},
            chosen_mode=d["chosen_mode"], chosen_backbone=d["chosen_backbone"],
            final_metrics=MetricsBundle.from_dict(d["final_metrics"]),
            cv_folds=[MetricsBundle.from_dict(b) for b in d["cv_folds"]],
            cv_aggregate=d["cv_aggregate"], timings=d["timings"],
        )

    def summary_dict(self) -> dict:
        """Everything except wall-clock measurements and filesystem paths."""
        d = copy.deepcopy(self.to_dict())
        d.pop("timings")
        cfg = d.pop("config")
        d["config_hash"] = self.provenance["config_hash"]
        d["config"] = {k: v for k, v in cfg.items() if k not in ("cache_dir", "output_dir", "dataset")}
        d["config"]["labels"] = cfg["dataset"]["labels"]
        d["config"]["backbones"] = [{**b, "model_path": Path(b["model_path"]).name if b["model_path"] else None}
                                    for b in cfg["backbones"]]
        _strip_key(d, "prediction_time")
        return d


def _strip_key(obj, key):
    if isinstance(obj, dict):
        obj.pop(key, None)
        for v in obj.values():
            _strip_key(v, key)
    elif isinstance(obj, list):
        for v in obj:
            _strip_key(v, key)


def load_result(result_dir) -> ExperimentResult:
    path = Path(result_dir) / "result.json"
    try:
        return ExperimentResult.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot read experiment result {path}: {e}") from e


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _fmean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


# --------------------------------------------------------------------------
# orchestration


STAGES = ("ingest", "split", "extract", "train", "select", "ensemble", "choose", "bundle", "persist")


class _Run:
    def __init__(self, config: ExperimentConfig):
        self.cfg = config
        self.out = Path(config.output_dir)
        self.cache_dir = Path(os.environ.get(CACHE_ENV) or config.cache_dir)
        self.completed: list[str] = []
        self.timings: dict = {"extract": {}, "cache_hit": {}, "train": {}, "predict": {}, "stages": {}}
        self.records: list[tuple] = []

    @contextmanager
    def stage(self, name: str):
        log.info("stage %s", name)
        start = time.perf_counter()
        try:
            yield
        except Exception as e:
            self._fail(name, e)
            if isinstance(e, StageError):
                raise
            raise StageError(name, e) from e
        self.timings["stages"][name] = time.perf_counter() - start
        self.completed.append(name)

    def _fail(self, name: str, e: Exception) -> None:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            _dump_json({"failed_stage": name, "error_type": type(e).__name__, "message": str(e),
                        "completed_stages": self.completed}, self.out / "FAILED.json")
        except OSError:
            log.exception("could not write failure marker")

    # ---- stages

    def run(self) -> ExperimentResult:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        failed = self.out / "FAILED.json"
        if failed.exists():
            failed.unlink()

        with self.stage("ingest"):
            self.manifest = scan_dataset(cfg.dataset_root, cfg.label_map)
            save_manifest(self.manifest, self.out / "manifest.json")
            write_skip_report(self.manifest, self.out / "skipped.jsonl")
            self.y = self.manifest.labels
            self.K = len(cfg.label_map)

        with self.stage("split"):
            self._make_splits()

        with self.stage("extract"):
            self.features = {}
            for spec in cfg.backbones:
                self.features[spec.backbone_id] = self._features_for(spec)

        with self.stage("train"):
            self.member_out = {}
            self.val_acc = {}
            for spec in cfg.backbones:
                self._train_backbone(spec.backbone_id)

        with self.stage("select"):
            self._select()

        with self.stage("ensemble"):
            self._ensembles()

        with self.stage("choose"):
            self._choose()

        with self.stage("bundle"):
            self._final_bundle()

        with self.stage("persist"):
            result = self._result()
            self._persist(result)
        return result

    def _make_splits(self):
        cfg, ev = self.cfg, self.cfg.evaluation
        self.split_seed = derive_seed(cfg.seed, "split", ev.mode)
        if ev.mode == "kfold":
            plan = make_folds(self.y, ev.k, self.split_seed)
            self.splits = [plan.train_test(i) for i in range(plan.k)]
            _dump_json(plan.to_dict(), self.out / "folds.json")
        else:
            train, test = stratified_split(self.y, ev.train_fraction, self.split_seed)
            self.splits = [(train, test)]
            _dump_json({"train": train.tolist(), "test": test.tolist(), "seed": self.split_seed},
                       self.out / "folds.json")
        self.test_fold = np.full(len(self.y), -1, dtype=np.int64)
        for s, (_, te) in enumerate(self.splits):
            self.test_fold[te] = s

    def _features_for(self, spec: BackboneSpec):
        bid = spec.backbone_id
        key = CacheKey(self.manifest.dataset_id, bid,
                       extraction_hash(self.cfg.preprocess, spec, self.manifest.content_digest))
        start = time.perf_counter()
        try:
            fm = load_features(key, self.cache_dir)
            if not np.array_equal(fm.labels, self.y):
                raise StaleCache("cached labels differ from the manifest")
            hit = True
        except (CacheMiss, StaleCache) as e:
            log.info("extracting %s features (%s)", bid, e)
            fm = extract_features(spec, iter_samples(self.manifest, self.cfg.preprocess), self.cfg.batch_size,
                                  dataset_id=key.dataset_id, preprocess_hash=key.preprocess_hash)
            cache_features(fm, self.cache_dir)
            hit = False
        self.timings["extract"][bid] = time.perf_counter() - start
        self.timings["cache_hit"][bid] = hit
        return fm

    def _record(self, stage, bid, model, outer, inner, idx, predicted):
        self.records.append((stage, bid, model, outer, inner, idx, predicted))

    def _train_backbone(self, bid: str):
        cfg = self.cfg
        X, y = self.features[bid].values, self.y
        outs = {c.classifier_id: [] for c in cfg.classifiers}
        train_t = {c.classifier_id: 0.0 for c in cfg.classifiers}
        pred_t = {c.classifier_id: 0.0 for c in cfg.classifiers}
        val = {c.classifier_id: [] for c in cfg.classifiers}
        for s, (tr, te) in enumerate(self.splits):
            for spec in cfg.classifiers:
                cid = spec.classifier_id
                model = zoo.train(spec, X[tr], y[tr], self.K)
                start = time.perf_counter()
                probs = model.predict_proba(X[te])
                labels = model.predict(X[te])
                elapsed = time.perf_counter() - start
                outs[cid].append((labels, probs, elapsed))
                train_t[cid] += model.train_time
                pred_t[cid] += elapsed
                self._record("test", bid, cid, s, -1, te, labels)
            if cfg.hpf.paper_faithful:
                continue
            inner = make_folds(y[tr], cfg.evaluation.inner_k, derive_seed(cfg.seed, "inner", s))
            per_inner = {c.classifier_id: [] for c in cfg.classifiers}
            for j in range(inner.k):
                itr, ite = (tr[i] for i in inner.train_test(j))
                for spec in cfg.classifiers:
                    cid = spec.classifier_id
                    labels = zoo.train(spec, X[itr], y[itr], self.K).predict(X[ite])
                    per_inner[cid].append(float(np.mean(labels == y[ite])))
                    self._record("validation", bid, cid, s, j, ite, labels)
            for cid, accs in per_inner.items():
                val[cid].append(_fmean(accs))
        self.member_out[bid] = outs
        self.val_acc[bid] = val
        self.timings["train"][bid] = train_t
        self.timings["predict"][bid] = pred_t

    def _select(self):
        cfg = self.cfg
        test_cells, val_cells = {}, {}
        for bid, outs in self.member_out.items():
            for cid, per_split in outs.items():
                test_cells[(cid, bid)] = _fmean(
                    float(np.mean(lab == self.y[te])) for (lab, _, _), (_, te) in zip(per_split, self.splits))
                if not cfg.hpf.paper_faithful:
                    val_cells[(cid, bid)] = _fmean(self.val_acc[bid][cid])
        cids = [c.classifier_id for c in cfg.classifiers]
        self.test_board = build_leaderboard(test_cells, cids)
        self.val_board = None if cfg.hpf.paper_faithful else build_leaderboard(val_cells, cids)
        self.board = self.test_board if cfg.hpf.paper_faithful else self.val_board
        self.selections = {
            spec.backbone_id: select_top_k(self.board, cfg.hpf.top_k, cfg.hpf.criterion,
                                           backbone=spec.backbone_id, decimals=cfg.hpf.score_decimals)
            for spec in cfg.backbones
        }

    def _ensembles(self):
        cfg = self.cfg
        weights = cfg.ensemble.weights or [1.0] * cfg.hpf.top_k
        names = cfg.label_map.names
        self.ens_acc = {m: {} for m in cfg.ensemble.modes}
        self.ens_metrics = {}
        self.ens_pooled = {}
        for spec in cfg.backbones:
            bid = spec.backbone_id
            members = self.selections[bid].selected
            self.ens_metrics[bid] = {}
            for mode in cfg.ensemble.modes:
                pred = np.full(len(self.y), -1, dtype=np.int64)
                probs = np.zeros((len(self.y), self.K))
                split_bundles, total_time = [], 0.0
                for s, (_, te) in enumerate(self.splits):
                    outs = [self.member_out[bid][cid][s] for cid in members]
                    start = time.perf_counter()
                    labels, p = combine(mode, [o[0] for o in outs], [o[1] for o in outs], weights, self.K)
                    elapsed = time.perf_counter() - start + sum(o[2] for o in outs)
                    total_time += elapsed
                    pred[te], probs[te] = labels, p
                    split_bundles.append(evaluate(self.y[te], labels, p, self.K, elapsed, names))
                    self._record("test", bid, f"ensemble_{mode}", s, -1, te, labels)
                idx = np.concatenate([te for _, te in self.splits])
                self.ens_acc[mode][bid] = _fmean(b.accuracy for b in split_bundles)
                self.ens_metrics[bid][mode] = evaluate(self.y[idx], pred[idx], probs[idx], self.K, total_time, names)
                self.ens_pooled[(bid, mode)] = (idx, pred, probs, split_bundles)
            self.timings["predict"][bid].update(
                {f"ensemble_{m}": self.ens_metrics[bid][m].prediction_time for m in cfg.ensemble.modes})

    def _choose(self):
        cfg = self.cfg
        decimals = cfg.hpf.score_decimals
        best_mode = {}
        for spec in cfg.backbones:
            bid = spec.backbone_id
            best_mode[bid] = max(cfg.ensemble.modes,
                                 key=lambda m: (rank_score(self.ens_acc[m][bid], decimals), m == "soft"))
        best, best_score = None, None
        for spec in cfg.backbones:
            score = rank_score(self.ens_acc[best_mode[spec.backbone_id]][spec.backbone_id], decimals)
            if best_score is None or score > best_score:
                best, best_score = spec.backbone_id, score
        self.chosen_backbone, self.chosen_mode = best, best_mode[best]
        idx, pred, probs, split_bundles = self.ens_pooled[(best, self.chosen_mode)]
        self.final = self.ens_metrics[best][self.chosen_mode]
        self.cv_folds = split_bundles
        self.final_rows = (idx, pred, probs)

    def _final_bundle(self):
        cfg = self.cfg
        bid = self.chosen_backbone
        dev = np.arange(len(self.y)) if cfg.evaluation.mode == "kfold" else self.splits[0][0]
        X = self.features[bid].values
        by_id = {c.classifier_id: c for c in cfg.classifiers}
        members = [zoo.train(by_id[cid], X[dev], self.y[dev], self.K) for cid in self.selections[bid].selected]
        model = EnsembleModel(members, cfg.ensemble.weights, self.chosen_mode)
        spec = next(b for b in cfg.backbones if b.backbone_id == bid)
        write_bundle(self.out / "bundle", model, spec, cfg.preprocess, cfg.label_map, self.manifest.dataset_id)

    def _result(self) -> ExperimentResult:
        cfg = self.cfg
        return ExperimentResult(
            config=cfg.to_dict(),
            provenance={
                "config_hash": cfg.result_hash(),
                "dataset_id": self.manifest.dataset_id,
                "n_samples": len(self.y),
                "class_counts": self.manifest.class_counts,
                "seed": cfg.seed,
                "split_seed": self.split_seed,
                "n_skipped": len(self.manifest.skipped),
                "classifier_seeds": {c.classifier_id: c.seed for c in cfg.classifiers},
            },
            feature_shapes={b: list(fm.shape) for b, fm in self.features.items()},
            leaderboard=self.board,
            test_leaderboard=self.test_board,
            validation_leaderboard=self.val_board,
            selections=self.selections,
            selection=self.selections[self.chosen_backbone],
            ensemble_accuracy=self.ens_acc,
            ensemble_metrics=self.ens_metrics,
            chosen_mode=self.chosen_mode,
            chosen_backbone=self.chosen_backbone,
            final_metrics=self.final,
            cv_folds=self.cv_folds,
            cv_aggregate=aggregate(self.cv_folds),
            timings=self.timings,
        )

    def _persist(self, result: ExperimentResult):
        _dump_json(result.to_dict(), self.out / "result.json")
        _dump_json(result.summary_dict(), self.out / "summary.json")
        save_config(self.cfg, self.out / "config.yaml")
        with open(self.out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "backbone", "model", "outer_fold", "inner_fold", "index", "actual", "predicted"])
            for stage, bid, model, outer, inner, idx, pred in self.records:
                for i, p in zip(idx.tolist(), pred.tolist()):
                    w.writerow([stage, bid, model, outer, inner, i, int(self.y[i]), p])
        idx, pred, probs = self.final_rows
        names = self.cfg.label_map.names
        with open(self.out / "final_predictions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "path", "outer_fold", "actual", "predicted", *[f"p_{n}" for n in names]])
            for i in idx.tolist():
                w.writerow([i, self.manifest.samples[i][0], int(self.test_fold[i]), int(self.y[i]), int(pred[i]),
                            *[repr(float(v)) for v in probs[i]]])


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Execute the whole pipeline and persist its outputs under ``config.output_dir``.

    Errors surface as ``StageError`` naming the failing stage; a
    ``FAILED.json`` marker is left in the output directory.
    """
    return _Run(config).run()


# --------------------------------------------------------------------------
# deployment bundle: <dir>/{bundle.json, checksums.json, ensemble/}


def write_bundle(bundle_dir, model: EnsembleModel, backbone: BackboneSpec, preprocess: PreprocessConfig,
                 label_map: LabelMap, dataset_id: str) -> Path:
    bundle = Path(bundle_dir)
    bundle.mkdir(parents=True, exist_ok=True)
    save_ensemble(model, bundle / "ensemble", label_map)
    doc = {
        "backbone": backbone.to_dict(),
        "preprocess": preprocess.to_dict(),
        "label_map": label_map.to_list(),
        "dataset_id": dataset_id,
        "mode": model.mode,
        "members": model.member_ids,
    }
    _dump_json(doc, bundle / "bundle.json")
    digest = hashlib.sha256((bundle / "bundle.json").read_bytes()).hexdigest()
    _dump_json({"bundle.json": digest}, bundle / "checksums.json")
    return bundle


def load_bundle(bundle_dir):
    bundle = Path(bundle_dir)
    try:
        sums = json.loads((bundle / "checksums.json").read_text(encoding="utf-8"))
        raw = (bundle / "bundle.json").read_bytes()
        if hashlib.sha256(raw).hexdigest() != sums["bundle.json"]:
            raise BundleError(f"{bundle / 'bundle.json'} does not match its recorded checksum")
        doc = json.loads(raw)
        spec = BackboneSpec.from_dict(doc["backbone"])
        pre = PreprocessConfig(**doc["preprocess"])
        label_map = LabelMap.from_list(doc["label_map"])
    except BundleError:
        raise
    except (OSError, ValueError, KeyError, TypeError, ConfigError) as e:
        raise BundleError(f"unreadable bundle {bundle}: {e}") from e
    ensemble = load_ensemble(bundle / "ensemble")
    if ensemble.n_classes != len(label_map):
        raise BundleError("ensemble and label map disagree on the number of classes")
    return spec, pre, label_map, ensemble


def predict_single(bundle_dir, image_path) -> tuple[str, np.ndarray, float]:
    """Classify one image with a saved bundle: (class name, probabilities, seconds)."""
    spec, pre, label_map, ensemble = load_bundle(bundle_dir)
    backbone = load_backbone(spec)
    start = time.perf_counter()
    pixels = preprocess_image(image_path, pre.channel_order, pre.size, pre.interpolation)
    sample = ImageSample(Path(image_path), pixels, -1, "")
    fm = extract_features(spec, [sample], 1, backbone=backbone)
    labels, probs = ensemble_predict(ensemble, fm.values)
    elapsed = time.perf_counter() - start
    return label_map.name_of(int(labels[0])), probs[0], elapsed
