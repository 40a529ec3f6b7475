"""High-Performance Filtering (top-k by accuracy) and hard/soft voting.

Scores are compared after rounding to ``SCORE_DECIMALS`` places, the
0.01 % resolution accuracies are reported at; classifiers that tie at that
resolution are ordered by registry position (RF, SVM, LR, MLP, XGB, LGB).
Votes tie-break toward the lowest label id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .classifiers import REGISTRY, TrainedModel, load_model, save_model
from .errors import (
    BundleError,
    DataError,
    EnsembleError,
    IncompleteGrid,
    LabelError,
    SelectionError,
    ShapeError,
    WeightError,
)

SCORE_DECIMALS = 4
CRITERIA = ("average_across_backbones", "per_backbone")
MODES = ("hard", "soft")


def rank_score(score: float, decimals: int | None = SCORE_DECIMALS) -> float:
    return float(score) if decimals is None else round(float(score), decimals)


@dataclass
class Leaderboard:
    cells: dict[tuple[str, str], float]
    row_averages: dict[str, float]
    backbones: list[str]

    @property
    def classifiers(self) -> list[str]:
        return list(self.row_averages)

    def cell(self, classifier_id: str, backbone_id: str) -> float | None:
        return self.cells.get((classifier_id, backbone_id))

    def to_dict(self) -> dict:
        return {
            "backbones": list(self.backbones),
            "cells": [[c, b, a] for (c, b), a in self.cells.items()],
            "row_averages": dict(self.row_averages),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Leaderboard":
        averages = {k: float(d["row_averages"][k]) for k in sorted(d["row_averages"], key=_registry_key)}
        return cls({(c, b): float(a) for c, b, a in d["cells"]}, averages, list(d["backbones"]))


def _registry_key(cid: str):
    return (REGISTRY.index(cid) if cid in REGISTRY else len(REGISTRY), cid)


def build_leaderboard(results: Mapping, classifiers: Sequence[str] = REGISTRY) -> Leaderboard:
    """Grid of accuracies with per-classifier arithmetic means.

    ``results`` maps ``(classifier_id, backbone_id) -> accuracy`` (fractions).
    Every classifier in ``classifiers`` needs at least one cell.
    """
    cells: dict[tuple[str, str], float] = {}
    backbones: list[str] = []
    for (cid, bid), acc in results.items():
        acc = float(acc)
        if not 0.0 <= acc <= 1.0:
            raise DataError(f"accuracy {acc} for ({cid}, {bid}) is outside [0, 1]")
        cells[(cid, bid)] = acc
        if bid not in backbones:
            backbones.append(bid)
    averages = {}
    order = sorted({c for c, _ in cells}, key=_registry_key)
    for cid in classifiers:
        if cid not in order:
            raise IncompleteGrid(f"classifier {cid} has no leaderboard cell")
    for cid in order:
        row = [cells[(cid, b)] for b in backbones if (cid, b) in cells]
        averages[cid] = float(np.mean(row))
    return Leaderboard(cells, averages, backbones)


@dataclass
class HPFSelection:
    selected: list[str]
    top_k: int
    criterion: str
    scores: dict[str, float] = field(default_factory=dict)
    backbone: str | None = None  # set for the per_backbone criterion

    def to_dict(self) -> dict:
        return {"selected": list(self.selected), "top_k": self.top_k, "criterion": self.criterion,
                "scores": dict(self.scores), "backbone": self.backbone}

    @classmethod
    def from_dict(cls, d: dict) -> "HPFSelection":
        return cls(list(d["selected"]), int(d["top_k"]), d["criterion"],
                   {k: float(v) for k, v in d.get("scores", {}).items()}, d.get("backbone"))


def select_top_k(board: Leaderboard, k: int = 3, criterion: str = "average_across_backbones",
                 backbone: str | None = None, decimals: int | None = SCORE_DECIMALS) -> HPFSelection:
    """Keep the ``k`` best classifiers, ordered by score then registry order."""
    if criterion not in CRITERIA:
        raise SelectionError(f"criterion must be one of {CRITERIA}")
    if criterion == "average_across_backbones":
        scores = dict(board.row_averages)
    else:
        if backbone is None:
            raise SelectionError("per_backbone selection needs a backbone")
        scores = {c: a for (c, b), a in board.cells.items() if b == backbone}
    if not 1 <= k <= len(scores):
        raise SelectionError(f"cannot select top {k} of {len(scores)} classifiers")
    ranked = sorted(scores, key=lambda c: (-rank_score(scores[c], decimals), REGISTRY.index(c)))
    chosen = ranked[:k]
    return HPFSelection(chosen, k, criterion, {c: scores[c] for c in chosen},
                        backbone if criterion == "per_backbone" else None)


# --------------------------------------------------------------------------
# voting


def vote_counts(votes, n_classes: int | None = None) -> np.ndarray:
    votes = np.asarray(votes, dtype=np.int64)
    if votes.ndim != 2:
        raise ShapeError(f"votes must be an n x m matrix, got shape {votes.shape}")
    if votes.shape[1] == 0:
        raise EnsembleError("no ensemble members voted")
    if votes.size and votes.min() < 0:
        raise LabelError("negative label in votes")
    k = int(n_classes if n_classes is not None else (votes.max() + 1 if votes.size else 1))
    if votes.size and votes.max() >= k:
        raise LabelError(f"vote label {votes.max()} outside 0..{k - 1}")
    counts = np.zeros((votes.shape[0], k), dtype=np.int64)
    rows = np.repeat(np.arange(votes.shape[0]), votes.shape[1])
    np.add.at(counts, (rows, votes.ravel()), 1)
    return counts


def hard_vote(votes, n_classes: int | None = None) -> np.ndarray:
    """Row-wise modal label; ties go to the lowest label id."""
    return np.argmax(vote_counts(votes, n_classes), axis=1).astype(np.int64)


def _check_weights(weights, m: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (m,):
        raise ShapeError(f"need {m} weights, got shape {w.shape}")
    if not np.isfinite(w).all() or (w < 0).any():
        raise WeightError("weights must be finite and non-negative")
    if w.sum() <= 0:
        raise WeightError("weights sum to zero")
    return w


def weighted_probability_sum(probs: Sequence, weights) -> np.ndarray:
    if len(probs) == 0:
        raise EnsembleError("no ensemble members")
    mats = [np.asarray(p, dtype=np.float64) for p in probs]
    shape = mats[0].shape
    if len(shape) != 2 or any(p.shape != shape for p in mats):
        raise ShapeError(f"member probability shapes differ: {[p.shape for p in mats]}")
    w = _check_weights(weights, len(mats))
    total = np.zeros(shape)
    for wm, p in zip(w, mats):
        total += wm * p
    return total


def soft_vote(probs: Sequence, weights=None) -> np.ndarray:
    """argmax over classes of sum_m w_m * p_m; ties go to the lowest label id."""
    if weights is None:
        weights = np.ones(len(probs))
    return np.argmax(weighted_probability_sum(probs, weights), axis=1).astype(np.int64)


@dataclass
class EnsembleModel:
    members: list[TrainedModel]
    weights: list[float] | None = None
    mode: str = "soft"

    def __post_init__(self):
        if not self.members:
            raise EnsembleError("ensemble needs at least one member")
        if self.mode not in MODES:
            raise EnsembleError(f"mode must be one of {MODES}")
        if self.weights is None:
            self.weights = [1.0] * len(self.members)
        self.weights = [float(w) for w in _check_weights(self.weights, len(self.members))]
        widths = {m.n_features for m in self.members}
        if len(widths) != 1:
            raise ShapeError(f"members were trained on different feature widths {sorted(widths)}")
        if len({m.n_classes for m in self.members}) != 1:
            raise ShapeError("members disagree on the number of classes")

    @property
    def n_classes(self) -> int:
        return self.members[0].n_classes

    @property
    def member_ids(self) -> list[str]:
        return [m.classifier_id for m in self.members]


def ensemble_predict(model: EnsembleModel, features) -> tuple[np.ndarray, np.ndarray]:
    """Committee labels and a probability matrix.

    Soft mode returns sum(w_j p_j) / sum(w_j). Hard mode routes labels through
    ``hard_vote`` and returns each row's vote shares as its probability
    surrogate (their argmax is the hard-vote label).
    """
    if model.mode == "hard":
        return combine(model.mode, [m.predict(features) for m in model.members], None,
                       model.weights, model.n_classes)
    return combine(model.mode, None, [m.predict_proba(features) for m in model.members],
                   model.weights, model.n_classes)


def combine(mode: str, member_labels, member_probs, weights, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Committee output from already-computed member outputs."""
    if mode == "hard":
        votes = np.stack([np.asarray(v) for v in member_labels], axis=1)
        counts = vote_counts(votes, n_classes)
        return np.argmax(counts, axis=1).astype(np.int64), counts / votes.shape[1]
    if mode == "soft":
        labels = soft_vote(member_probs, weights)
        total = weighted_probability_sum(member_probs, weights)
        return labels, total / float(np.sum(weights))
    raise EnsembleError(f"mode must be one of {MODES}")


def save_ensemble(model: EnsembleModel, bundle_dir, label_map=None) -> Path:
    bundle = Path(bundle_dir)
    bundle.mkdir(parents=True, exist_ok=True)
    for member in model.members:
        save_model(member, bundle / "members" / member.classifier_id, label_map)
    doc = {"mode": model.mode, "weights": model.weights, "members": model.member_ids}
    (bundle / "ensemble.json").write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return bundle


def load_ensemble(bundle_dir) -> EnsembleModel:
    bundle = Path(bundle_dir)
    try:
        doc = json.loads((bundle / "ensemble.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise BundleError(f"unreadable ensemble description in {bundle}: {e}") from e
    members = [load_model(bundle / "members" / cid) for cid in doc["members"]]
    return EnsembleModel(members, doc["weights"], doc["mode"])
