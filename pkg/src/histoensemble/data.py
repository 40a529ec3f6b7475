"""Dataset ingestion, preprocessing, and deterministic stratified splits.

Layout on disk is ``root/<class_name>/*.{jpeg,jpg,png}``. The canonical
in-memory image is a 128x128x3 float32 RGB tensor with values in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import cv2
import numpy as np
from PIL import Image

from .errors import (
    ChannelError,
    ConfigError,
    DataError,
    DecodeError,
    EmptyClass,
    FoldError,
    LabelError,
    MissingClassDir,
    TooFewSamples,
)

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpeg", ".jpg", ".png")
IMAGE_SIZE = 128
CHANNEL_ORDERS = ("RGB", "BGR")
INTERPOLATIONS = {"bilinear": cv2.INTER_LINEAR, "nearest": cv2.INTER_NEAREST}


@dataclass(frozen=True)
class LabelMap:
    """Ordered class_name -> label_id mapping with ids 0..K-1.

    The order of ``entries`` is the label-id order and is what every
    lowest-label-id tie-break downstream refers to.
    """

    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        entries = tuple((str(n), int(i)) for n, i in self.entries)
        object.__setattr__(self, "entries", tuple(sorted(entries, key=lambda e: e[1])))
        names = [n for n, _ in self.entries]
        ids = [i for _, i in self.entries]
        if not names:
            raise ConfigError("label map is empty")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate class names in label map: {names}")
        if ids != list(range(len(ids))):
            raise ConfigError(f"label ids must be 0..K-1 without gaps, got {ids}")

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "LabelMap":
        return cls(tuple((n, i) for i, n in enumerate(names)))

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def id_of(self, name: str) -> int:
        for n, i in self.entries:
            if n == name:
                return i
        raise LabelError(f"unknown class {name!r}")

    def name_of(self, label_id: int) -> str:
        if not 0 <= label_id < len(self.entries):
            raise LabelError(f"label id {label_id} outside 0..{len(self.entries) - 1}")
        return self.entries[label_id][0]

    def to_list(self) -> list[list]:
        return [[n, i] for n, i in self.entries]

    @classmethod
    def from_list(cls, items) -> "LabelMap":
        return cls(tuple((n, i) for n, i in items))


# Label tables for LC25000. The combined map appends the colon classes after
# the lung classes.
LUNG_LABELS = LabelMap.from_names(["lung_aca", "lung_n", "lung_scc"])
COLON_LABELS = LabelMap.from_names(["colon_aca", "colon_n"])
LUNG_COLON_LABELS = LabelMap.from_names(
    ["lung_aca", "lung_n", "lung_scc", "colon_aca", "colon_n"]
)
PRESET_LABEL_MAPS = {"lung": LUNG_LABELS, "colon": COLON_LABELS, "lung_colon": LUNG_COLON_LABELS}


@dataclass(frozen=True)
class ImageSample:
    path: Path
    pixels: np.ndarray
    label_id: int
    class_name: str


@dataclass
class DatasetManifest:
    root: Path
    label_map: LabelMap
    samples: list[tuple[str, int]]  # (path relative to root, label_id), sorted by path
    class_counts: dict[str, int]
    dataset_id: str
    skipped: list[dict] = field(default_factory=list)
    content_digest: str = ""  # covers file bytes; dataset_id covers only names and labels

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.samples], dtype=np.int64)

    def abspath(self, i: int) -> Path:
        return self.root / self.samples[i][0]

    def to_dict(self) -> dict:
        return {
            "root": str(self.root),
            "label_map": self.label_map.to_list(),
            "samples": [{"path": p, "label_id": lab} for p, lab in self.samples],
            "class_counts": dict(self.class_counts),
            "dataset_id": self.dataset_id,
            "content_digest": self.content_digest,
            "n_skipped": len(self.skipped),
        }

    @classmethod
    def from_dict(cls, d: dict, root: Path | None = None) -> "DatasetManifest":
        samples = [(s["path"], int(s["label_id"])) for s in d["samples"]]
        m = cls(
            root=Path(root if root is not None else d["root"]),
            label_map=LabelMap.from_list(d["label_map"]),
            samples=samples,
            class_counts={k: int(v) for k, v in d["class_counts"].items()},
            dataset_id=d["dataset_id"],
            content_digest=d.get("content_digest", ""),
        )
        if m.dataset_id != compute_dataset_id(samples):
            raise DataError("manifest dataset_id does not match its sample list")
        return m


def compute_dataset_id(samples: Iterable[tuple[str, int]]) -> str:
    """sha256 over the sorted (relative posix path, label_id) list."""
    h = hashlib.sha256()
    for path, label in sorted((str(p), int(lab)) for p, lab in samples):
        h.update(json.dumps([path, label]).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def compute_content_digest(root: Path, samples: Iterable[tuple[str, int]]) -> str:
    """sha256 over sorted (relative path, label_id, file sha256) triples."""
    h = hashlib.sha256()
    for rel, label in sorted((str(p), int(lab)) for p, lab in samples):
        file_hash = hashlib.sha256((Path(root) / rel).read_bytes()).hexdigest()
        h.update(json.dumps([rel, label, file_hash]).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def _readable(path: Path) -> str | None:
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as e:  # PIL raises a zoo of types for bad files
        return f"{type(e).__name__}: {e}"
    return None


def scan_dataset(root_dir, label_map: LabelMap, verify: bool = True) -> DatasetManifest:
    """Inventory ``root_dir/<class_name>/`` for every class in ``label_map``.

    Unreadable files are skipped, logged, and recorded in ``manifest.skipped``.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise MissingClassDir(f"dataset root {root} does not exist")
    samples: list[tuple[str, int]] = []
    skipped: list[dict] = []
    counts: dict[str, int] = {}
    for name, label in label_map.entries:
        class_dir = root / name
        if not class_dir.is_dir():
            raise MissingClassDir(f"class directory {class_dir} is missing")
        files = sorted(
            f for f in os.listdir(class_dir)
            if f.lower().endswith(IMAGE_EXTENSIONS) and (class_dir / f).is_file()
        )
        kept = 0
        for f in files:
            rel = f"{name}/{f}"
            if verify:
                problem = _readable(class_dir / f)
                if problem is not None:
                    log.warning("skipping unreadable image %s (%s)", rel, problem)
                    skipped.append({"path": rel, "label_id": label, "reason": problem})
                    continue
            samples.append((rel, label))
            kept += 1
        if kept == 0:
            raise EmptyClass(f"class directory {class_dir} holds no readable images")
        counts[name] = kept
    samples.sort()
    return DatasetManifest(
        root=root,
        label_map=label_map,
        samples=samples,
        class_counts=counts,
        dataset_id=compute_dataset_id(samples),
        skipped=skipped,
        content_digest=compute_content_digest(root, samples),
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path, root=None) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), root=root)


def write_skip_report(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in manifest.skipped:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    size: int = IMAGE_SIZE
    channel_order: str = "BGR"
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.channel_order not in CHANNEL_ORDERS:
            raise ConfigError(f"channel_order must be one of {CHANNEL_ORDERS}")
        if self.interpolation not in INTERPOLATIONS:
            raise ConfigError(f"interpolation must be one of {sorted(INTERPOLATIONS)}")
        if self.size < 1:
            raise ConfigError("size must be positive")

    def to_dict(self) -> dict:
        return {"size": self.size, "channel_order": self.channel_order, "interpolation": self.interpolation}

    def digest(self) -> str:
        # the decoder's channel order does not change the canonical tensor
        payload = {"size": self.size, "interpolation": self.interpolation, "scale": "div255", "order": "RGB"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _decode(path: Path, source_channel_order: str) -> np.ndarray:
    if source_channel_order == "BGR":
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise DecodeError(f"cannot decode {path}")
        if raw.ndim != 3 or raw.shape[2] != 3:
            raise ChannelError(f"{path}: expected 3 channels, got shape {raw.shape}")
        return raw
    if source_channel_order == "RGB":
        try:
            with Image.open(path) as im:
                im.load()
                if im.mode != "RGB":
                    raise ChannelError(f"{path}: expected an RGB image, got mode {im.mode}")
                return np.asarray(im)
        except ChannelError:
            raise
        except Exception as e:
            raise DecodeError(f"cannot decode {path}: {e}") from e
    raise ConfigError(f"unknown channel order {source_channel_order!r}")


def to_canonical(raw: np.ndarray, source_channel_order: str, size: int = IMAGE_SIZE,
                 interpolation: str = "bilinear") -> np.ndarray:
    """Resize, reorder to RGB, and scale a decoded HxWx3 raster into [0, 1]."""
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ChannelError(f"expected HxWx3, got {raw.shape}")
    img = raw.astype(np.float32)
    # per-channel resize; commutes with the channel swap below
    img = cv2.resize(img, (size, size), interpolation=INTERPOLATIONS[interpolation])
    if source_channel_order == "BGR":
        img = img[:, :, ::-1]
    img = np.clip(img / 255.0, 0.0, 1.0)
    return np.ascontiguousarray(img, dtype=np.float32)


def preprocess_image(path, source_channel_order: str = "BGR", size: int = IMAGE_SIZE,
                     interpolation: str = "bilinear") -> np.ndarray:
    """Decode ``path`` and return its canonical 128x128x3 RGB tensor in [0, 1].

    ``source_channel_order`` names the decoder: ``"BGR"`` uses OpenCV, whose
    buffers are BGR and get swapped exactly once; ``"RGB"`` uses Pillow.
    """
    path = Path(path)
    if not path.is_file():
        raise DecodeError(f"no such file {path}")
    return to_canonical(_decode(path, source_channel_order), source_channel_order, size, interpolation)


def iter_samples(manifest: DatasetManifest, config: PreprocessConfig | None = None,
                 indices: Sequence[int] | None = None) -> Iterator[ImageSample]:
    """Lazily preprocess manifest entries in manifest order."""
    config = config or PreprocessConfig()
    idx = range(len(manifest)) if indices is None else indices
    for i in idx:
        rel, label = manifest.samples[i]
        path = manifest.root / rel
        pixels = preprocess_image(path, config.channel_order, config.size, config.interpolation)
        yield ImageSample(path, pixels, label, manifest.label_map.name_of(label))


# --------------------------------------------------------------------------
# splits and folds


def _class_indices(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def _labels_of(manifest_or_labels) -> np.ndarray:
    if isinstance(manifest_or_labels, DatasetManifest):
        return manifest_or_labels.labels
    return np.asarray(manifest_or_labels, dtype=np.int64)


def stratified_split(manifest, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled holdout split.

    Each class contributes ``floor(train_fraction * count + 0.5)`` samples to
    train (round half up), clamped so both sides keep at least one sample.
    Accepts a manifest or a bare label vector.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    labels = _labels_of(manifest)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c, idx in _class_indices(labels).items():
        if len(idx) < 2:
            raise TooFewSamples(f"class {c} has {len(idx)} sample(s); need at least 2")
        n_train = int(np.floor(train_fraction * len(idx) + 0.5))
        n_train = min(max(n_train, 1), len(idx) - 1)
        perm = idx[rng.permutation(len(idx))]
        train.append(perm[:n_train])
        test.append(perm[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[np.ndarray, ...]
    seed: int

    def train_test(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        test = self.folds[i]
        train = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return train, test

    def fold_of(self, n: int) -> np.ndarray:
        out = np.full(n, -1, dtype=np.int64)
        for i, f in enumerate(self.folds):
            out[f] = i
        return out

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "folds": [f.tolist() for f in self.folds]}


def make_folds(manifest, k: int, seed: int) -> FoldPlan:
    """Stratified k-fold partition.

    Classes are shuffled independently and concatenated in label order; the
    i-th entry of that sequence goes to fold ``i mod k``. Per-class counts per
    fold therefore differ by at most one, and so do total fold sizes.
    """
    if k < 2:
        raise FoldError(f"k must be at least 2, got {k}")
    labels = _labels_of(manifest)
    groups = _class_indices(labels)
    smallest = min(len(v) for v in groups.values())
    if k > smallest:
        raise FoldError(f"k={k} exceeds the smallest class count {smallest}")
    rng = np.random.default_rng(seed)
    order = np.concatenate([idx[rng.permutation(len(idx))] for _, idx in sorted(groups.items())])
    assignment = np.arange(len(order)) % k
    folds = tuple(np.sort(order[assignment == f]) for f in range(k))
    return FoldPlan(k=k, folds=folds, seed=seed)
