"""Deep feature extraction from truncated backbones, plus the feature cache.

Real backbones are user-supplied Keras model files (``.keras`` / ``.h5``).
The network is cut at its last pooling layer and the output flattened; a
graph without pooling layers is taken to be headless already and used as-is.
The ``mock`` backbone needs no weights: it pools per-cell mean and variance
on an 8x8 grid and applies a fixed random projection to 256 dimensions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .data import IMAGE_SIZE, ImageSample, PreprocessConfig
from .errors import BackboneLoadError, CacheMiss, ConfigError, NumericError, ShapeError, StaleCache

log = logging.getLogger(__name__)

BACKBONE_IDS = ("vgg16", "vgg19", "mobilenet", "densenet169", "densenet201", "mock")
POOLING_LAYERS = ("MaxPooling2D", "AveragePooling2D", "GlobalAveragePooling2D", "GlobalMaxPooling2D")

# input normalization each ImageNet backbone family was trained with
_NORMALIZATION = {
    "vgg16": "caffe", "vgg19": "caffe", "mobilenet": "tf",
    "densenet169": "torch", "densenet201": "torch", "mock": None,
}
_CAFFE_BGR_MEAN = np.array([103.939, 116.779, 123.68], dtype=np.float32)
_TORCH_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_TORCH_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

MOCK_GRID = 8
MOCK_DIM = 256
MOCK_SEED = 20230417


@dataclass(frozen=True)
class BackboneSpec:
    backbone_id: str
    model_path: str | None = None
    input_shape: tuple[int, int, int] = (IMAGE_SIZE, IMAGE_SIZE, 3)
    normalize: bool = False  # backbone-specific input normalization; off = plain /255

    def __post_init__(self):
        if self.backbone_id not in BACKBONE_IDS:
            raise ConfigError(f"unknown backbone {self.backbone_id!r}; expected one of {BACKBONE_IDS}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.backbone_id != "mock" and not self.model_path:
            raise ConfigError(f"backbone {self.backbone_id} needs a model_path")

    def to_dict(self) -> dict:
        return {"backbone_id": self.backbone_id, "model_path": self.model_path,
                "input_shape": list(self.input_shape), "normalize": self.normalize}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(backbone_id=d["backbone_id"], model_path=d.get("model_path"),
                   input_shape=tuple(d.get("input_shape", (IMAGE_SIZE, IMAGE_SIZE, 3))),
                   normalize=bool(d.get("normalize", False)))


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n, d) float32, rows in manifest order
    backbone_id: str
    dataset_id: str
    labels: np.ndarray
    preprocess_hash: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2 or len(self.values) != len(self.labels):
            raise ShapeError(f"values {self.values.shape} do not align with {len(self.labels)} labels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def key(self) -> "CacheKey":
        return CacheKey(self.dataset_id, self.backbone_id, self.preprocess_hash)


def normalize_batch(x: np.ndarray, backbone_id: str) -> np.ndarray:
    """Apply the ImageNet normalization of ``backbone_id`` to RGB input in [0, 1]."""
    mode = _NORMALIZATION[backbone_id]
    if mode == "caffe":
        return x[..., ::-1] * 255.0 - _CAFFE_BGR_MEAN
    if mode == "tf":
        return x * 2.0 - 1.0
    if mode == "torch":
        return (x - _TORCH_MEAN) / _TORCH_STD
    return x


class MockBackbone:
    """Weight-free stand-in: fixed projection of per-cell mean/variance."""

    def __init__(self, input_shape=(IMAGE_SIZE, IMAGE_SIZE, 3)):
        h, w, c = input_shape
        if h % MOCK_GRID or w % MOCK_GRID:
            raise BackboneLoadError(f"mock backbone needs sides divisible by {MOCK_GRID}, got {input_shape}")
        self.input_shape = tuple(input_shape)
        n_stats = MOCK_GRID * MOCK_GRID * c * 2
        rng = np.random.default_rng(MOCK_SEED)
        self.projection = rng.standard_normal((n_stats, MOCK_DIM)) / np.sqrt(n_stats)
        self.feature_dim = MOCK_DIM

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        h, w, c = self.input_shape
        x = np.asarray(batch, dtype=np.float64).reshape(
            len(batch), MOCK_GRID, h // MOCK_GRID, MOCK_GRID, w // MOCK_GRID, c)
        mean = x.mean(axis=(2, 4))
        var = x.var(axis=(2, 4))
        stats = np.concatenate([mean.reshape(len(batch), -1), var.reshape(len(batch), -1)], axis=1)
        return (stats @ self.projection).astype(np.float32)


class KerasBackbone:
    def __init__(self, model_path: str, input_shape):
        try:
            from tensorflow import keras
        except ImportError as e:
            raise BackboneLoadError("Keras backbones need tensorflow (pip install 'artifact[keras]')") from e
        path = Path(model_path)
        if not path.is_file():
            raise BackboneLoadError(f"model file {path} not found")
        try:
            model = keras.models.load_model(path, compile=False)
        except Exception as e:
            raise BackboneLoadError(f"cannot load {path}: {e}") from e
        self.cut_layer = None
        for layer in model.layers:
            if type(layer).__name__ in POOLING_LAYERS:
                self.cut_layer = layer.name
        out = model.get_layer(self.cut_layer).output if self.cut_layer else model.outputs[0]
        inputs = model.inputs[0] if len(model.inputs) == 1 else model.inputs
        self.model = keras.Model(inputs, out)
        expected = tuple(self.model.input_shape[1:])
        if len(expected) != 3 or any(e is not None and e != g for e, g in zip(expected, input_shape)):
            raise BackboneLoadError(f"model expects input {expected}, pipeline produces {tuple(input_shape)}")
        self.input_shape = tuple(input_shape)
        shape = tuple(self.model.output_shape[1:])
        if any(s is None for s in shape):
            shape = self(np.zeros((1, *input_shape), np.float32)).shape[1:]
        self.output_shape = shape
        self.feature_dim = int(np.prod(shape))

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        out = self.model(np.asarray(batch, dtype=np.float32), training=False)
        out = np.asarray(out)
        return out.reshape(len(out), -1).astype(np.float32)


def load_backbone(spec: BackboneSpec):
    if spec.backbone_id == "mock":
        return MockBackbone(spec.input_shape)
    return KerasBackbone(spec.model_path, spec.input_shape)


def feature_dim(spec: BackboneSpec, backbone=None) -> int:
    return (backbone or load_backbone(spec)).feature_dim


def _batches(samples: Iterable, batch_size: int):
    batch = []
    for s in samples:
        batch.append(s)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def extract_features(spec: BackboneSpec, samples: Iterable[ImageSample], batch_size: int = 32,
                     dataset_id: str = "", preprocess_hash: str = "", backbone=None) -> FeatureMatrix:
    """Run preprocessed samples through the truncated backbone, in order.

    ``samples`` may be a lazy iterator; only one batch of pixels is held at a
    time.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    backbone = backbone or load_backbone(spec)
    rows, labels = [], []
    offset = 0
    for batch in _batches(samples, batch_size):
        x = np.stack([s.pixels for s in batch]).astype(np.float32)
        if x.shape[1:] != spec.input_shape:
            raise ShapeError(f"sample shape {x.shape[1:]} != backbone input {spec.input_shape}")
        if spec.normalize:
            x = normalize_batch(x, spec.backbone_id)
        out = backbone(x)
        bad = ~np.isfinite(out).all(axis=1)
        if bad.any():
            raise NumericError(f"non-finite activation for sample index {offset + int(np.argmax(bad))}")
        rows.append(out)
        labels.extend(s.label_id for s in batch)
        offset += len(batch)
    values = np.concatenate(rows) if rows else np.zeros((0, backbone.feature_dim), np.float32)
    return FeatureMatrix(values, spec.backbone_id, dataset_id, np.array(labels, dtype=np.int64), preprocess_hash)


def _file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def extraction_hash(preprocess: PreprocessConfig, spec: BackboneSpec, content_digest: str = "") -> str:
    """Hash of everything that shapes a feature row besides the sample list.

    Covers the preprocessing chain, the normalization flag, the model file
    bytes (swapping weights under the same path invalidates the cache) and,
    when given, the image bytes via the manifest's ``content_digest``.
    """
    payload = {
        "content": content_digest,
        "preprocess": preprocess.digest(),
        "input_shape": list(spec.input_shape),
        "normalize": spec.normalize,
        "model": _file_digest(spec.model_path) if spec.model_path else "mock-v1",
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# cache: cache/<dataset_id>/<backbone_id>/<preprocess_hash>/{features.bin, meta.json}


class CacheKey(NamedTuple):
    dataset_id: str
    backbone_id: str
    preprocess_hash: str


def cache_path(key: CacheKey, cache_dir) -> Path:
    return Path(cache_dir) / key.dataset_id / key.backbone_id / key.preprocess_hash


def cache_features(matrix: FeatureMatrix, cache_dir) -> CacheKey:
    """Write ``matrix`` atomically (temp dir then rename) and return its key."""
    key = matrix.key
    final = cache_path(key, cache_dir)
    final.parent.mkdir(parents=True, exist_ok=True)
    n, d = matrix.shape
    meta = {
        "n": n, "d": d, "dtype": "float32", "byte_order": "little", "layout": "row-major",
        "backbone_id": key.backbone_id, "dataset_id": key.dataset_id,
        "preprocess_hash": key.preprocess_hash,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "labels": matrix.labels.tolist(),
    }
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=final.parent))
    try:
        matrix.values.astype("<f4").tofile(tmp / "features.bin")
        (tmp / "meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return key


def load_features(key: CacheKey, cache_dir) -> FeatureMatrix:
    key = CacheKey(*key)
    path = cache_path(key, cache_dir)
    if not (path / "meta.json").is_file():
        siblings = path.parent
        if siblings.is_dir() and any(p.is_dir() and not p.name.startswith(".") for p in siblings.iterdir()):
            raise StaleCache(f"cached features for {key.dataset_id}/{key.backbone_id} were built "
                             f"with a different preprocessing hash than {key.preprocess_hash}")
        raise CacheMiss(f"no cached features at {path}")
    meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    if (meta.get("dataset_id"), meta.get("backbone_id"), meta.get("preprocess_hash")) != tuple(key):
        raise StaleCache(f"metadata at {path} does not match requested key {tuple(key)}")
    values = np.fromfile(path / "features.bin", dtype="<f4")
    n, d = int(meta["n"]), int(meta["d"])
    if values.size != n * d or len(meta["labels"]) != n:
        raise StaleCache(f"cache entry {path} is truncated or inconsistent")
    return FeatureMatrix(values.reshape(n, d).astype(np.float32), key.backbone_id, key.dataset_id,
                         np.array(meta["labels"], dtype=np.int64), key.preprocess_hash)
