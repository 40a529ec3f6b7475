import hashlib
import json
import os
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from histoensemble import data as data_mod
from histoensemble.data import (
    COLON_LABELS,
    LUNG_COLON_LABELS,
    LUNG_LABELS,
    LabelMap,
    PreprocessConfig,
    compute_dataset_id,
    iter_samples,
    load_manifest,
    make_folds,
    preprocess_image,
    save_manifest,
    scan_dataset,
    stratified_split,
    write_skip_report,
)
from histoensemble.errors import (
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

from .conftest import write_png


# -- label maps ---------------------------------------------------------------


def test_label_map_ids_are_contiguous():
    assert LUNG_LABELS.names == ["lung_aca", "lung_n", "lung_scc"]
    assert COLON_LABELS.names == ["colon_aca", "colon_n"]
    assert LUNG_COLON_LABELS.names == ["lung_aca", "lung_n", "lung_scc", "colon_aca", "colon_n"]
    assert LUNG_LABELS.id_of("lung_scc") == 2
    assert LUNG_LABELS.name_of(1) == "lung_n"


def test_label_map_rejects_gaps_and_duplicates():
    with pytest.raises(ConfigError):
        LabelMap((("a", 0), ("b", 2)))
    with pytest.raises(ConfigError):
        LabelMap.from_names(["a", "a"])
    with pytest.raises(LabelError):
        LUNG_LABELS.name_of(3)


def test_label_map_list_round_trip():
    assert LabelMap.from_list(LUNG_COLON_LABELS.to_list()) == LUNG_COLON_LABELS


# -- scanning -------------------------------------------------------------------


def _tree(root, counts):
    rng = np.random.default_rng(0)
    for name, n in counts.items():
        for i in range(n):
            write_png(root / name / f"{i:03d}.png", rng.integers(0, 256, size=(6, 6, 3)))
    return root


def test_scan_counts_and_sorted_samples(tmp_path):
    root = _tree(tmp_path, {"a": 3, "b": 2, "c": 4})
    m = scan_dataset(root, LabelMap.from_names(["a", "b", "c"]))
    assert m.class_counts == {"a": 3, "b": 2, "c": 4}
    assert sum(m.class_counts.values()) == len(m) == 9
    assert [p for p, _ in m.samples] == sorted(p for p, _ in m.samples)
    assert set(m.labels.tolist()) == {0, 1, 2}


def test_scan_missing_class_dir(tmp_path):
    _tree(tmp_path, {"a": 1})
    with pytest.raises(MissingClassDir):
        scan_dataset(tmp_path, LabelMap.from_names(["a", "b"]))


def test_scan_missing_root(tmp_path):
    with pytest.raises(MissingClassDir):
        scan_dataset(tmp_path / "nope", LabelMap.from_names(["a"]))


def test_scan_empty_class(tmp_path):
    _tree(tmp_path, {"a": 1})
    (tmp_path / "b").mkdir()
    (tmp_path / "b" / "notes.txt").write_text("x")
    with pytest.raises(EmptyClass):
        scan_dataset(tmp_path, LabelMap.from_names(["a", "b"]))


def test_scan_skips_and_reports_corrupt_files(tmp_path):
    _tree(tmp_path, {"a": 2, "b": 2})
    (tmp_path / "b" / "broken.png").write_bytes(b"not an image at all")
    m = scan_dataset(tmp_path, LabelMap.from_names(["a", "b"]))
    assert len(m) == 4
    assert [s["path"] for s in m.skipped] == ["b/broken.png"]
    report = tmp_path / "skipped.jsonl"
    write_skip_report(m, report)
    lines = [json.loads(x) for x in report.read_text().splitlines()]
    assert lines[0]["path"] == "b/broken.png" and lines[0]["label_id"] == 1


def test_scan_is_enumeration_order_independent(tmp_path, monkeypatch):
    root = _tree(tmp_path, {"a": 5, "b": 5})
    lm = LabelMap.from_names(["a", "b"])
    first = scan_dataset(root, lm)
    real = os.listdir

    def shuffled(path):
        items = real(path)
        random.Random(7).shuffle(items)
        return items[::-1]

    monkeypatch.setattr(data_mod.os, "listdir", shuffled)
    second = scan_dataset(root, lm)
    assert second.samples == first.samples
    assert second.dataset_id == first.dataset_id


def test_dataset_id_oracle():
    samples = [("b/2.png", 1), ("a/1.png", 0)]
    lines = "".join(json.dumps(list(s)) + "\n" for s in sorted(samples))
    assert compute_dataset_id(samples) == hashlib.sha256(lines.encode()).hexdigest()


def test_manifest_round_trip_and_tamper_check(tmp_path):
    root = _tree(tmp_path / "d", {"a": 2, "b": 2})
    m = scan_dataset(root, LabelMap.from_names(["a", "b"]))
    save_manifest(m, tmp_path / "m.json")
    back = load_manifest(tmp_path / "m.json")
    assert back.samples == m.samples and back.dataset_id == m.dataset_id
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["samples"][0]["label_id"] = 1
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(DataError):
        load_manifest(tmp_path / "m.json")


# -- preprocessing --------------------------------------------------------------


@pytest.mark.parametrize("value, expected", [(255, 1.0), (0, 0.0)])
@pytest.mark.parametrize("order", ["BGR", "RGB"])
def test_uniform_intensity_scaling(tmp_path, value, expected, order):
    path = write_png(tmp_path / "u.png", np.full((40, 30, 3), value))
    x = preprocess_image(path, order)
    assert x.shape == (128, 128, 3) and x.dtype == np.float32
    assert np.all(x == expected)


def test_bgr_and_rgb_decoders_agree(tmp_path):
    rng = np.random.default_rng(5)
    rgb = rng.integers(0, 256, size=(50, 70, 3))
    rgb[..., 0] = 250  # strong red channel makes a missing swap obvious
    path = write_png(tmp_path / "c.png", rgb)
    a = preprocess_image(path, "BGR")
    b = preprocess_image(path, "RGB")
    np.testing.assert_array_equal(a, b)
    assert a[..., 0].mean() > 0.9


def test_canonical_order_is_rgb(tmp_path):
    path = write_png(tmp_path / "red.png", np.tile([255, 0, 0], (8, 8, 1)))
    x = preprocess_image(path, "BGR")
    assert x[..., 0].min() == 1.0 and x[..., 1:].max() == 0.0


def test_decode_errors(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"garbage")
    for order in ("BGR", "RGB"):
        with pytest.raises(DecodeError):
            preprocess_image(bad, order)
        with pytest.raises(DecodeError):
            preprocess_image(tmp_path / "missing.png", order)


def test_channel_errors(tmp_path):
    gray = tmp_path / "g.png"
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8), "L").save(gray)
    rgba = tmp_path / "a.png"
    Image.fromarray(np.zeros((8, 8, 4), dtype=np.uint8), "RGBA").save(rgba)
    for path in (gray, rgba):
        for order in ("BGR", "RGB"):
            with pytest.raises(ChannelError):
                preprocess_image(path, order)


def test_preprocess_config_validation():
    with pytest.raises(ConfigError):
        PreprocessConfig(channel_order="XYZ")
    with pytest.raises(ConfigError):
        PreprocessConfig(interpolation="cubic-spline")
    assert PreprocessConfig(channel_order="BGR").digest() == PreprocessConfig(channel_order="RGB").digest()
    assert PreprocessConfig(size=64).digest() != PreprocessConfig().digest()


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 300), w=st.integers(1, 300), seed=st.integers(0, 2**16))
def test_preprocessed_pixels_in_unit_range(h, w, seed):
    raw = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3)).astype(np.uint8)
    x = data_mod.to_canonical(raw, "BGR")
    assert x.shape == (128, 128, 3)
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_iter_samples_is_lazy_and_ordered(small_tree, abc_labels):
    m = scan_dataset(small_tree, abc_labels)
    it = iter_samples(m, indices=[5, 0])
    first = next(it)
    assert first.path == m.abspath(5) and first.label_id == m.samples[5][1]
    assert first.class_name == abc_labels.name_of(first.label_id)
    assert next(it).path == m.abspath(0)


# -- splits and folds -----------------------------------------------------------


def test_colon_holdout_arithmetic():
    labels = np.repeat([0, 1], 1400)
    train, test = stratified_split(labels, 0.8, seed=1)
    assert len(train) == 2240 and len(test) == 560
    assert np.bincount(labels[train]).tolist() == [1120, 1120]
    assert np.bincount(labels[test]).tolist() == [280, 280]
    assert not set(train) & set(test)


def test_half_split_symmetry():
    labels = np.repeat([0, 1], 10)
    train, test = stratified_split(labels, 0.5, seed=2)
    assert np.bincount(labels[train]).tolist() == [5, 5]
    assert np.bincount(labels[test]).tolist() == [5, 5]


def test_split_is_deterministic_and_seed_sensitive():
    labels = np.repeat([0, 1, 2], 30)
    a = stratified_split(labels, 0.8, 9)
    b = stratified_split(labels, 0.8, 9)
    c = stratified_split(labels, 0.8, 10)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])


def test_split_preconditions():
    with pytest.raises(TooFewSamples):
        stratified_split([0, 0, 1], 0.5, 0)
    with pytest.raises(ConfigError):
        stratified_split([0, 0, 1, 1], 1.0, 0)


def test_lung_ten_folds():
    labels = np.repeat([0, 1, 2], 1400)
    plan = make_folds(labels, 10, seed=4)
    assert len(plan.folds) == 10
    for f in plan.folds:
        assert len(f) == 420
        assert np.bincount(labels[f], minlength=3).tolist() == [140, 140, 140]
    everything = np.concatenate(plan.folds)
    assert np.array_equal(np.sort(everything), np.arange(4200))
    again = make_folds(labels, 10, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(plan.folds, again.folds))


def test_fold_preconditions():
    with pytest.raises(FoldError):
        make_folds([0, 0, 1, 1], 1, 0)
    with pytest.raises(FoldError):
        make_folds([0, 0, 1, 1, 1], 3, 0)


def test_fold_train_test_complement():
    plan = make_folds(np.repeat([0, 1], 10), 5, 0)
    train, test = plan.train_test(2)
    assert np.array_equal(np.sort(np.concatenate([train, test])), np.arange(20))
    assert np.array_equal(plan.fold_of(20)[test], np.full(len(test), 2))


@settings(max_examples=60, deadline=None)
@given(
    counts=st.lists(st.integers(2, 40), min_size=2, max_size=5),
    k=st.integers(2, 10),
    seed=st.integers(0, 10_000),
)
def test_fold_partition_properties(counts, k, seed):
    k = min(k, min(counts))
    labels = np.repeat(np.arange(len(counts)), counts)
    rng = np.random.default_rng(seed)
    labels = labels[rng.permutation(len(labels))]
    plan = make_folds(labels, k, seed)
    joined = np.concatenate(plan.folds)
    assert len(joined) == len(labels) and np.array_equal(np.sort(joined), np.arange(len(labels)))
    per_class = np.array([np.bincount(labels[f], minlength=len(counts)) for f in plan.folds])
    assert (per_class.max(axis=0) - per_class.min(axis=0)).max() <= 1
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1


@settings(max_examples=60, deadline=None)
@given(
    counts=st.lists(st.integers(2, 60), min_size=1, max_size=5),
    frac=st.floats(0.05, 0.95),
    seed=st.integers(0, 10_000),
)
def test_split_partition_properties(counts, frac, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    train, test = stratified_split(labels, frac, seed)
    assert np.array_equal(np.sort(np.concatenate([train, test])), np.arange(len(labels)))
    for c, n in enumerate(counts):
        n_train = int(np.sum(labels[train] == c))
        assert 1 <= n_train <= n - 1
        assert abs(n_train - frac * n) <= 0.5 + 1e-9 or n_train in (1, n - 1)
