import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_uint8
from dcpn.data import (DataError, DatasetSpec, EpisodeSpec, dataset_distance, episode_rng, generate_synthetic_corpus,
                       load_dataset, make_domain_task, sample_episode, write_corpus)


# --- loading ---------------------------------------------------------------------

def test_load_two_classes_of_three(image_tree):
    root = image_tree({"b": [random_uint8((20, 20, 3), i) for i in range(3)],
                       "a": [random_uint8((20, 20, 3), 10 + i) for i in range(3)]})
    ds = load_dataset(DatasetSpec("toy", root), 32)
    assert len(ds) == 6
    assert set(ds.labels.tolist()) == {0, 1}
    assert ds.class_names == ("a", "b")  # lexicographic


def test_load_resizes_and_scales(image_tree):
    root = image_tree({"only": [random_uint8((100, 100, 3))], "other": [random_uint8((100, 100, 3), 1)]})
    ds = load_dataset(DatasetSpec("toy", root), 64)
    s = ds[0]
    assert s.image.shape == (64, 64, 3)
    assert s.image.dtype == np.float32
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_load_exact_scaling_without_resize(image_tree):
    arr = random_uint8((8, 8, 3), 5)
    root = image_tree({"a": [arr], "b": [arr]})
    ds = load_dataset(DatasetSpec("toy", root), 8)
    np.testing.assert_array_equal(ds.images[0], arr.astype(np.float32) / 255.0)


def test_empty_class_is_fatal_and_named(image_tree):
    root = image_tree({"full": [random_uint8((8, 8, 3))]})
    (root / "hollow").mkdir()
    with pytest.raises(DataError, match="hollow"):
        load_dataset(DatasetSpec("toy", root), 8)


def test_missing_root_is_fatal(tmp_path):
    with pytest.raises(DataError):
        load_dataset(DatasetSpec("toy", tmp_path / "nope"), 8)


def test_unreadable_image_skipped_with_warning(image_tree, caplog):
    root = image_tree({"a": [random_uint8((8, 8, 3))], "b": [random_uint8((8, 8, 3), 1)]})
    (root / "a" / "broken.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(DatasetSpec("toy", root), 8)
    assert len(ds) == 2
    assert "broken.png" in caplog.text


def test_class_left_empty_by_unreadable_images_is_fatal(image_tree):
    root = image_tree({"a": [random_uint8((8, 8, 3))]})
    (root / "b").mkdir()
    (root / "b" / "bad.png").write_bytes(b"junk")
    with pytest.raises(DataError, match="b"):
        load_dataset(DatasetSpec("toy", root), 8)


# --- synthetic corpus -----------------------------------------------------------

def test_synthetic_corpus_is_byte_identical_across_runs():
    a = generate_synthetic_corpus(5, 40, 32, 0)
    b = generate_synthetic_corpus(5, 40, 32, 0)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.checksum() == b.checksum()


def test_synthetic_corpus_depends_on_seed():
    a = generate_synthetic_corpus(5, 40, 32, 0)
    b = generate_synthetic_corpus(5, 40, 32, 1)
    assert not np.array_equal(a.images, b.images)


def nearest_centroid_accuracy(ds, seed=0):
    train, test = ds.train_test_split(0.5, seed)
    x_tr = train.images.reshape(len(train), -1).astype(np.float64)
    x_te = test.images.reshape(len(test), -1).astype(np.float64)
    centroids = np.stack([x_tr[train.labels == c].mean(0) for c in range(ds.n_classes)])
    d = ((x_te[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float((d.argmin(1) == test.labels).mean())


def test_nearest_centroid_oracle_separates_synthetic_classes(corpus):
    assert nearest_centroid_accuracy(corpus) > 0.6


def test_corpus_written_with_manifest_and_reloads(tmp_path, corpus):
    root = write_corpus(corpus, tmp_path / "c")
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["seed"] == 0
    assert len(manifest["classes"]) == 5
    assert "sha256" in manifest
    back = load_dataset(DatasetSpec("synthetic", root), 32)
    assert back.class_names == corpus.class_names
    # PNG round trip quantizes to 8 bits
    assert np.abs(np.sort(back.images.ravel()) - np.sort(corpus.images.ravel())).max() <= 1 / 255 + 1e-6


# --- episodes -------------------------------------------------------------------

def test_five_way_one_shot_fifteen_queries(corpus):
    ep = sample_episode(corpus, EpisodeSpec(5, 1, 15), np.random.default_rng(0))
    assert len(ep.support) == 5
    assert len(ep.query) == 75


def test_two_way_exhaustive_split():
    ds = generate_synthetic_corpus(2, 2, 32, 0)
    ep = sample_episode(ds, EpisodeSpec(2, 1, 1), np.random.default_rng(0))
    s, q = set(ep.support_index.tolist()), set(ep.query_index.tolist())
    assert not s & q
    assert s | q == set(range(4))


def test_same_rng_seed_same_episode(corpus):
    spec = EpisodeSpec(5, 2, 3)
    a = sample_episode(corpus, spec, np.random.default_rng(7))
    b = sample_episode(corpus, spec, np.random.default_rng(7))
    np.testing.assert_array_equal(a.support_index, b.support_index)
    np.testing.assert_array_equal(a.query_index, b.query_index)
    np.testing.assert_array_equal(a.classes, b.classes)


def test_labels_remapped_by_draw_order(corpus):
    ep = sample_episode(corpus, EpisodeSpec(3, 2, 2), np.random.default_rng(3))
    for (sample, label) in ep.support + ep.query:
        assert sample.class_id == ep.classes[label]


def test_insufficient_classes_reports_counts(corpus):
    with pytest.raises(DataError, match="needs 6 classes, dataset has 5"):
        sample_episode(corpus, EpisodeSpec(6, 1, 1), np.random.default_rng(0))


def test_insufficient_samples_reports_counts(corpus):
    with pytest.raises(DataError, match="40 samples.*30 \\+ 15 = 45"):
        sample_episode(corpus, EpisodeSpec(5, 30, 15), np.random.default_rng(0))


def test_episode_streams_are_independent_of_order(corpus):
    spec = EpisodeSpec(5, 1, 5)
    forward = [sample_episode(corpus, spec, episode_rng(1, i)).query_index for i in range(4)]
    backward = [sample_episode(corpus, spec, episode_rng(1, i)).query_index for i in reversed(range(4))]
    for a, b in zip(forward, reversed(backward)):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(n_way=st.integers(2, 5), k=st.integers(1, 5), q=st.integers(1, 10), seed=st.integers(0, 2**32 - 1))
def test_episode_invariants(corpus, n_way, k, q, seed):
    ep = sample_episode(corpus, EpisodeSpec(n_way, k, q), np.random.default_rng(seed))
    assert len(ep.support) == n_way * k and len(ep.query) == n_way * q
    assert not set(ep.support_index.tolist()) & set(ep.query_index.tolist())
    assert np.bincount(ep.support_labels, minlength=n_way).tolist() == [k] * n_way
    assert np.bincount(ep.query_labels, minlength=n_way).tolist() == [q] * n_way
    assert set(ep.query_labels.tolist()) == set(range(n_way))
    assert len(set(ep.classes.tolist())) == n_way
    np.testing.assert_array_equal(corpus.labels[ep.support_index], ep.classes[ep.support_labels])


def test_dataset_is_immutable(corpus):
    with pytest.raises(ValueError):
        corpus.images[0, 0, 0, 0] = 1.0


def test_train_test_split_keeps_every_class_on_both_sides(corpus):
    train, test = corpus.train_test_split(0.7, 0)
    assert len(train) == 5 * 28 and len(test) == 5 * 12
    assert set(train.labels.tolist()) == set(test.labels.tolist()) == set(range(5))


# --- domain tasks ----------------------------------------------------------------

def test_same_domain_is_seven_way():
    t = make_domain_task("same", DatasetSpec("CRCTP", split="train"), DatasetSpec("CRCTP", split="test"))
    assert t.n_way == 7


def test_near_domain_is_five_way():
    t = make_domain_task("near", DatasetSpec("CRCTP", split="train"), DatasetSpec("NCTCRC", split="test"))
    assert t.n_way == 5


def test_same_domain_mismatched_datasets_is_fatal():
    with pytest.raises(DataError):
        make_domain_task("same", DatasetSpec("CRCTP"), DatasetSpec("LC25000", split="test"))


def test_way_count_overridable():
    t = make_domain_task("mixture", DatasetSpec("CRCTP"), DatasetSpec("LC25000"), n_way=3)
    assert t.n_way == 3


# --- dataset distance ------------------------------------------------------------

def test_distance_identical_sets_is_zero():
    f = np.random.default_rng(0).normal(size=(10, 4))
    assert dataset_distance(f, f) == 0.0


def test_distance_orthonormal_means_is_sqrt2():
    e1 = np.array([[1.0, 0.0, 0.0]])
    e2 = np.array([[0.0, 1.0, 0.0]])
    assert dataset_distance(e1, e2) == pytest.approx(np.sqrt(2), abs=1e-12)


def test_distance_is_scale_free():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 3)) + 1, rng.normal(size=(7, 3))
    assert dataset_distance(a, b) == pytest.approx(dataset_distance(10 * a, 0.1 * b), rel=1e-12)


def test_distance_dimension_mismatch_is_fatal():
    with pytest.raises(ValueError, match="mismatch"):
        dataset_distance(np.ones((2, 3)), np.ones((2, 4)))
