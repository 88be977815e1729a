import json
import os

import numpy as np
import pytest

from src.detection.geometry import pairwise_iou
from src.pipeline.config import CorpusConfig, SceneSpec
from src.pipeline.data import DataError, build_corpus, generate_scene, load_corpus, manifest_for, save_corpus, split_dataset
from src.pipeline.schema_validator import DataLineageTracker, calculate_content_hash, detect_anomalies, validate_manifest


def test_generate_scene_is_deterministic_and_in_bounds():
    spec = SceneSpec(image_size=32, min_size=8, max_size=14, max_objects=3)
    for seed in range(10):
        img, gt = generate_scene(seed, spec)
        again, gt_again = generate_scene(seed, spec)
        np.testing.assert_array_equal(img, again)
        np.testing.assert_array_equal(gt.boxes, gt_again.boxes)
        assert img.shape == (32, 32, 3) and img.dtype == np.uint8
        assert 1 <= len(gt) <= 3
        assert np.all(gt.boxes >= 0) and np.all(gt.boxes <= 32)
        assert set(gt.classes.tolist()) <= {0, 1, 2}
        if len(gt) > 1:
            ious = pairwise_iou(gt.boxes, gt.boxes)
            np.fill_diagonal(ious, 0.0)
            assert ious.max() <= spec.max_overlap_iou


def test_unsatisfiable_scene_spec_raises():
    spec = SceneSpec(image_size=32, min_size=24, max_size=28, min_objects=3, max_objects=3, max_overlap_iou=0.0, max_retries=5)
    with pytest.raises(DataError):
        generate_scene(0, spec)


def test_scene_spec_rejects_bad_sizes():
    with pytest.raises(ValueError):
        SceneSpec(image_size=30)
    with pytest.raises(ValueError):
        SceneSpec(image_size=32, min_size=8, max_size=40)


def test_corpus_roundtrip(tmp_path, corpus):
    path = str(tmp_path / "corpus")
    save_corpus(corpus, path)
    loaded = load_corpus(path)
    np.testing.assert_array_equal(loaded.images, corpus.images)
    assert len(loaded) == len(corpus) == 16
    for a, b in zip(loaded.gts, corpus.gts):
        np.testing.assert_array_equal(a.boxes, b.boxes)
        np.testing.assert_array_equal(a.classes, b.classes)
    assert loaded.spec_hash == corpus.spec_hash
    assert loaded.seeds == corpus.seeds
    assert list(loaded.eval_ids) == [12, 13, 14, 15]


def test_corpus_is_reproducible_from_its_seed(corpus):
    again = build_corpus(CorpusConfig(n_train=12, n_eval=4, seed=0), corpus.spec)
    np.testing.assert_array_equal(again.images, corpus.images)


def test_save_refuses_to_overwrite_without_force(tmp_path, corpus):
    path = str(tmp_path / "corpus")
    save_corpus(corpus, path)
    with pytest.raises(DataError):
        save_corpus(corpus, path)
    save_corpus(corpus, path, force=True)


def test_load_missing_corpus(tmp_path):
    with pytest.raises(DataError, match="gen-data"):
        load_corpus(str(tmp_path / "absent"))


def test_load_rejects_corrupt_manifest(tmp_path, corpus):
    path = str(tmp_path / "corpus")
    save_corpus(corpus, path)
    manifest_path = os.path.join(path, "manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    del manifest["scenes"]
    with open(manifest_path, "w") as f:
        json.dump(manifest, f)
    with pytest.raises(DataError, match="corrupt"):
        load_corpus(path)


def test_load_detects_tampered_spec(tmp_path, corpus):
    path = str(tmp_path / "corpus")
    save_corpus(corpus, path)
    manifest_path = os.path.join(path, "manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    manifest["spec"]["noise_std"] = 0.0
    with open(manifest_path, "w") as f:
        json.dump(manifest, f)
    with pytest.raises(DataError, match="hash"):
        load_corpus(path)


def test_load_rejects_malformed_ground_truth(tmp_path, corpus):
    path = str(tmp_path / "corpus")
    save_corpus(corpus, path)
    with open(os.path.join(path, "gt.txt"), "a") as f:
        f.write("3 1 2.0 2.0\n")
    with pytest.raises(DataError):
        load_corpus(path)


def test_split_properties():
    split = split_dataset(120, 0.1, seed=3, n_eval=20)
    assert len(split.labeled) == 10 and len(split.unlabeled) == 90
    assert list(split.eval) == list(range(100, 120))
    union = np.concatenate([split.labeled, split.unlabeled])
    assert sorted(union.tolist()) == list(range(100))
    assert not set(split.labeled) & set(split.unlabeled)
    again = split_dataset(120, 0.1, seed=3, n_eval=20)
    np.testing.assert_array_equal(again.labeled, split.labeled)
    other = split_dataset(120, 0.1, seed=4, n_eval=20)
    np.testing.assert_array_equal(other.eval, split.eval)
    assert split.to_dict()["labeled"] == split.labeled.tolist()


def test_split_rejects_infeasible_requests():
    with pytest.raises(DataError):
        split_dataset(10, 0.0, seed=0, n_eval=2)
    with pytest.raises(DataError):
        split_dataset(10, 0.5, seed=0, n_eval=10)
    with pytest.raises(DataError):
        split_dataset(10, 0.01, seed=0, n_eval=2)


def test_full_labeled_fraction_leaves_no_unlabeled():
    split = split_dataset(10, 1.0, seed=0, n_eval=2)
    assert len(split.labeled) == 8 and len(split.unlabeled) == 0


def test_validate_manifest(corpus):
    manifest = manifest_for(corpus)
    assert validate_manifest(manifest) == (True, [])
    broken = dict(manifest, n_train=5)
    ok, errors = validate_manifest(broken)
    assert not ok and any("n_train" in e for e in errors)
    ok, errors = validate_manifest({"schema": "humble-corpus"})
    assert not ok and len(errors) >= 5


def test_detect_anomalies(corpus):
    report = detect_anomalies(corpus.gts, 3, 32)
    assert report["total_scenes"] == 16
    assert report["out_of_bounds_boxes"] == 0 and report["invalid_class_ids"] == 0
    assert sum(report["class_histogram"]) == sum(len(g) for g in corpus.gts)
    bad = detect_anomalies(corpus.gts, 1, 8)
    assert bad["invalid_class_ids"] + bad["out_of_bounds_boxes"] > 0


def test_lineage_and_hashes(tmp_path):
    assert calculate_content_hash({"a": 1, "b": 2}) == calculate_content_hash({"b": 2, "a": 1})
    tracker = DataLineageTracker("run-1")
    tracker.record_step("split", inputs={"corpus": "abc"}, outputs={"labeled": 3})
    path = str(tmp_path / "lineage.json")
    tracker.save_lineage(path)
    with open(path) as f:
        summary = json.load(f)
    assert summary["pipeline_run_id"] == "run-1" and summary["total_steps"] == 1
    assert summary["steps"][0]["outputs"] == {"labeled": 3}
