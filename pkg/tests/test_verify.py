import numpy as np
import pytest

from src.detection.detector import GroundTruth
from src.detection.geometry import Box, ScoredBox
from src.pipeline.evaluation import evaluate_map
from src.pipeline.verify import CHECKS, ap_oracle, run_verify


@pytest.mark.parametrize("name", list(CHECKS))
def test_check_passes(name):
    report = run_verify(only=[name])
    assert report.passed, report.results[0].detail


@pytest.mark.parametrize("name", ["gradcheck_ops", "gradcheck_supervised_loss"])
def test_gradient_fault_is_detected(name):
    report = run_verify(fault="gradient", only=[name])
    assert report.failed() == [name]


def test_invariant_checks_are_registered():
    expected = {
        "softmax_normalization", "strong_aug_range", "weak_record_inverts_boxes", "map_duplicate_monotone",
        "detect_bounds_and_top_n", "backward_repeatable", "teacher_detached", "metrics_finite", "determinism",
    }
    assert expected <= set(CHECKS)


def test_exhaustive_ap_oracle_hand_example():
    gts = [GroundTruth(np.array([[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]]), np.array([0, 0]))]
    dets = [[
        ScoredBox(Box(40.0, 40.0, 50.0, 50.0), 0.9, 0),
        ScoredBox(Box(0.0, 0.0, 10.0, 10.0), 0.8, 0),
        ScoredBox(Box(20.0, 20.0, 30.0, 30.0), 0.7, 0),
    ]]
    # raw precision is 1/2 at recall 1/2; the envelope lifts it to 2/3
    assert ap_oracle(dets, gts, 0, 0.5) == pytest.approx(2 / 3)
    assert evaluate_map(dets, gts, iou_thresholds=[0.5]).map == pytest.approx(2 / 3)


def test_exhaustive_ap_oracle_ignores_duplicates_of_matched_boxes():
    gts = [GroundTruth(np.array([[0.0, 0.0, 10.0, 10.0]]), np.array([0]))]
    hit = ScoredBox(Box(0.0, 0.0, 10.0, 10.0), 0.8, 0)
    assert ap_oracle([[hit]], gts, 0, 0.5) == 1.0
    assert ap_oracle([[hit, ScoredBox(hit.box, 0.5, 0)]], gts, 0, 0.5) == 1.0
    assert ap_oracle([[ScoredBox(hit.box, 0.9, 0), hit]], gts, 0, 0.5) == 1.0


def test_report_shape():
    report = run_verify(only=["hard_label_filter", "geometry_roundtrip"])
    document = report.to_dict()
    assert document["passed"] is True
    assert [c["name"] for c in document["checks"]] == ["hard_label_filter", "geometry_roundtrip"]


def test_unknown_fault_and_check():
    with pytest.raises(ValueError):
        run_verify(fault="bitflip")
    with pytest.raises(KeyError):
        run_verify(only=["nope"])
