import os

import numpy as np
import pytest
from pydantic import ValidationError

from src.autograd import ops
from src.autograd.tensor import NumericError, ShapeError, Tensor, backward
from src.detection.detector import (
    DetectorParams,
    DetectorSpec,
    GroundTruth,
    RpnOutput,
    SamplingSpec,
    anchors_for,
    backbone_forward,
    init_detector,
    roi_forward,
    rpn_forward,
    supervised_loss,
)
from src.detection.geometry import AnchorSpec
from src.detection.pseudo_label import HardPseudoGT, RoiTargets, RpnTargets, make_soft_label
from src.pipeline import trainer
from src.pipeline.data import generate_scene
from src.pipeline.monitoring import read_metrics
from src.pipeline.trainer import (
    MetricsRecord,
    TrainerState,
    burn_in,
    ema_update,
    hard_label_loss,
    load_checkpoint,
    run_training,
    save_checkpoint,
    seed_for,
    supervised_step,
    total_loss,
    train_step,
    unsup_roi_loss,
    unsup_rpn_loss,
    update_teacher,
)
from tests.conftest import small_config


def _scenes(config, n=3):
    scenes = [generate_scene(s, config.scene) for s in range(n)]
    return [img.astype(np.float64) for img, _ in scenes], [gt for _, gt in scenes]


def _student_outputs(student, image, proposals):
    features = backbone_forward(image, student)
    rpn = rpn_forward(features, student, anchors_for(student.spec.anchors, *image.shape[:2]))
    return rpn, roi_forward(features, proposals, student)


# -- teacher update ---------------------------------------------------------

def test_ema_matches_closed_form(spec):
    alpha = 0.999
    w0, ws = init_detector(spec, seed=1), init_detector(spec, seed=2)
    teacher, done = w0, 0
    for t in (1, 10, 1000):
        for _ in range(t - done):
            teacher = ema_update(teacher, ws, alpha)
        done = t
        for name, tensor in teacher.params.items():
            expected = alpha ** t * w0[name].data + (1 - alpha ** t) * ws[name].data
            np.testing.assert_allclose(tensor.data, expected, atol=1e-9, rtol=0)


def test_ema_extremes_and_errors(spec):
    w0, ws = init_detector(spec, seed=1), init_detector(spec, seed=2)
    assert ema_update(w0, ws, 1.0).equals(w0)
    assert ema_update(w0, ws, 0.0).equals(ws)
    with pytest.raises(ValueError):
        ema_update(w0, ws, 1.5)
    other = init_detector(DetectorSpec(num_classes=3, channels=(4, 4, 4), rpn_channels=4, pool_size=2, hidden=8,
                                       anchors=AnchorSpec(stride=8, scales=(12.0, 20.0), aspects=(1.0,))))
    with pytest.raises(ShapeError):
        ema_update(w0, other, 0.5)


def test_update_rules(tmp_path, spec):
    teacher, student = init_detector(spec, seed=1), init_detector(spec, seed=2)
    fixed = small_config(tmp_path, update_rule="fixed")
    assert update_teacher(teacher, student, 10, fixed).equals(teacher)
    copy = small_config(tmp_path, update_rule="copy_every_k", copy_interval=5)
    assert update_teacher(teacher, student, 10, copy).equals(student)
    assert update_teacher(teacher, student, 7, copy).equals(teacher)
    ema = small_config(tmp_path, update_rule="ema_per_iter", alpha=0.5)
    updated = update_teacher(teacher, student, 3, ema)
    np.testing.assert_allclose(
        updated["roi.fc.weight"].data, 0.5 * (teacher["roi.fc.weight"].data + student["roi.fc.weight"].data)
    )


# -- losses -----------------------------------------------------------------

def test_total_loss_arithmetic():
    assert total_loss(1.0, 2.0, 1, 1, 0.5) == pytest.approx(2.0)
    assert total_loss(1.0, 1.0, 1, 2, 0.5) == pytest.approx(2.0)
    sup = Tensor(np.array(1.5))
    assert total_loss(sup, Tensor(np.array(9.0)), 2, 1, 0.0) is sup
    assert total_loss(sup, 0.0, 1, 0, 0.5) is sup
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 0, 1, 0.5)


def test_unsupervised_loss_is_zero_when_student_equals_teacher(detector, image):
    label = make_soft_label(detector, image, n=8, ensemble="none")
    rpn, roi = _student_outputs(detector, image, label.proposals.boxes)
    assert unsup_rpn_loss(rpn, label.rpn).item() == 0.0
    assert unsup_roi_loss(roi, label.roi).item() == 0.0


def test_unsupervised_loss_is_positive_for_different_models(spec, image):
    teacher, student = init_detector(spec, seed=4), init_detector(spec, seed=5)
    label = make_soft_label(teacher, image, n=8, ensemble="flip")
    rpn, roi = _student_outputs(student, image, label.proposals.boxes)
    assert unsup_rpn_loss(rpn, label.rpn).item() > 0.0
    assert unsup_roi_loss(roi, label.roi).item() > 0.0


def test_unsup_rpn_loss_two_anchor_fixture():
    student = RpnOutput(
        logits=Tensor(np.array([[0.0, np.log(3.0)], [0.0, 0.0]])),
        deltas=Tensor(np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]])),
    )
    targets = RpnTargets(
        probs=np.array([[0.5, 0.5], [0.25, 0.75]]),
        deltas=np.array([[3.0, 4.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]]),
    )
    kl = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75) + 0.25 * np.log(0.5) + 0.75 * np.log(1.5)
    norms = 5.0 + 0.0
    assert unsup_rpn_loss(student, targets).item() == pytest.approx((kl + norms) / 2, abs=1e-12)
    assert unsup_rpn_loss(student, targets, localization=False).item() == pytest.approx(kl / 2, abs=1e-12)


def test_unsupervised_loss_count_mismatch(detector):
    targets = RoiTargets(np.full((3, 3), 1.0 / 3.0), np.zeros((3, 8)))
    with pytest.raises(ShapeError):
        unsup_roi_loss(None, targets)
    assert unsup_roi_loss(None, RoiTargets.empty(2)).item() == 0.0


def test_localization_off_zeroes_regression_gradients(spec, image):
    teacher, student = init_detector(spec, seed=4), init_detector(spec, seed=5)
    label = make_soft_label(teacher, image, n=8, ensemble="flip")
    rpn, roi = _student_outputs(student, image, label.proposals.boxes)
    loss = ops.add(unsup_rpn_loss(rpn, label.rpn, False), unsup_roi_loss(roi, label.roi, False))
    grads = backward(loss, student.params)
    regression = [n for n in grads if n.startswith(("rpn.reg.", "roi.reg."))]
    assert len(regression) == 4
    for name in regression:
        assert not np.any(grads[name])
    assert np.any(grads["roi.cls.weight"])


def test_hard_label_loss_is_weighted_supervised_loss(detector, image):
    pseudo = HardPseudoGT(GroundTruth(np.array([[4.0, 4.0, 20.0, 20.0]]), np.array([1])), np.array([0.9]))
    sampling = SamplingSpec(rpn_batch=16, roi_batch=16, train_proposals=32)
    weighted = hard_label_loss(detector, image, pseudo, 0.1, 1, 2, sampling, np.random.default_rng(5)).item()
    plain, _ = supervised_loss(image, pseudo.gt, detector, sampling, np.random.default_rng(5))
    assert weighted == pytest.approx(0.2 * plain.item(), rel=1e-12)


# -- steps ------------------------------------------------------------------

def test_seed_for_is_deterministic_and_role_specific():
    assert seed_for(0, 5, "strong") == seed_for(0, 5, "strong")
    assert seed_for(0, 5, "strong") != seed_for(0, 5, "unsup_weak")
    assert seed_for(0, 5, "strong", 0) != seed_for(0, 5, "strong", 1)
    assert seed_for(0, 5, "strong") != seed_for(1, 5, "strong")


def test_supervised_step_leaves_teacher_alone(tmp_path):
    config = small_config(tmp_path)
    images, gts = _scenes(config, 1)
    state = TrainerState.initial(init_detector(config.detector_spec(), seed=0))
    new_state, record = supervised_step(state, images, gts, config)
    assert new_state.iteration == 1
    assert record.phase == "burn_in" and record.loss_total == record.loss_sup
    assert new_state.teacher.equals(state.teacher)
    assert not new_state.student.equals(state.student)
    assert set(new_state.velocity) == set(state.student.params.names())


def test_beta_zero_matches_supervised_trajectory(tmp_path):
    images, gts = _scenes(small_config(tmp_path))
    start = init_detector(small_config(tmp_path).detector_spec(), seed=0)

    def run(config, unlabeled):
        state = TrainerState.initial(start)
        for _ in range(2):
            state, _ = train_step(state, images[:1], gts[:1], unlabeled, config)
        return state

    supervised = run(small_config(tmp_path, n_unlabeled=0), [])
    zero_beta = run(small_config(tmp_path, beta=0.0), images[1:2])
    assert zero_beta.student.equals(supervised.student)


def test_fixed_teacher_never_changes(tmp_path):
    config = small_config(tmp_path, update_rule="fixed")
    images, gts = _scenes(config, 2)
    state = TrainerState.initial(init_detector(config.detector_spec(), seed=0))
    before = state.teacher.copy()
    for _ in range(2):
        state, record = train_step(state, images[:1], gts[:1], images[1:], config)
    assert state.teacher.equals(before)
    assert record.phase == "semi_supervised" and record.iteration == 2
    assert record.pseudo_num_proposals is not None


def test_hard_mode_step_records_pseudo_boxes(tmp_path):
    config = small_config(tmp_path, label_mode="hard", theta=0.3)
    images, gts = _scenes(config, 2)
    state = TrainerState.initial(init_detector(config.detector_spec(), seed=0))
    state, record = train_step(state, images[:1], gts[:1], images[1:], config)
    assert record.label_mode == "hard"
    assert record.pseudo_num_boxes is not None and record.pseudo_num_proposals is None
    assert np.isfinite(record.loss_total)


def test_burn_in_requires_labeled_images(tmp_path):
    with pytest.raises(trainer.DataError):
        burn_in([], [], small_config(tmp_path))


def test_burn_in_without_iterations_returns_initial_params(tmp_path):
    config = small_config(tmp_path, burn_in_iters=0)
    images, gts = _scenes(config, 1)
    start = init_detector(config.detector_spec(), seed=3)
    before = start.copy()
    assert burn_in(images, gts, config, params=start).equals(before)
    assert start.equals(before)


def test_burn_in_ends_with_teacher_equal_to_student(tmp_path, corpus):
    result = run_training(small_config(tmp_path, burn_in_iters=2, total_iters=0), corpus)
    ckpt_dir = os.path.join(result.run_dir, trainer.CHECKPOINT_DIR)
    state, _ = load_checkpoint(ckpt_dir)
    assert state.iteration == 2
    assert state.teacher.equals(state.student)
    assert state.teacher.params.to_bytes() == state.student.params.to_bytes()
    baseline, _ = DetectorParams.load(os.path.join(ckpt_dir, trainer.BURN_IN_CHECKPOINT))
    assert baseline.equals(state.student)


def test_burn_in_supervised_loss_moving_average_decreases(tmp_path, corpus):
    result = run_training(small_config(tmp_path, burn_in_iters=40, total_iters=0, n_labeled=2), corpus)
    losses = np.array([r["loss_sup"] for r in read_metrics(result.metrics_path) if r["phase"] == "burn_in"])
    assert len(losses) == 40
    assert losses[-10:].mean() < losses[:10].mean()


def test_metrics_record_validation():
    with pytest.raises(ValidationError):
        MetricsRecord(iteration=1, phase="burn_in", label_mode="soft", loss_total=-1.0)
    with pytest.raises(ValidationError):
        MetricsRecord(iteration=1, phase="burn_in", label_mode="soft", surprise=1.0)
    with pytest.raises(ValidationError):
        MetricsRecord(iteration=1, phase="burn_in", label_mode="soft", teacher_map=1.5)
    record = MetricsRecord(iteration=1, phase="burn_in", label_mode="soft", teacher_map=0.2)
    assert record.has_evaluation()


def test_checkpoint_roundtrip(tmp_path):
    config = small_config(tmp_path)
    images, gts = _scenes(config, 1)
    state = TrainerState.initial(init_detector(config.detector_spec(), seed=0), seed=7)
    state, _ = supervised_step(state, images, gts, config)
    save_checkpoint(state, str(tmp_path / "ckpt"), "abc")
    loaded, info = load_checkpoint(str(tmp_path / "ckpt"))
    assert info["config_hash"] == "abc"
    assert loaded.iteration == 1 and loaded.seed == 7
    assert loaded.student.equals(state.student) and loaded.teacher.equals(state.teacher)
    for name, v in state.velocity.items():
        np.testing.assert_array_equal(loaded.velocity[name], v)
    with pytest.raises(trainer.DataError):
        load_checkpoint(str(tmp_path / "nowhere"))


# -- runs -------------------------------------------------------------------

def _records(path):
    with open(path) as f:
        return f.read().splitlines()[1:]


def test_run_training_writes_baseline_and_final(tmp_path, corpus):
    config = small_config(tmp_path)
    result = run_training(config, corpus)
    records = read_metrics(result.metrics_path)
    assert [r["iteration"] for r in records] == [1, 2, 3]
    assert records[0]["phase"] == "burn_in" and records[0]["teacher_map"] is not None
    assert records[-1]["phase"] == "semi_supervised" and records[-1]["student_map"] is not None
    assert 0.0 <= result.final["teacher_map"] <= 1.0
    assert result.baseline["teacher_map"] == records[0]["teacher_map"]
    assert result.state.iteration == 3


def test_run_training_without_burn_in_records_initial_baseline(tmp_path, corpus):
    result = run_training(small_config(tmp_path, burn_in_iters=0, total_iters=1), corpus)
    records = read_metrics(result.metrics_path)
    assert records[0]["iteration"] == 0 and records[0]["phase"] == "burn_in"
    assert records[-1]["iteration"] == 1


def test_same_seed_runs_give_identical_metrics(tmp_path, corpus):
    a = run_training(small_config(tmp_path / "a"), corpus)
    b = run_training(small_config(tmp_path / "b"), corpus)
    assert _records(a.metrics_path) == _records(b.metrics_path)
    assert a.state.teacher.equals(b.state.teacher)


def test_resume_continues_the_same_trajectory(tmp_path, corpus):
    straight = run_training(small_config(tmp_path / "straight", total_iters=3), corpus)
    run_training(small_config(tmp_path / "resumed", total_iters=1), corpus)
    resumed = run_training(small_config(tmp_path / "resumed", total_iters=3), corpus, resume=True)
    assert resumed.state.iteration == straight.state.iteration == 4
    assert resumed.state.student.equals(straight.state.student)
    assert resumed.state.teacher.equals(straight.state.teacher)
    assert [r["iteration"] for r in read_metrics(resumed.metrics_path)] == [1, 2, 3, 4]


def test_numeric_failure_is_recorded(tmp_path, corpus, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericError("loss went non-finite")

    monkeypatch.setattr(trainer, "supervised_step", explode)
    config = small_config(tmp_path)
    with pytest.raises(NumericError):
        run_training(config, corpus)
    records = read_metrics(f"{config.run_dir}/metrics.jsonl")
    assert records[-1]["status"] == "numeric_failure"
    assert "non-finite" in records[-1]["message"]


def test_run_training_rejects_class_mismatch(tmp_path, corpus):
    config = small_config(tmp_path)
    config = config.model_copy(update={"scene": config.scene.model_copy(update={"classes": config.scene.classes[:2]})})
    with pytest.raises(trainer.DataError):
        run_training(config, corpus)
