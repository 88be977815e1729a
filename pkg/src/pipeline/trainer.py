"""
Semi-supervised training loop.

A run is a supervised burn-in followed by mixed-batch iterations. In each
mixed iteration the teacher labels the weak view of every unlabeled image, the
student is scored against those labels on a strong view of the same weak image,
and one SGD step is taken on

    L = L_S + beta * (n_U / n_S) * L_U

after which the teacher follows the configured update rule. Every random
choice is drawn from a seed derived from (train seed, iteration, role, index),
so a run is a pure function of its config and can resume from any checkpoint.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from src.autograd import ops
from src.autograd.optim import sgd_step
from src.autograd.params import ParamSet
from src.autograd.tensor import NumericError, ShapeError, Tensor, backward, no_grad
from src.detection.augment import DEFAULT_FILL, apply_strong, plan_strong, weak_augment
from src.detection.detector import (
    DetectorParams,
    GroundTruth,
    RoiOutput,
    RpnOutput,
    SamplingSpec,
    anchors_for,
    backbone_forward,
    init_detector,
    roi_forward,
    rpn_forward,
    supervised_loss,
)
from src.detection.pseudo_label import (
    HardPseudoGT,
    RoiTargets,
    RpnTargets,
    SoftPseudoLabel,
    make_hard_label,
    make_soft_label,
)
from src.pipeline.config import ExperimentConfig, write_resolved
from src.pipeline.data import Corpus, DataError, DatasetSplit, split_dataset
from src.pipeline.evaluation import evaluate_model
from src.pipeline.monitoring import METRICS_FILE, MetricsWriter, StepTimer, TrainingMonitor
from src.pipeline.schema_validator import DataLineageTracker, calculate_content_hash, validate_metrics_record

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
STATE_FILE = "state.json"
BURN_IN_CHECKPOINT = "burn_in.params"
TEACHER_CHECKPOINT = "teacher.params"
STUDENT_CHECKPOINT = "student.params"
VELOCITY_CHECKPOINT = "velocity.params"

_ROLES = {
    "labeled_batch": 0,
    "sup_weak": 1,
    "sup_sample": 2,
    "unlabeled_batch": 3,
    "unsup_weak": 4,
    "strong": 5,
    "ensemble": 6,
    "unsup_sample": 7,
}


def seed_for(seed: int, iteration: int, role: str, index: int = 0) -> int:
    """Independent 32-bit seed for one random choice of one iteration."""
    return int(np.random.SeedSequence([seed, iteration, _ROLES[role], index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# State and records
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TrainerState:
    student: DetectorParams
    teacher: DetectorParams
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    seed: int = 0

    @classmethod
    def initial(cls, params: DetectorParams, seed: int = 0) -> "TrainerState":
        return cls(student=params.copy(), teacher=params.copy(), seed=seed)


class MetricsRecord(BaseModel):
    """One line of the metrics stream."""

    model_config = ConfigDict(extra="forbid")

    iteration: int = Field(..., ge=0)
    phase: Literal["burn_in", "semi_supervised"]
    status: Literal["ok", "numeric_failure"] = "ok"
    label_mode: Literal["soft", "hard"]

    loss_total: Optional[float] = None
    loss_sup: Optional[float] = None
    loss_unsup: Optional[float] = None
    sup_rpn_cls: Optional[float] = None
    sup_rpn_loc: Optional[float] = None
    sup_roi_cls: Optional[float] = None
    sup_roi_loc: Optional[float] = None
    unsup_rpn_cls: Optional[float] = None
    unsup_rpn_loc: Optional[float] = None
    unsup_roi_cls: Optional[float] = None
    unsup_roi_loc: Optional[float] = None

    teacher_map: Optional[float] = None
    teacher_map50: Optional[float] = None
    student_map: Optional[float] = None
    student_map50: Optional[float] = None
    teacher_unlabeled_map: Optional[float] = None

    pseudo_num_proposals: Optional[float] = Field(None, description="Mean teacher proposals per unlabeled image (soft)")
    pseudo_mean_confidence: Optional[float] = Field(None, description="Mean max class probability over proposals (soft)")
    pseudo_num_boxes: Optional[float] = Field(None, description="Mean pseudo boxes per unlabeled image (hard)")
    pseudo_mean_score: Optional[float] = Field(None, description="Mean pseudo box score (hard)")

    message: Optional[str] = None

    @model_validator(mode="after")
    def _check_values(self):
        errors = validate_metrics_record(self.model_dump())
        if errors:
            raise ValueError("; ".join(errors))
        return self

    def has_evaluation(self) -> bool:
        return self.teacher_map is not None


# ---------------------------------------------------------------------------
# Teacher update
# ---------------------------------------------------------------------------

def ema_update(teacher: DetectorParams, student: DetectorParams, alpha: float) -> DetectorParams:
    """alpha * teacher + (1 - alpha) * student for every parameter."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if not teacher.is_compatible(student):
        raise ShapeError("ema_update", "teacher and student parameter shapes differ")
    if alpha == 1.0:
        return teacher.copy()
    if alpha == 0.0:
        return DetectorParams(teacher.spec, student.params.copy())
    return teacher.with_params(teacher.params.map(lambda name, w: alpha * w + (1.0 - alpha) * student[name].data))


def update_teacher(teacher: DetectorParams, student: DetectorParams, iteration: int, config: ExperimentConfig) -> DetectorParams:
    rule = config.train.update_rule
    if rule == "ema_per_iter":
        return ema_update(teacher, student, config.train.alpha)
    if rule == "copy_every_k":
        if iteration % config.train.copy_interval == 0:
            logger.info(f"Copying student into teacher at iteration {iteration}")
            return student.copy()
        return teacher
    return teacher


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _consistency_terms(
    logits: Tensor,
    deltas: Tensor,
    target_probs: np.ndarray,
    target_deltas: np.ndarray,
    localization: bool,
) -> Tuple[Tensor, Tensor]:
    """Row-summed KL and L2 residual norms, each divided by the row count."""
    n = logits.shape[0]
    cls = ops.scale(ops.kl_div(target_probs, ops.softmax(logits, axis=1)), 1.0 / n)
    if not localization:
        return cls, ops.constant(0.0)
    loc = ops.scale(ops.total(ops.l2_residual_norm(target_deltas, deltas, axis=-1)), 1.0 / n)
    return cls, loc


def unsup_rpn_terms(rpn: RpnOutput, targets: RpnTargets, localization: bool = True) -> Tuple[Tensor, Tensor]:
    if len(rpn) != len(targets):
        raise ShapeError("unsup_rpn_loss", f"{len(rpn)} student anchors for {len(targets)} teacher anchors")
    if len(rpn) == 0:
        return ops.constant(0.0), ops.constant(0.0)
    return _consistency_terms(rpn.logits, rpn.deltas, targets.probs, targets.deltas, localization)


def unsup_rpn_loss(rpn: RpnOutput, targets: RpnTargets, localization: bool = True) -> Tensor:
    """KL(teacher || student) objectness plus the L2 delta residual over all anchors."""
    return ops.add_all(list(unsup_rpn_terms(rpn, targets, localization)))


def unsup_roi_terms(roi: Optional[RoiOutput], targets: RoiTargets, localization: bool = True) -> Tuple[Tensor, Tensor]:
    n = 0 if roi is None else len(roi)
    if n != len(targets):
        raise ShapeError("unsup_roi_loss", f"{n} student ROIs for {len(targets)} teacher proposals")
    if n == 0:
        return ops.constant(0.0), ops.constant(0.0)
    return _consistency_terms(roi.logits, roi.deltas, targets.probs, targets.deltas, localization)


def unsup_roi_loss(roi: Optional[RoiOutput], targets: RoiTargets, localization: bool = True) -> Tensor:
    """Same as the RPN term over the teacher proposals; the residual spans all 4C deltas."""
    return ops.add_all(list(unsup_roi_terms(roi, targets, localization)))


def total_loss(
    loss_sup: Union[Tensor, float],
    loss_unsup: Union[Tensor, float],
    n_sup: int,
    n_unsup: int,
    beta: float,
) -> Union[Tensor, float]:
    """L_S + beta * (n_U / n_S) * L_U; a zero weight returns L_S itself."""
    if n_sup < 1:
        raise ValueError(f"n_sup must be >= 1, got {n_sup}")
    weight = beta * n_unsup / n_sup
    if not isinstance(loss_sup, Tensor) and not isinstance(loss_unsup, Tensor):
        return float(loss_sup) + weight * float(loss_unsup)
    sup = loss_sup if isinstance(loss_sup, Tensor) else ops.constant(loss_sup)
    if weight == 0.0:
        return sup
    unsup = loss_unsup if isinstance(loss_unsup, Tensor) else ops.constant(loss_unsup)
    return ops.add(sup, ops.scale(unsup, weight))


def pseudo_gt_loss(
    student: DetectorParams,
    strong_image: np.ndarray,
    pseudo: HardPseudoGT,
    sampling: Optional[SamplingSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """Unweighted supervised loss against teacher pseudo ground truth."""
    return supervised_loss(strong_image, pseudo.gt, student, sampling, rng)


def hard_label_loss(
    student: DetectorParams,
    strong_image: np.ndarray,
    pseudo: HardPseudoGT,
    beta: float,
    n_sup: int,
    n_unsup: int,
    sampling: Optional[SamplingSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """beta * (n_U / n_S) * supervised_loss(strong image, pseudo GT)."""
    if n_sup < 1:
        raise ValueError(f"n_sup must be >= 1, got {n_sup}")
    loss, _ = pseudo_gt_loss(student, strong_image, pseudo, sampling, rng)
    return ops.scale(loss, beta * n_unsup / n_sup)


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def _mean(terms: Sequence[Tensor]) -> Tensor:
    return ops.scale(ops.add_all(list(terms)), 1.0 / len(terms))


def _mean_components(components: Sequence[Dict[str, float]], prefix: str) -> Dict[str, float]:
    keys = ("rpn_cls", "rpn_loc", "roi_cls", "roi_loc")
    if not components:
        return {f"{prefix}_{k}": 0.0 for k in keys}
    return {f"{prefix}_{k}": float(np.mean([c[k] for c in components])) for k in keys}


def _supervised_branch(
    state: TrainerState,
    images: Sequence[np.ndarray],
    gts: Sequence[GroundTruth],
    config: ExperimentConfig,
    iteration: int,
) -> Tuple[Tensor, Dict[str, float]]:
    sampling = config.model.sampling_spec()
    stride = state.student.spec.stride
    losses, components = [], []
    for j, (image, gt) in enumerate(zip(images, gts)):
        weak, weak_gt, _ = weak_augment(image, gt, seed_for(state.seed, iteration, "sup_weak", j), stride=stride)
        rng = np.random.default_rng(seed_for(state.seed, iteration, "sup_sample", j))
        loss, parts = supervised_loss(weak, weak_gt, state.student, sampling, rng)
        losses.append(loss)
        components.append(parts)
    return _mean(losses), _mean_components(components, "sup")


def _unsupervised_branch(
    state: TrainerState,
    images: Sequence[np.ndarray],
    config: ExperimentConfig,
    iteration: int,
    fill_value: float,
) -> Tuple[Tensor, Dict[str, float], Dict[str, float]]:
    train = config.train
    student, teacher = state.student, state.teacher
    stride = student.spec.stride
    losses, components, stats = [], [], []
    for j, image in enumerate(images):
        weak, _, _ = weak_augment(image, GroundTruth(), seed_for(state.seed, iteration, "unsup_weak", j), stride=stride)
        plan = plan_strong(seed_for(state.seed, iteration, "strong", j), weak.shape[0], weak.shape[1])
        strong = apply_strong(weak, plan, fill_value=fill_value)

        if train.label_mode == "hard":
            pseudo = make_hard_label(
                teacher, weak, train.theta, nms_thresh=config.model.nms_thresh, n_proposals=config.model.test_proposals
            )
            rng = np.random.default_rng(seed_for(state.seed, iteration, "unsup_sample", j))
            loss, parts = pseudo_gt_loss(student, strong, pseudo, config.model.sampling_spec(), rng)
            losses.append(loss)
            components.append(parts)
            stats.append(pseudo.summary())
            continue

        label: SoftPseudoLabel = make_soft_label(
            teacher,
            weak,
            n=train.n_proposals,
            ensemble=train.ensemble_mode,
            nms_thresh=config.model.rpn_nms_thresh,
            seed=seed_for(state.seed, iteration, "ensemble", j),
            fill_value=fill_value,
        )
        features = backbone_forward(strong, student)
        rpn = rpn_forward(features, student, anchors_for(student.spec.anchors, *strong.shape[:2]))
        roi = roi_forward(features, label.proposals.boxes, student) if len(label.proposals) else None
        rpn_cls, rpn_loc = unsup_rpn_terms(rpn, label.rpn, train.unsup_localization)
        roi_cls, roi_loc = unsup_roi_terms(roi, label.roi, train.unsup_localization)
        losses.append(ops.add_all([rpn_cls, rpn_loc, roi_cls, roi_loc]))
        components.append({"rpn_cls": rpn_cls.item(), "rpn_loc": rpn_loc.item(), "roi_cls": roi_cls.item(), "roi_loc": roi_loc.item()})
        stats.append(label.summary())

    keys = sorted({k for s in stats for k in s})
    mean_stats = {k: float(np.mean([s[k] for s in stats])) for k in keys}
    return _mean(losses), _mean_components(components, "unsup"), mean_stats


def _apply_gradients(state: TrainerState, loss: Tensor, config: ExperimentConfig) -> Tuple[DetectorParams, Dict[str, np.ndarray]]:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite training loss {value}")
    grads = backward(loss, state.student.params)
    params, velocity = sgd_step(state.student.params, grads, config.train.lr, config.train.momentum, state.velocity or None)
    return state.student.with_params(params), velocity


def supervised_step(
    state: TrainerState,
    images: Sequence[np.ndarray],
    gts: Sequence[GroundTruth],
    config: ExperimentConfig,
) -> Tuple[TrainerState, MetricsRecord]:
    """One burn-in iteration: SGD on the supervised loss only; the teacher is left alone."""
    if not len(images):
        raise DataError("burn-in needs at least one labeled image")
    iteration = state.iteration + 1
    loss, components = _supervised_branch(state, images, gts, config, iteration)
    student, velocity = _apply_gradients(state, loss, config)
    record = MetricsRecord(
        iteration=iteration,
        phase="burn_in",
        label_mode=config.train.label_mode,
        loss_total=loss.item(),
        loss_sup=loss.item(),
        **components,
    )
    return replace(state, student=student, velocity=velocity, iteration=iteration), record


def train_step(
    state: TrainerState,
    labeled_images: Sequence[np.ndarray],
    labeled_gts: Sequence[GroundTruth],
    unlabeled_images: Sequence[np.ndarray],
    config: ExperimentConfig,
    fill_value: float = DEFAULT_FILL,
) -> Tuple[TrainerState, MetricsRecord]:
    """
    One semi-supervised iteration.

    The unsupervised branch is evaluated without gradients when its weight is
    zero, so beta = 0 leaves the student on its supervised-only trajectory.
    """
    if not len(labeled_images):
        raise DataError("a training batch needs at least one labeled image")
    train = config.train
    iteration = state.iteration + 1
    n_sup, n_unsup = len(labeled_images), len(unlabeled_images)
    beta = train.effective_beta

    loss_sup, sup_parts = _supervised_branch(state, labeled_images, labeled_gts, config, iteration)
    unsup_parts: Dict[str, float] = {}
    stats: Dict[str, float] = {}
    loss_unsup: Union[Tensor, float] = 0.0
    if n_unsup:
        if beta * n_unsup / n_sup == 0.0:
            with no_grad():
                loss_unsup, unsup_parts, stats = _unsupervised_branch(state, unlabeled_images, config, iteration, fill_value)
        else:
            loss_unsup, unsup_parts, stats = _unsupervised_branch(state, unlabeled_images, config, iteration, fill_value)
    loss = total_loss(loss_sup, loss_unsup, n_sup, n_unsup, beta)

    student, velocity = _apply_gradients(state, loss, config)
    teacher = update_teacher(state.teacher, student, iteration, config)
    record = MetricsRecord(
        iteration=iteration,
        phase="semi_supervised",
        label_mode=train.label_mode,
        loss_total=loss.item(),
        loss_sup=loss_sup.item(),
        loss_unsup=float(loss_unsup.item() if isinstance(loss_unsup, Tensor) else loss_unsup),
        **sup_parts,
        **(unsup_parts or _mean_components([], "unsup")),
        pseudo_num_proposals=stats.get("num_proposals"),
        pseudo_mean_confidence=stats.get("mean_max_confidence"),
        pseudo_num_boxes=stats.get("num_boxes"),
        pseudo_mean_score=stats.get("mean_score"),
    )
    return TrainerState(student, teacher, velocity, iteration, state.seed), record


def burn_in(
    images: Sequence[np.ndarray],
    gts: Sequence[GroundTruth],
    config: ExperimentConfig,
    params: Optional[DetectorParams] = None,
) -> DetectorParams:
    """Supervised-only training for ``burn_in_iters``; the result seeds teacher and student."""
    if not len(images):
        raise DataError("burn-in needs a non-empty labeled set")
    params = params or init_detector(config.detector_spec(), seed=config.model.init_seed)
    state = TrainerState.initial(params, config.train.seed)
    n = len(images)
    for _ in range(config.train.burn_in_iters):
        ids = _draw(n, config.train.n_labeled, state.seed, state.iteration + 1, "labeled_batch")
        state, _ = supervised_step(state, [images[i] for i in ids], [gts[i] for i in ids], config)
    return state.student


def _draw(pool_size: int, n: int, seed: int, iteration: int, role: str) -> np.ndarray:
    rng = np.random.default_rng(seed_for(seed, iteration, role))
    return rng.choice(pool_size, size=n, replace=pool_size < n)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainerState, directory: str, config_hash: str = "") -> None:
    """Write both detectors, the momentum buffers and the counter; state.json goes last."""
    os.makedirs(directory, exist_ok=True)
    state.teacher.save(os.path.join(directory, TEACHER_CHECKPOINT), {"role": "teacher", "iteration": state.iteration})
    state.student.save(os.path.join(directory, STUDENT_CHECKPOINT), {"role": "student", "iteration": state.iteration})
    ParamSet(state.velocity.items()).save(os.path.join(directory, VELOCITY_CHECKPOINT), {"kind": "velocity"})
    tmp = os.path.join(directory, f"{STATE_FILE}.tmp")
    with open(tmp, "w") as f:
        json.dump({"iteration": state.iteration, "seed": state.seed, "config_hash": config_hash}, f, indent=2)
    os.replace(tmp, os.path.join(directory, STATE_FILE))
    logger.info(f"Checkpoint at iteration {state.iteration} written to {directory}")


def load_checkpoint(directory: str) -> Tuple[TrainerState, Dict]:
    path = os.path.join(directory, STATE_FILE)
    if not os.path.exists(path):
        raise DataError(f"no checkpoint in {directory}")
    with open(path) as f:
        info = json.load(f)
    teacher, _ = DetectorParams.load(os.path.join(directory, TEACHER_CHECKPOINT))
    student, _ = DetectorParams.load(os.path.join(directory, STUDENT_CHECKPOINT))
    velocity, _ = ParamSet.load(os.path.join(directory, VELOCITY_CHECKPOINT))
    state = TrainerState(
        student=student,
        teacher=teacher,
        velocity={name: t.data.copy() for name, t in velocity.items()},
        iteration=int(info["iteration"]),
        seed=int(info["seed"]),
    )
    return state, info


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TrainingData:
    """Index views of a corpus for one split."""

    corpus: Corpus
    split: DatasetSplit
    unlabeled_eval: np.ndarray

    @classmethod
    def from_corpus(cls, corpus: Corpus, split: DatasetSplit, unlabeled_eval_size: int) -> "TrainingData":
        return cls(corpus, split, split.unlabeled[:unlabeled_eval_size])

    def images(self, ids: Iterable[int]) -> List[np.ndarray]:
        return [self.corpus.image(int(i)) for i in ids]

    def gts(self, ids: Iterable[int]) -> List[GroundTruth]:
        return [self.corpus.gts[int(i)] for i in ids]


def evaluate_state(
    state: TrainerState,
    data: TrainingData,
    config: ExperimentConfig,
    include_student: bool = True,
) -> Dict[str, Optional[float]]:
    """Held-out mAP of the teacher (and student) plus teacher mAP on unlabeled scenes."""
    kwargs = config.model.detect_kwargs()
    eval_images, eval_gts = data.images(data.split.eval), data.gts(data.split.eval)
    teacher = evaluate_model(state.teacher, eval_images, eval_gts, kwargs, desc="eval teacher")
    results: Dict[str, Optional[float]] = {"teacher_map": teacher.map, "teacher_map50": teacher.ap50}
    if include_student:
        student = evaluate_model(state.student, eval_images, eval_gts, kwargs, desc="eval student")
        results.update(student_map=student.map, student_map50=student.ap50)
    else:
        results.update(student_map=teacher.map, student_map50=teacher.ap50)
    if len(data.unlabeled_eval):
        unlabeled = evaluate_model(
            state.teacher, data.images(data.unlabeled_eval), data.gts(data.unlabeled_eval), kwargs, desc="eval unlabeled"
        )
        results["teacher_unlabeled_map"] = unlabeled.map
    return results


@dataclass
class TrainingResult:
    state: TrainerState
    baseline: Dict[str, Optional[float]]
    final: Dict[str, Optional[float]]
    metrics_path: str
    run_dir: str


def _read_baseline(metrics_path: str) -> Dict[str, Optional[float]]:
    with open(metrics_path) as f:
        for line in f.read().splitlines()[1:]:
            record = json.loads(line)
            if record.get("phase") == "burn_in" and record.get("teacher_map") is not None:
                return {k: record.get(k) for k in ("teacher_map", "teacher_map50", "student_map", "student_map50", "teacher_unlabeled_map")}
    return {}


def run_training(
    config: ExperimentConfig,
    corpus: Corpus,
    split: Optional[DatasetSplit] = None,
    resume: bool = False,
    monitor: Optional[TrainingMonitor] = None,
) -> TrainingResult:
    """
    Burn-in then ``total_iters`` mixed iterations, with periodic evaluation,
    checkpoints and an append-only metrics stream in ``config.run_dir``.

    The teacher is the model used for inference; the burn-in evaluation is
    recorded with ``phase="burn_in"`` as the supervised baseline.
    """
    train = config.train
    run_dir = config.run_dir
    ckpt_dir = os.path.join(run_dir, CHECKPOINT_DIR)
    metrics_path = os.path.join(run_dir, METRICS_FILE)
    config_hash = calculate_content_hash(config.resolved())

    if corpus.spec.num_classes != config.scene.num_classes:
        raise DataError(f"corpus has {corpus.spec.num_classes} classes, config expects {config.scene.num_classes}")
    split = split or split_dataset(len(corpus), config.split.labeled_fraction, config.split.seed, corpus.n_eval)
    data = TrainingData.from_corpus(corpus, split, train.unlabeled_eval_size)
    if not len(split.labeled):
        raise DataError("labeled split is empty")
    n_unlabeled = train.n_unlabeled
    if n_unlabeled and not len(split.unlabeled):
        logger.warning("Unlabeled split is empty; running supervised-only iterations")
        n_unlabeled = 0
    fill_value = train.cutout_fill if train.cutout_fill is not None else corpus.mean_pixel

    monitor = monitor or TrainingMonitor(run_dir)
    lineage = DataLineageTracker(config.run_name)
    os.makedirs(run_dir, exist_ok=True)
    write_resolved(config, run_dir)

    resumed = resume and os.path.exists(os.path.join(ckpt_dir, STATE_FILE))
    if resumed:
        state, info = load_checkpoint(ckpt_dir)
        if info.get("config_hash") != config_hash:
            logger.warning("Resuming with a configuration that differs from the checkpointed one")
        kept = MetricsWriter.truncate_after(metrics_path, state.iteration)
        logger.info(f"Resuming {config.run_name} at iteration {state.iteration} ({kept} metrics records kept)")
    else:
        if resume:
            logger.warning(f"No checkpoint under {ckpt_dir}; starting from scratch")
        if os.path.exists(metrics_path):
            os.remove(metrics_path)
        state = TrainerState.initial(init_detector(config.detector_spec(), seed=config.model.init_seed), train.seed)

    lineage.record_step(
        "split",
        inputs={"corpus_spec_hash": corpus.spec_hash},
        outputs={"labeled": len(split.labeled), "unlabeled": len(split.unlabeled), "eval": len(split.eval)},
        metadata={"fraction": split.fraction, "seed": split.seed},
    )
    header = {"run_name": config.run_name, "config_hash": config_hash, "label_mode": train.label_mode}
    burn_end = train.burn_in_iters
    last = burn_end + train.total_iters
    monitor.start_run(config.run_name, config_hash)

    writer = MetricsWriter(metrics_path, header)
    progress = tqdm(total=last, initial=state.iteration, desc=config.run_name, disable=None)
    latest: Dict[str, Optional[float]] = {}
    try:
        if state.iteration == burn_end == 0 and not resumed:
            state, latest = _finish_burn_in(state, None, data, config, writer, monitor, ckpt_dir, config_hash)
        while state.iteration < last:
            iteration = state.iteration + 1
            phase = "burn_in" if iteration <= burn_end else "semi_supervised"
            labeled = split.labeled[_draw(len(split.labeled), train.n_labeled, state.seed, iteration, "labeled_batch")]
            try:
                with StepTimer() as timer:
                    if phase == "burn_in":
                        state, record = supervised_step(state, data.images(labeled), data.gts(labeled), config)
                    else:
                        unlabeled = split.unlabeled[_draw(len(split.unlabeled), n_unlabeled, state.seed, iteration, "unlabeled_batch")] if n_unlabeled else []
                        state, record = train_step(
                            state, data.images(labeled), data.gts(labeled), data.images(unlabeled), config, fill_value
                        )
            except NumericError as e:
                logger.error(f"Numeric failure at iteration {iteration}: {e}", exc_info=True)
                writer.write(MetricsRecord(
                    iteration=iteration, phase=phase, status="numeric_failure",
                    label_mode=train.label_mode, message=str(e),
                ))
                writer.flush()
                monitor.end_run("numeric_failure", str(e))
                monitor.save_metrics()
                raise
            monitor.record_step(phase, timer.duration, {"total": record.loss_total, "sup": record.loss_sup, "unsup": record.loss_unsup or 0.0})
            progress.update(1)

            if state.iteration == burn_end:
                state, latest = _finish_burn_in(state, record, data, config, writer, monitor, ckpt_dir, config_hash)
                continue
            if phase == "semi_supervised" and (state.iteration % train.eval_interval == 0 or state.iteration == last):
                results = evaluate_state(state, data, config)
                latest = results
                record = record.model_copy(update=results)
                monitor.record_evaluation(state.iteration, phase, results)
                monitor.record_pseudo_labels({k: v for k, v in record.model_dump().items() if k.startswith("pseudo_") and v is not None})
                logger.info(
                    f"Iteration {state.iteration}: teacher mAP={results['teacher_map']:.4f} "
                    f"student mAP={results['student_map']:.4f} loss={record.loss_total:.4f}"
                )
                writer.write(record)
                writer.flush()
            else:
                writer.write(record)
            if state.iteration % train.checkpoint_interval == 0 or state.iteration == last:
                writer.flush()
                save_checkpoint(state, ckpt_dir, config_hash)
    except NumericError:
        raise
    except Exception as e:
        logger.error(f"Training run {config.run_name} failed: {e}", exc_info=True)
        monitor.end_run("failed", str(e))
        monitor.save_metrics()
        raise
    finally:
        progress.close()
        writer.close()

    final = latest or evaluate_state(state, data, config)
    baseline = _read_baseline(metrics_path)
    lineage.record_step(
        "train",
        inputs={"config_hash": config_hash},
        outputs={"metrics": metrics_path, "checkpoints": ckpt_dir},
        metadata={"iterations": state.iteration, "final_teacher_map": final.get("teacher_map")},
    )
    lineage.save_lineage(os.path.join(run_dir, "lineage.json"))
    monitor.end_run("completed")
    monitor.save_metrics()
    logger.info(f"Run {config.run_name} finished: baseline mAP={baseline.get('teacher_map')} final teacher mAP={final.get('teacher_map')}")
    return TrainingResult(state=state, baseline=baseline, final=final, metrics_path=metrics_path, run_dir=run_dir)


def _finish_burn_in(
    state: TrainerState,
    record: Optional[MetricsRecord],
    data: TrainingData,
    config: ExperimentConfig,
    writer: MetricsWriter,
    monitor: TrainingMonitor,
    ckpt_dir: str,
    config_hash: str,
) -> Tuple[TrainerState, Dict[str, Optional[float]]]:
    """Copy the student into the teacher, record the supervised baseline and checkpoint it."""
    state = replace(state, teacher=state.student.copy())
    results = evaluate_state(state, data, config, include_student=False)
    if record is None:
        record = MetricsRecord(iteration=state.iteration, phase="burn_in", label_mode=config.train.label_mode)
    writer.write(record.model_copy(update=results))
    writer.flush()
    monitor.record_evaluation(state.iteration, "burn_in", results)
    state.teacher.save(os.path.join(ckpt_dir, BURN_IN_CHECKPOINT), {"role": "burn_in", "iteration": state.iteration})
    save_checkpoint(state, ckpt_dir, config_hash)
    logger.info(f"Burn-in finished at iteration {state.iteration}: supervised baseline mAP={results['teacher_map']:.4f}")
    return state, results
