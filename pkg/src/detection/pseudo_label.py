"""
Teacher-side targets for the unsupervised branch.

Everything here runs under ``no_grad`` and returns plain arrays, so nothing a
teacher produces can be linked into a student loss graph.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from src.autograd.ops import softmax_array
from src.autograd.tensor import no_grad
from src.detection.augment import DEFAULT_FILL, StrongAugPlan, apply_strong, plan_strong
from src.detection.detector import (
    DetectorParams,
    GroundTruth,
    Proposals,
    RpnOutput,
    anchors_for,
    as_image,
    backbone_forward,
    detect,
    roi_forward,
    rpn_forward,
    top_n_proposals,
)
from src.detection.geometry import Box, ScoredBox, hflip_array, hflip_deltas

logger = logging.getLogger(__name__)

ENSEMBLE_MODES = ("none", "flip", "random_aug")

ProposalLike = Union[Proposals, np.ndarray, Sequence[Box]]


@dataclass(frozen=True, eq=False)
class RpnTargets:
    probs: np.ndarray  # K x 2
    deltas: np.ndarray  # K x 4

    def __len__(self) -> int:
        return len(self.probs)

    @classmethod
    def from_output(cls, rpn: RpnOutput) -> "RpnTargets":
        return cls(softmax_array(rpn.logits.data, axis=1), rpn.deltas.data.copy())


@dataclass(frozen=True, eq=False)
class RoiTargets:
    probs: np.ndarray  # R x (C+1)
    deltas: np.ndarray  # R x 4C

    def __len__(self) -> int:
        return len(self.probs)

    @classmethod
    def empty(cls, num_classes: int) -> "RoiTargets":
        return cls(np.zeros((0, num_classes + 1)), np.zeros((0, 4 * num_classes)))

    @staticmethod
    def average(a: "RoiTargets", b: "RoiTargets") -> "RoiTargets":
        return RoiTargets(0.5 * (a.probs + b.probs), 0.5 * (a.deltas + b.deltas))


@dataclass(frozen=True, eq=False)
class SoftPseudoLabel:
    rpn: RpnTargets
    roi: RoiTargets
    proposals: Proposals

    def summary(self) -> Dict[str, float]:
        if not len(self.roi):
            return {"num_proposals": 0, "mean_max_confidence": 0.0}
        return {
            "num_proposals": len(self.roi),
            "mean_max_confidence": float(self.roi.probs.max(axis=1).mean()),
        }


@dataclass(frozen=True, eq=False)
class HardPseudoGT:
    gt: GroundTruth
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.gt)

    def summary(self) -> Dict[str, float]:
        return {
            "num_boxes": len(self.gt),
            "mean_score": float(self.scores.mean()) if len(self.scores) else 0.0,
        }


def _proposal_array(proposals: ProposalLike) -> np.ndarray:
    if isinstance(proposals, Proposals):
        return proposals.boxes
    if isinstance(proposals, np.ndarray):
        return proposals.reshape(-1, 4).astype(np.float64)
    return Proposals.from_boxes(list(proposals)).boxes


def _teacher_rpn_pass(teacher: DetectorParams, img: np.ndarray):
    with no_grad():
        features = backbone_forward(img, teacher)
        anchors = anchors_for(teacher.spec.anchors, *img.shape[:2])
        rpn = rpn_forward(features, teacher, anchors)
    return features, anchors, rpn


def teacher_rpn_targets(teacher: DetectorParams, weak_image: np.ndarray, rpn: Optional[RpnOutput] = None) -> RpnTargets:
    """
    Softmaxed objectness and raw deltas for every anchor of the weak view.

    ``rpn`` reuses a teacher pass already made on ``weak_image``. The RPN part
    is never ensembled.
    """
    if rpn is None:
        _, _, rpn = _teacher_rpn_pass(teacher, as_image(weak_image))
    return RpnTargets.from_output(rpn)


def teacher_roi_branch(teacher: DetectorParams, image: np.ndarray, proposals: ProposalLike, features=None) -> RoiTargets:
    """One teacher ROI pass: class distributions and all-class deltas at ``proposals``."""
    boxes = _proposal_array(proposals)
    if len(boxes) == 0:
        return RoiTargets.empty(teacher.num_classes)
    with no_grad():
        if features is None:
            features = backbone_forward(image, teacher)
        roi = roi_forward(features, boxes, teacher)
    return RoiTargets(roi.probabilities(), roi.deltas.data.copy())


def teacher_ensemble_roi(teacher: DetectorParams, image: np.ndarray, proposals: ProposalLike, features=None) -> RoiTargets:
    """
    Flip ensemble of the ROI head.

    The second branch runs the backbone on the mirrored image and pools at the
    mirrored proposals; its deltas are mapped back by negating dx before the
    two branches are averaged. Class probabilities are averaged after softmax.
    """
    img = as_image(image)
    boxes = _proposal_array(proposals)
    original = teacher_roi_branch(teacher, img, boxes, features=features)
    if len(boxes) == 0:
        return original
    mirrored = teacher_roi_branch(teacher, np.ascontiguousarray(img[:, ::-1]), hflip_array(boxes, img.shape[1]))
    return RoiTargets.average(original, RoiTargets(mirrored.probs, hflip_deltas(mirrored.deltas)))


def random_aug_ensemble_roi(
    teacher: DetectorParams,
    image: np.ndarray,
    proposals: ProposalLike,
    seed: int,
    plan: Optional[StrongAugPlan] = None,
    fill_value: float = DEFAULT_FILL,
    features=None,
) -> RoiTargets:
    """Average of the plain branch and a strong-augmented copy pooled at the same proposals."""
    img = as_image(image)
    boxes = _proposal_array(proposals)
    original = teacher_roi_branch(teacher, img, boxes, features=features)
    if len(boxes) == 0:
        return original
    plan = plan or plan_strong(seed, img.shape[0], img.shape[1])
    augmented = teacher_roi_branch(teacher, apply_strong(img, plan, fill_value=fill_value), boxes)
    return RoiTargets.average(original, augmented)


def make_soft_label(
    teacher: DetectorParams,
    weak_image: np.ndarray,
    n: int = 640,
    ensemble: str = "flip",
    nms_thresh: float = 0.7,
    seed: int = 0,
    fill_value: float = DEFAULT_FILL,
) -> SoftPseudoLabel:
    """RPN targets for all anchors, teacher top-N proposals and ROI targets on them."""
    if n < 1:
        raise ValueError(f"proposal count must be >= 1, got {n}")
    if ensemble not in ENSEMBLE_MODES:
        raise ValueError(f"unknown ensemble mode {ensemble!r}")
    img = as_image(weak_image)
    features, anchors, rpn = _teacher_rpn_pass(teacher, img)
    proposals = top_n_proposals(rpn, anchors, n, nms_thresh)

    if not len(proposals):
        logger.warning("Teacher produced no proposals; ROI targets are empty")
        roi = RoiTargets.empty(teacher.num_classes)
    elif ensemble == "flip":
        roi = teacher_ensemble_roi(teacher, img, proposals, features=features)
    elif ensemble == "random_aug":
        roi = random_aug_ensemble_roi(teacher, img, proposals, seed, fill_value=fill_value, features=features)
    else:
        roi = teacher_roi_branch(teacher, img, proposals, features=features)
    return SoftPseudoLabel(rpn=teacher_rpn_targets(teacher, img, rpn=rpn), roi=roi, proposals=proposals)


def filter_detections(detections: Sequence[ScoredBox], theta: float) -> List[ScoredBox]:
    """Keep detections with score >= theta."""
    if not (0.0 < theta <= 1.0):
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    return [d for d in detections if d.score >= theta]


def make_hard_label(
    teacher: DetectorParams,
    weak_image: np.ndarray,
    theta: float = 0.7,
    nms_thresh: float = 0.5,
    n_proposals: int = 100,
) -> HardPseudoGT:
    """Teacher detections at or above ``theta`` as pseudo ground truth."""
    kept = filter_detections(detect(weak_image, teacher, score_thresh=theta, nms_thresh=nms_thresh, n_proposals=n_proposals), theta)
    gt = GroundTruth.from_pairs([(d.box, d.class_id) for d in kept])
    return HardPseudoGT(gt=gt, scores=np.array([d.score for d in kept], dtype=np.float64))
