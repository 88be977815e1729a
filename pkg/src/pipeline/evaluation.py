"""
COCO-style mean average precision.

Per class and IoU threshold, detections from all images are ranked by score
and greedily matched to the unmatched GT of the same class with the highest
IoU at or above the threshold. AP is the area under the all-point
interpolated precision/recall curve; classes without GT are excluded.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from src.detection.detector import DetectorParams, GroundTruth, detect
from src.detection.geometry import ScoredBox, boxes_to_array, pairwise_iou

logger = logging.getLogger(__name__)

COCO_THRESHOLDS = tuple(float(t) for t in np.round(np.arange(0.50, 0.951, 0.05), 2))


@dataclass
class MapResult:
    ap: Dict[float, Dict[int, float]] = field(default_factory=dict)
    ap50: float = 0.0
    map: float = 0.0

    def per_class(self) -> Dict[int, float]:
        classes = sorted({c for per in self.ap.values() for c in per})
        return {c: float(np.mean([self.ap[t][c] for t in self.ap])) for c in classes}

    def to_dict(self) -> Dict:
        return {
            "ap50": self.ap50,
            "map": self.map,
            "per_class": {str(c): v for c, v in self.per_class().items()},
            "per_threshold": {f"{t:.2f}": float(np.mean(list(per.values()))) if per else 0.0 for t, per in self.ap.items()},
        }


def all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _class_ap(
    detections: Sequence[Sequence[ScoredBox]],
    gts: Sequence[GroundTruth],
    class_id: int,
    iou_thresh: float,
) -> float:
    gt_boxes = [gt.boxes[gt.classes == class_id] for gt in gts]
    n_gt = sum(len(b) for b in gt_boxes)
    records = [
        (d.score, img, d.box)
        for img, dets in enumerate(detections)
        for d in dets
        if d.class_id == class_id
    ]
    if not records:
        return 0.0
    # stable: equal scores keep image/detection order
    order = sorted(range(len(records)), key=lambda i: -records[i][0])
    matched = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        _, img, box = records[i]
        if not len(gt_boxes[img]):
            continue
        ious = pairwise_iou(boxes_to_array([box]), gt_boxes[img])[0]
        ious[matched[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            matched[img][best] = True
            tp[rank] = 1.0
    acc_tp = np.cumsum(tp)
    acc_fp = np.cumsum(1.0 - tp)
    recall = acc_tp / n_gt
    precision = acc_tp / (acc_tp + acc_fp)
    return all_point_ap(recall, precision)


def evaluate_map(
    detections: Sequence[Sequence[ScoredBox]],
    gts: Sequence[GroundTruth],
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> MapResult:
    """AP per class per threshold, AP50 and mAP averaged over classes then thresholds."""
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detection lists for {len(gts)} images")
    thresholds = [float(t) for t in iou_thresholds]
    if not thresholds or thresholds != sorted(thresholds):
        raise ValueError(f"IoU thresholds must be non-empty and sorted, got {thresholds}")
    classes = sorted({int(c) for gt in gts for c in gt.classes})
    if not classes:
        logger.warning("No ground truth objects; mAP is 0")
        return MapResult(ap={t: {} for t in thresholds})

    ap = {t: {c: _class_ap(detections, gts, c, t) for c in classes} for t in thresholds}
    per_threshold = [float(np.mean(list(ap[t].values()))) for t in thresholds]
    if 0.5 in ap:
        ap50 = per_threshold[thresholds.index(0.5)]
    else:
        ap50 = float(np.mean([_class_ap(detections, gts, c, 0.5) for c in classes]))
    return MapResult(ap=ap, ap50=ap50, map=float(np.mean(per_threshold)))


def evaluate_model(
    params: DetectorParams,
    images: Sequence[np.ndarray],
    gts: Sequence[GroundTruth],
    detect_kwargs: Optional[Dict] = None,
    desc: str = "eval",
) -> MapResult:
    """Run ``detect`` on every image (no augmentation) and score against ``gts``."""
    detect_kwargs = detect_kwargs or {}
    detections: List[List[ScoredBox]] = [
        detect(img, params, **detect_kwargs)
        for img in tqdm(images, desc=desc, leave=False, disable=None)
    ]
    result = evaluate_map(detections, gts)
    logger.debug(f"{desc}: AP50={result.ap50:.4f} mAP={result.map:.4f} over {len(gts)} images")
    return result
