"""
Box arithmetic for the detector.

Boxes are continuous, corner-exclusive rectangles (area = (x2-x1)*(y2-y1)) in
image pixel coordinates. The public functions take :class:`Box` values; the
``*_array`` variants work on N x 4 float arrays and carry the hot paths.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Caps exp(dw). Anchor and target sides both range over [1, 1000] px, so the
# encode/decode roundtrip needs log-ratios up to ln(1000); a lower cap breaks it.
MAX_LOG_RATIO = math.log(1000.0)
# Decoded boxes never shrink below one pixel per side.
MIN_BOX_SIZE = 1.0


class GeometryError(ValueError):
    """Invalid box or an ROI that does not overlap the image."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise GeometryError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float
    class_id: int

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise GeometryError(f"score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise GeometryError(f"negative class id {self.class_id}")


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def array_to_boxes(arr: np.ndarray) -> List[Box]:
    return [Box(*map(float, row)) for row in arr]


def valid_rows(arr: np.ndarray, min_size: float = 0.0) -> np.ndarray:
    """Mask of rows that form boxes with width and height above ``min_size``."""
    if len(arr) == 0:
        return np.zeros(0, dtype=bool)
    w = arr[:, 2] - arr[:, 0]
    h = arr[:, 3] - arr[:, 1]
    return np.isfinite(arr).all(axis=1) & (w > min_size) & (h > min_size)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between the rows of ``a`` (N x 4) and ``b`` (M x 4)."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0.0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: Box, b: Box) -> float:
    return float(pairwise_iou(boxes_to_array([a]), boxes_to_array([b]))[0, 0])


# ---------------------------------------------------------------------------
# Delta codec
# ---------------------------------------------------------------------------

def encode_deltas_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_deltas_array(
    anchors: np.ndarray,
    deltas: np.ndarray,
    clip: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    """
    Apply deltas to anchors; ``clip=(width, height)`` clamps to the image.

    Width and height are floored at MIN_BOX_SIZE, also after clipping, so any
    finite network output decodes to a valid box.
    """
    if len(anchors) == 0:
        return np.zeros((0, 4))
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    dw = np.minimum(deltas[:, 2], MAX_LOG_RATIO)
    dh = np.minimum(deltas[:, 3], MAX_LOG_RATIO)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = np.maximum(aw * np.exp(dw), MIN_BOX_SIZE)
    h = np.maximum(ah * np.exp(dh), MIN_BOX_SIZE)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if clip is not None:
        width, height = clip
        for lo, hi, limit in ((0, 2, width), (1, 3, height)):
            out[:, lo] = np.clip(out[:, lo], 0.0, max(limit - MIN_BOX_SIZE, 0.0))
            out[:, hi] = np.clip(np.maximum(out[:, hi], out[:, lo] + MIN_BOX_SIZE), 0.0, limit)
    return out


def encode_deltas(anchor: Box, target: Box) -> Tuple[float, float, float, float]:
    d = encode_deltas_array(boxes_to_array([anchor]), boxes_to_array([target]))[0]
    return tuple(float(v) for v in d)


def decode_deltas(anchor: Box, deltas: Sequence[float], clip: Optional[Tuple[float, float]] = None) -> Box:
    out = decode_deltas_array(boxes_to_array([anchor]), np.asarray([deltas], dtype=np.float64), clip=clip)[0]
    return Box(*map(float, out))


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep the lower index first."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    if not (0.0 < iou_thresh <= 1.0):
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = score_order(scores)
    ious = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep: List[int] = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_thresh
    return np.asarray(keep, dtype=np.int64)


def nms(boxes: Sequence[ScoredBox], iou_thresh: float) -> List[int]:
    """Greedy NMS; kept indices in descending score order."""
    arr = boxes_to_array([b.box for b in boxes])
    scores = np.array([b.score for b in boxes], dtype=np.float64)
    return [int(i) for i in nms_array(arr, scores, iou_thresh)]


def batched_nms_array(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Per-class NMS, merged back into one descending-score index list."""
    keep: List[int] = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        keep.extend(int(idx[k]) for k in nms_array(boxes[idx], scores[idx], iou_thresh))
    keep_arr = np.asarray(keep, dtype=np.int64)
    if len(keep_arr) == 0:
        return keep_arr
    # ties across classes resolved by original index
    order = np.lexsort((keep_arr, -scores[keep_arr]))
    return keep_arr[order]


# ---------------------------------------------------------------------------
# Horizontal flip
# ---------------------------------------------------------------------------

def hflip_array(boxes: np.ndarray, image_width: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 0] = image_width - boxes[:, 2]
    out[:, 2] = image_width - boxes[:, 0]
    return out


def hflip_box(b: Box, image_width: float) -> Box:
    if b.x1 < 0 or b.x2 > image_width:
        raise GeometryError(f"box {b.as_tuple()} outside [0, {image_width}]")
    return Box(image_width - b.x2, b.y1, image_width - b.x1, b.y2)


def hflip_deltas(deltas: np.ndarray) -> np.ndarray:
    """Mirror delta rows (..., 4k): dx changes sign, dy/dw/dh are unchanged."""
    out = np.array(deltas, dtype=np.float64, copy=True)
    out[..., 0::4] = -out[..., 0::4]
    return out


# ---------------------------------------------------------------------------
# Anchors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnchorSpec:
    stride: int = 8
    scales: Tuple[float, ...] = (12.0, 20.0, 32.0)
    aspects: Tuple[float, ...] = (1.0, 0.5)

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.aspects)

    def to_dict(self) -> dict:
        return {"stride": self.stride, "scales": list(self.scales), "aspects": list(self.aspects)}

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorSpec":
        return cls(stride=int(d["stride"]), scales=tuple(d["scales"]), aspects=tuple(d["aspects"]))


@dataclass(frozen=True)
class AnchorGrid:
    """Anchors for one image size, ordered (row, column, scale, aspect)."""

    spec: AnchorSpec
    image_height: int
    image_width: int
    anchors: np.ndarray = field(repr=False, compare=False)

    @property
    def feature_shape(self) -> Tuple[int, int]:
        return self.image_height // self.spec.stride, self.image_width // self.spec.stride

    def __len__(self) -> int:
        return len(self.anchors)

    def boxes(self) -> List[Box]:
        return array_to_boxes(self.anchors)


def generate_anchors(spec: AnchorSpec, image_height: int, image_width: int) -> AnchorGrid:
    """Aspect is height / width; each anchor has area scale**2."""
    if image_height % spec.stride or image_width % spec.stride:
        raise GeometryError(f"image {image_height}x{image_width} not divisible by stride {spec.stride}")
    fh, fw = image_height // spec.stride, image_width // spec.stride
    shapes = []
    for s in spec.scales:
        for r in spec.aspects:
            w = s / math.sqrt(r)
            h = s * math.sqrt(r)
            shapes.append((-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h))
    base = np.asarray(shapes, dtype=np.float64)
    ys, xs = np.meshgrid((np.arange(fh) + 0.5) * spec.stride, (np.arange(fw) + 0.5) * spec.stride, indexing="ij")
    centers = np.stack([xs, ys, xs, ys], axis=-1).reshape(fh * fw, 1, 4)
    anchors = (centers + base[None, :, :]).reshape(-1, 4)
    return AnchorGrid(spec=spec, image_height=image_height, image_width=image_width, anchors=anchors)
