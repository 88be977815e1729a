"""
Micro two-stage detector.

backbone (3 stride-2 conv blocks) -> RPN head (objectness + deltas per anchor)
-> proposal selection -> ROI max pooling -> ROI head (C+1 class logits and
class-dependent deltas). Images are H x W x 3 arrays with pixel values in
[0, 255]; the background class is the last logit column (index C).
"""
import functools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.autograd import ops
from src.autograd.params import ParamSet
from src.autograd.tensor import ShapeError, Tensor, make_node, no_grad
from src.detection.geometry import (
    AnchorGrid,
    AnchorSpec,
    Box,
    GeometryError,
    ScoredBox,
    batched_nms_array,
    decode_deltas_array,
    encode_deltas_array,
    generate_anchors,
    nms_array,
    pairwise_iou,
    valid_rows,
)

logger = logging.getLogger(__name__)

PIXEL_SCALE = 1.0 / 255.0
MIN_PROPOSAL_SIZE = 1.0

ImageLike = Union[np.ndarray, Tensor]


# ---------------------------------------------------------------------------
# Architecture and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorSpec:
    """Architecture hyperparameters; stored in every checkpoint."""

    num_classes: int = 3
    channels: Tuple[int, ...] = (8, 16, 32)
    rpn_channels: int = 32
    pool_size: int = 4
    hidden: int = 64
    anchors: AnchorSpec = AnchorSpec()

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.anchors.stride != self.stride:
            raise ValueError(f"anchor stride {self.anchors.stride} != backbone stride {self.stride}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "channels": list(self.channels),
            "rpn_channels": self.rpn_channels,
            "pool_size": self.pool_size,
            "hidden": self.hidden,
            "anchors": self.anchors.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorSpec":
        return cls(
            num_classes=int(d["num_classes"]),
            channels=tuple(d["channels"]),
            rpn_channels=int(d["rpn_channels"]),
            pool_size=int(d["pool_size"]),
            hidden=int(d["hidden"]),
            anchors=AnchorSpec.from_dict(d["anchors"]),
        )


def parameter_shapes(spec: DetectorSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    cin = 3
    for i, cout in enumerate(spec.channels, 1):
        shapes.append((f"backbone.conv{i}.weight", (3, 3, cin, cout)))
        shapes.append((f"backbone.conv{i}.bias", (cout,)))
        cin = cout
    a = spec.anchors.per_cell
    r = spec.rpn_channels
    shapes += [
        ("rpn.conv.weight", (3, 3, cin, r)),
        ("rpn.conv.bias", (r,)),
        ("rpn.cls.weight", (1, 1, r, 2 * a)),
        ("rpn.cls.bias", (2 * a,)),
        ("rpn.reg.weight", (1, 1, r, 4 * a)),
        ("rpn.reg.bias", (4 * a,)),
        ("roi.fc.weight", (spec.pool_size * spec.pool_size * cin, spec.hidden)),
        ("roi.fc.bias", (spec.hidden,)),
        ("roi.cls.weight", (spec.hidden, spec.num_classes + 1)),
        ("roi.cls.bias", (spec.num_classes + 1,)),
        ("roi.reg.weight", (spec.hidden, 4 * spec.num_classes)),
        ("roi.reg.bias", (4 * spec.num_classes,)),
    ]
    return shapes


@dataclass
class DetectorParams:
    """All trainable weights of one detector plus the spec they belong to."""

    spec: DetectorSpec
    params: ParamSet

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.spec, self.params.copy())

    def with_params(self, params: ParamSet) -> "DetectorParams":
        self.params.check_compatible(params, "with_params")
        return DetectorParams(self.spec, params)

    def is_compatible(self, other: "DetectorParams") -> bool:
        return self.spec == other.spec and self.params.is_compatible(other.params)

    def equals(self, other: "DetectorParams") -> bool:
        return self.spec == other.spec and self.params.equals(other.params)

    def meta(self) -> dict:
        return {"kind": "detector", "spec": self.spec.to_dict()}

    def save(self, path: str, extra: Optional[dict] = None) -> None:
        meta = self.meta()
        if extra:
            meta.update(extra)
        self.params.save(path, meta)

    @classmethod
    def load(cls, path: str) -> Tuple["DetectorParams", dict]:
        params, meta = ParamSet.load(path)
        if meta.get("kind") != "detector":
            raise ValueError(f"{path} is not a detector checkpoint")
        spec = DetectorSpec.from_dict(meta["spec"])
        expected = dict(parameter_shapes(spec))
        if params.shapes() != expected:
            raise ShapeError("load", f"{path} does not match its own spec")
        return cls(spec, params), meta

    @classmethod
    def zeros(cls, spec: DetectorSpec) -> "DetectorParams":
        return cls(spec, ParamSet((name, np.zeros(shape)) for name, shape in parameter_shapes(spec)))


def init_detector(spec: Optional[DetectorSpec] = None, seed: int = 0) -> DetectorParams:
    """He-uniform weights, zero biases, drawn in parameter order from ``seed``."""
    spec = spec or DetectorSpec()
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape in parameter_shapes(spec):
        if name.endswith(".bias"):
            entries.append((name, np.zeros(shape)))
        else:
            limit = np.sqrt(6.0 / int(np.prod(shape[:-1])))
            entries.append((name, rng.uniform(-limit, limit, size=shape)))
    return DetectorParams(spec, ParamSet(entries))


@functools.lru_cache(maxsize=32)
def anchors_for(spec: AnchorSpec, height: int, width: int) -> AnchorGrid:
    grid = generate_anchors(spec, height, width)
    grid.anchors.setflags(write=False)
    return grid


def as_image(image: ImageLike) -> np.ndarray:
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ShapeError("image", f"expected HxWx3, got {data.shape}")
    return data.astype(np.float64, copy=False)


# ---------------------------------------------------------------------------
# Ground truth and proposals
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Boxes (G x 4) and class ids (G,) for one image."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(boxes) != len(classes):
            raise ShapeError("GroundTruth", f"{len(boxes)} boxes but {len(classes)} classes")
        if not valid_rows(boxes).all():
            raise GeometryError("ground truth contains degenerate boxes")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "classes", classes)

    def __len__(self) -> int:
        return len(self.classes)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[Box, int]]) -> "GroundTruth":
        if not pairs:
            return cls()
        return cls(np.array([b.as_tuple() for b, _ in pairs]), np.array([c for _, c in pairs]))

    def pairs(self) -> List[Tuple[Box, int]]:
        return [(Box(*map(float, b)), int(c)) for b, c in zip(self.boxes, self.classes)]

    def check(self, height: float, width: float, num_classes: int) -> None:
        if not len(self):
            return
        if self.classes.min() < 0 or self.classes.max() >= num_classes:
            raise GeometryError(f"class ids outside [0, {num_classes})")
        b = self.boxes
        if b[:, 0].min() < 0 or b[:, 1].min() < 0 or b[:, 2].max() > width or b[:, 3].max() > height:
            raise GeometryError(f"ground truth outside the {width}x{height} image")


@dataclass(eq=False)
class Proposals:
    """
    Proposal boxes with their RPN objectness.

    After supervised sampling ``labels`` holds the assigned class per row
    (``num_classes`` for background) and ``targets`` the matched GT box.
    """

    boxes: np.ndarray
    scores: np.ndarray
    labels: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self) -> Iterator[Box]:
        return iter(self.to_boxes())

    def to_boxes(self) -> List[Box]:
        return [Box(*map(float, row)) for row in self.boxes]

    @classmethod
    def empty(cls) -> "Proposals":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 4)))

    @classmethod
    def from_boxes(cls, boxes: Sequence[Box]) -> "Proposals":
        arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)
        return cls(arr, np.ones(len(arr)))


@dataclass(frozen=True)
class SamplingSpec:
    rpn_batch: int = 32
    rpn_positive_fraction: float = 0.5
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    roi_batch: int = 64
    roi_foreground_fraction: float = 0.25
    roi_foreground_iou: float = 0.5
    train_proposals: int = 128
    nms_thresh: float = 0.7


def _subsample(indices: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    if len(indices) <= k:
        return indices
    return np.sort(rng.choice(indices, size=k, replace=False))


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def backbone_forward(image: ImageLike, params: DetectorParams) -> Tensor:
    """3x3 stride-2 conv + ReLU per block; output is H/8 x W/8 x channels[-1]."""
    img = as_image(image)
    stride = params.spec.stride
    if img.shape[0] % stride or img.shape[1] % stride:
        raise ShapeError("backbone_forward", f"image {img.shape[:2]} not divisible by stride {stride}")
    x = Tensor(img * PIXEL_SCALE)
    for i in range(1, len(params.spec.channels) + 1):
        x = ops.relu(ops.conv2d(x, params[f"backbone.conv{i}.weight"], params[f"backbone.conv{i}.bias"], stride=2, pad=1))
    return x


@dataclass(eq=False)
class RpnOutput:
    logits: Tensor  # K x 2, column 1 is foreground
    deltas: Tensor  # K x 4

    def __len__(self) -> int:
        return self.logits.shape[0]

    def objectness(self) -> np.ndarray:
        return ops.softmax_array(self.logits.data, axis=1)[:, 1]


def rpn_forward(features: Tensor, params: DetectorParams, anchors: AnchorGrid) -> RpnOutput:
    fh, fw = anchors.feature_shape
    if features.shape[:2] != (fh, fw):
        raise ShapeError("rpn_forward", f"features {features.shape} do not match anchor grid {fh}x{fw}")
    a = params.spec.anchors.per_cell
    h = ops.relu(ops.conv2d(features, params["rpn.conv.weight"], params["rpn.conv.bias"], pad=1))
    logits = ops.conv2d(h, params["rpn.cls.weight"], params["rpn.cls.bias"])
    deltas = ops.conv2d(h, params["rpn.reg.weight"], params["rpn.reg.bias"])
    return RpnOutput(
        logits=ops.reshape(logits, (fh * fw * a, 2)),
        deltas=ops.reshape(deltas, (fh * fw * a, 4)),
    )


def top_n_proposals(rpn: RpnOutput, anchors: AnchorGrid, n: int, nms_thresh: float = 0.7) -> Proposals:
    """Decode every anchor, NMS, then keep the ``n`` highest-objectness survivors."""
    if n < 1:
        raise ValueError(f"proposal count must be >= 1, got {n}")
    if len(rpn) != len(anchors):
        raise ShapeError("select_proposals", f"{len(rpn)} RPN rows for {len(anchors)} anchors")
    if len(rpn) == 0:
        return Proposals.empty()
    boxes = decode_deltas_array(anchors.anchors, rpn.deltas.data, clip=(anchors.image_width, anchors.image_height))
    scores = rpn.objectness()
    ok = np.flatnonzero(valid_rows(boxes, MIN_PROPOSAL_SIZE))
    keep = ok[nms_array(boxes[ok], scores[ok], nms_thresh)][:n]
    return Proposals(boxes[keep], scores[keep])


def sample_rois(
    candidates: np.ndarray,
    gt: GroundTruth,
    num_classes: int,
    sampling: SamplingSpec,
    rng: np.random.Generator,
    candidate_scores: Optional[np.ndarray] = None,
) -> Proposals:
    """Fixed-size foreground/background ROI sample from candidates plus the GT boxes."""
    boxes = np.concatenate([candidates.reshape(-1, 4), gt.boxes]) if len(gt) else candidates.reshape(-1, 4)
    scores = candidate_scores if candidate_scores is not None else np.zeros(len(candidates))
    scores = np.concatenate([scores, np.ones(len(gt))])
    if len(boxes) == 0:
        return Proposals.empty()
    if len(gt):
        ious = pairwise_iou(boxes, gt.boxes)
        matched = ious.argmax(axis=1)
        best = ious.max(axis=1)
    else:
        matched = np.zeros(len(boxes), dtype=np.int64)
        best = np.zeros(len(boxes))
    fg = np.flatnonzero(best >= sampling.roi_foreground_iou)
    bg = np.flatnonzero(best < sampling.roi_foreground_iou)
    fg = _subsample(fg, int(round(sampling.roi_batch * sampling.roi_foreground_fraction)), rng)
    bg = _subsample(bg, sampling.roi_batch - len(fg), rng)
    keep = np.concatenate([fg, bg]).astype(np.int64)

    labels = np.full(len(keep), num_classes, dtype=np.int64)
    targets = np.zeros((len(keep), 4))
    if len(fg):
        labels[: len(fg)] = gt.classes[matched[fg]]
        targets[: len(fg)] = gt.boxes[matched[fg]]
    return Proposals(boxes[keep], scores[keep], labels, targets)


def select_proposals(
    rpn: RpnOutput,
    anchors: AnchorGrid,
    mode: str = "teacher_topN",
    n: int = 640,
    nms_thresh: float = 0.7,
    gt: Optional[GroundTruth] = None,
    num_classes: int = 3,
    sampling: Optional[SamplingSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> Proposals:
    """
    Proposal selection.

    Args:
        mode: ``teacher_topN`` keeps the top ``n`` proposals after NMS, sorted by
            descending objectness. ``supervised_sampling`` draws a fixed
            foreground/background mix against ``gt`` from the training top-N.
    """
    if mode == "teacher_topN":
        return top_n_proposals(rpn, anchors, n, nms_thresh)
    if mode == "supervised_sampling":
        if gt is None:
            raise ValueError("supervised_sampling requires ground truth")
        sampling = sampling or SamplingSpec()
        rng = rng if rng is not None else np.random.default_rng(0)
        candidates = top_n_proposals(rpn, anchors, sampling.train_proposals, nms_thresh)
        return sample_rois(candidates.boxes, gt, num_classes, sampling, rng, candidates.scores)
    raise ValueError(f"unknown proposal mode {mode!r}")


def _bin_edges(lo: np.ndarray, hi: np.ndarray, n: int, limit: int) -> Tuple[np.ndarray, np.ndarray]:
    width = (hi - lo) / n
    j = np.arange(n)
    start = np.floor(lo[:, None] + j * width[:, None]).astype(np.int64)
    end = np.ceil(lo[:, None] + (j + 1) * width[:, None]).astype(np.int64)
    start = np.clip(start, 0, limit - 1)
    end = np.minimum(np.maximum(end, start + 1), limit)
    return start, end


def roi_pool_batch(features: Tensor, boxes: np.ndarray, out_size: int, stride: int) -> Tensor:
    """
    Max pooling over an ``out_size`` x ``out_size`` grid of feature-cell bins
    for each of R boxes (image coordinates). Returns R x out x out x C.
    """
    fh, fw, c = features.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    r = len(boxes)
    if r == 0:
        return Tensor(np.zeros((0, out_size, out_size, c)))
    fb = boxes / stride
    x1, x2 = np.clip(fb[:, 0], 0, fw), np.clip(fb[:, 2], 0, fw)
    y1, y2 = np.clip(fb[:, 1], 0, fh), np.clip(fb[:, 3], 0, fh)
    outside = (x2 <= x1) | (y2 <= y1)
    if outside.any():
        raise GeometryError(f"ROI {boxes[np.argmax(outside)].tolist()} does not overlap the feature map")

    ys, ye = _bin_edges(y1, y2, out_size, fh)
    xs, xe = _bin_edges(x1, x2, out_size, fw)
    rows, cols = np.arange(fh), np.arange(fw)
    ymask = (rows >= ys[..., None]) & (rows < ye[..., None])  # R x out x fh
    xmask = (cols >= xs[..., None]) & (cols < xe[..., None])  # R x out x fw
    flat = features.data.reshape(fh * fw, c)

    out = np.empty((r, out_size, out_size, c))
    arg = np.empty((r, out_size, out_size, c), dtype=np.int64)
    for i in range(out_size):
        for j in range(out_size):
            mask = (ymask[:, i, :, None] & xmask[:, j, None, :]).reshape(r, fh * fw)
            vals = np.where(mask[:, :, None], flat[None], -np.inf)
            a = vals.argmax(axis=1)
            arg[:, i, j] = a
            out[:, i, j] = np.take_along_axis(vals, a[:, None, :], axis=1)[:, 0]

    def _backward(g):
        grad = np.zeros((fh * fw, c))
        channel = np.broadcast_to(np.arange(c), arg.shape)
        np.add.at(grad, (arg.reshape(-1), channel.reshape(-1)), g.reshape(-1))
        return (grad.reshape(fh, fw, c),)

    return make_node("roi_pool", out, (features,), _backward)


def roi_pool(features: Tensor, proposal: Box, out_size: int, stride: int = 8) -> Tensor:
    pooled = roi_pool_batch(features, np.array([proposal.as_tuple()]), out_size, stride)
    return ops.reshape(pooled, pooled.shape[1:])


@dataclass(eq=False)
class RoiOutput:
    logits: Tensor  # R x (C+1), background last
    deltas: Tensor  # R x 4C

    def __len__(self) -> int:
        return self.logits.shape[0]

    def probabilities(self) -> np.ndarray:
        return ops.softmax_array(self.logits.data, axis=1)


def roi_head_forward(pooled: Tensor, params: DetectorParams) -> RoiOutput:
    if pooled.data.ndim != 4:
        raise ShapeError("roi_head_forward", f"expected R x out x out x C, got {pooled.shape}")
    r, oh, ow, c = pooled.shape
    flat = ops.reshape(pooled, (r, oh * ow * c))
    hidden = ops.relu(ops.linear(flat, params["roi.fc.weight"], params["roi.fc.bias"]))
    return RoiOutput(
        logits=ops.linear(hidden, params["roi.cls.weight"], params["roi.cls.bias"]),
        deltas=ops.linear(hidden, params["roi.reg.weight"], params["roi.reg.bias"]),
    )


def roi_forward(features: Tensor, boxes: np.ndarray, params: DetectorParams) -> RoiOutput:
    pooled = roi_pool_batch(features, boxes, params.spec.pool_size, params.spec.stride)
    return roi_head_forward(pooled, params)


# ---------------------------------------------------------------------------
# Supervised loss
# ---------------------------------------------------------------------------

def match_anchors(anchors: np.ndarray, gt: GroundTruth, sampling: SamplingSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Anchor labels (1 positive, 0 negative, -1 ignored) and the matched GT index.

    Each GT's highest-IoU anchor is positive even below the positive threshold.
    """
    labels = np.full(len(anchors), -1, dtype=np.int64)
    matched = np.zeros(len(anchors), dtype=np.int64)
    if not len(gt):
        labels[:] = 0
        return labels, matched
    ious = pairwise_iou(anchors, gt.boxes)
    matched = ious.argmax(axis=1)
    best = ious.max(axis=1)
    labels[best <= sampling.rpn_negative_iou] = 0
    labels[best >= sampling.rpn_positive_iou] = 1
    best_anchor = ious.argmax(axis=0)
    for g, a in enumerate(best_anchor):
        if ious[a, g] > 0:
            labels[a] = 1
            matched[a] = g
    return labels, matched


def rpn_loss(
    rpn: RpnOutput,
    anchors: np.ndarray,
    gt: GroundTruth,
    sampling: SamplingSpec,
    rng: np.random.Generator,
) -> Tuple[Tensor, Tensor]:
    """Mean CE over sampled anchors and smooth-L1 over positives, both per sampled anchor."""
    labels, matched = match_anchors(anchors, gt, sampling)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    pos = _subsample(pos, int(sampling.rpn_batch * sampling.rpn_positive_fraction), rng)
    neg = _subsample(neg, sampling.rpn_batch - len(pos), rng)
    sampled = np.concatenate([pos, neg]).astype(np.int64)
    if len(sampled) == 0:
        return ops.constant(0.0), ops.constant(0.0)
    cls_loss = ops.cross_entropy(ops.gather(rpn.logits, sampled), labels[sampled])
    if len(pos) == 0:
        return cls_loss, ops.constant(0.0)
    targets = encode_deltas_array(anchors[pos], gt.boxes[matched[pos]])
    loc_loss = ops.scale(ops.smooth_l1(ops.gather(rpn.deltas, pos), targets), 1.0 / len(sampled))
    return cls_loss, loc_loss


def roi_loss(roi: RoiOutput, proposals: Proposals, num_classes: int) -> Tuple[Tensor, Tensor]:
    """Mean CE over sampled ROIs; smooth-L1 on the GT-class delta row of foreground ROIs."""
    n = len(proposals)
    if n == 0:
        return ops.constant(0.0), ops.constant(0.0)
    cls_loss = ops.cross_entropy(roi.logits, proposals.labels)
    fg = np.flatnonzero(proposals.labels < num_classes)
    if len(fg) == 0:
        return cls_loss, ops.constant(0.0)
    cols = proposals.labels[fg, None] * 4 + np.arange(4)
    pred = ops.gather(roi.deltas, (fg[:, None], cols))
    targets = encode_deltas_array(proposals.boxes[fg], proposals.targets[fg])
    return cls_loss, ops.scale(ops.smooth_l1(pred, targets), 1.0 / n)


def supervised_loss(
    image: ImageLike,
    gt: GroundTruth,
    params: DetectorParams,
    sampling: Optional[SamplingSpec] = None,
    rng: Optional[np.random.Generator] = None,
    proposals: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """
    Faster R-CNN loss: RPN CE + RPN smooth-L1 + ROI CE + ROI smooth-L1.

    ``proposals`` replaces the RPN top-N as ROI candidates (GT boxes are still
    appended), which makes the loss a smooth function of the parameters for
    gradient checking.
    """
    sampling = sampling or SamplingSpec()
    rng = rng if rng is not None else np.random.default_rng(0)
    img = as_image(image)
    height, width = img.shape[:2]
    gt.check(height, width, params.num_classes)

    features = backbone_forward(img, params)
    anchors = anchors_for(params.spec.anchors, height, width)
    rpn = rpn_forward(features, params, anchors)
    rpn_cls, rpn_loc = rpn_loss(rpn, anchors.anchors, gt, sampling, rng)

    if proposals is None:
        rois = select_proposals(
            rpn, anchors, "supervised_sampling", nms_thresh=sampling.nms_thresh,
            gt=gt, num_classes=params.num_classes, sampling=sampling, rng=rng,
        )
    else:
        rois = sample_rois(np.asarray(proposals, dtype=np.float64), gt, params.num_classes, sampling, rng)
    roi = roi_forward(features, rois.boxes, params)
    roi_cls, roi_loc = roi_loss(roi, rois, params.num_classes)

    terms = {"rpn_cls": rpn_cls, "rpn_loc": rpn_loc, "roi_cls": roi_cls, "roi_loc": roi_loc}
    total = ops.add_all(list(terms.values()))
    return total, {name: t.item() for name, t in terms.items()}


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def detections_from_roi(
    roi: RoiOutput,
    proposals: np.ndarray,
    image_size: Tuple[int, int],
    num_classes: int,
    score_thresh: float,
    nms_thresh: float,
    max_detections: int = 50,
) -> List[ScoredBox]:
    """Per-class decode, score filter and per-class NMS of ROI head output."""
    height, width = image_size
    probs = roi.probabilities()
    deltas = roi.deltas.data
    all_boxes, all_scores, all_classes = [], [], []
    for c in range(num_classes):
        boxes = decode_deltas_array(proposals, deltas[:, 4 * c:4 * c + 4], clip=(width, height))
        scores = probs[:, c]
        ok = valid_rows(boxes) & (scores >= score_thresh)
        all_boxes.append(boxes[ok])
        all_scores.append(scores[ok])
        all_classes.append(np.full(int(ok.sum()), c, dtype=np.int64))
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    classes = np.concatenate(all_classes)
    keep = batched_nms_array(boxes, scores, classes, nms_thresh)[:max_detections]
    return [
        ScoredBox(Box(*map(float, boxes[i])), float(np.clip(scores[i], 0.0, 1.0)), int(classes[i]))
        for i in keep
    ]


def detect(
    image: ImageLike,
    params: DetectorParams,
    score_thresh: float = 0.05,
    nms_thresh: float = 0.5,
    n_proposals: int = 100,
    rpn_nms_thresh: float = 0.7,
    max_detections: int = 50,
) -> List[ScoredBox]:
    """Full inference on one un-augmented image; pure given its inputs."""
    img = as_image(image)
    height, width = img.shape[:2]
    with no_grad():
        features = backbone_forward(img, params)
        anchors = anchors_for(params.spec.anchors, height, width)
        rpn = rpn_forward(features, params, anchors)
        proposals = top_n_proposals(rpn, anchors, n_proposals, rpn_nms_thresh)
        if not len(proposals):
            return []
        roi = roi_forward(features, proposals.boxes, params)
    return detections_from_roi(
        roi, proposals.boxes, (height, width), params.num_classes, score_thresh, nms_thresh, max_detections
    )
