"""
Weak (geometric) and strong (photometric + cutout) augmentation.

Both pipelines are pure functions of their seed. The weak transform is
described by a :class:`GeomRecord` so teacher and student can share one weak
view and boxes can be mapped back; the strong transform is described by a
:class:`StrongAugPlan` that serializes to a single JSON line.
"""
import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.detection.detector import GroundTruth

logger = logging.getLogger(__name__)

MAX_PIXEL = 255.0
DEFAULT_FILL = 127.5
WEAK_SCALES = (0.75, 1.0, 1.25)
CUTOUT_FRACTION = 0.2

STRONG_OPS = {
    1: "identity",
    2: "gaussian_blur",
    3: "mean_blur",
    4: "sharpen",
    5: "gaussian_noise",
    6: "invert",
    7: "add",
    8: "multiply",
    9: "contrast",
}


# ---------------------------------------------------------------------------
# Weak augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeomRecord:
    """Horizontal flip (in the source frame) followed by a resize."""

    flipped: bool
    scale: float
    source_size: Tuple[int, int]
    target_size: Tuple[int, int]

    @property
    def factors(self) -> Tuple[float, float]:
        """(x, y) resize factors after stride snapping."""
        return self.target_size[1] / self.source_size[1], self.target_size[0] / self.source_size[0]

    def apply_boxes(self, boxes: np.ndarray) -> np.ndarray:
        out = np.array(boxes, dtype=np.float64, copy=True).reshape(-1, 4)
        if self.flipped:
            width = self.source_size[1]
            out[:, [0, 2]] = width - out[:, [2, 0]]
        sx, sy = self.factors
        return out * np.array([sx, sy, sx, sy])

    def invert_boxes(self, boxes: np.ndarray) -> np.ndarray:
        sx, sy = self.factors
        out = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) / np.array([sx, sy, sx, sy])
        if self.flipped:
            width = self.source_size[1]
            out[:, [0, 2]] = width - out[:, [2, 0]]
        return out


def plan_weak(
    seed: int,
    height: int,
    width: int,
    scales: Sequence[float] = WEAK_SCALES,
    stride: int = 8,
    flip_prob: float = 0.5,
) -> GeomRecord:
    rng = np.random.default_rng(seed)
    flipped = bool(rng.random() < flip_prob)
    scale = float(scales[int(rng.integers(len(scales)))])
    th = max(stride, int(round(height * scale / stride)) * stride)
    tw = max(stride, int(round(width * scale / stride)) * stride)
    return GeomRecord(flipped=flipped, scale=scale, source_size=(height, width), target_size=(th, tw))


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize sampling at pixel centers, edges clamped."""
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.copy()

    def _axis(n_out: int, n_in: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = _axis(height, h)
    x0, x1, wx = _axis(width, w)
    top = image[y0][:, x0] * (1 - wx)[None, :, None] + image[y0][:, x1] * wx[None, :, None]
    bottom = image[y1][:, x0] * (1 - wx)[None, :, None] + image[y1][:, x1] * wx[None, :, None]
    return top * (1 - wy)[:, None, None] + bottom * wy[:, None, None]


def apply_weak(image: np.ndarray, gt: GroundTruth, record: GeomRecord) -> Tuple[np.ndarray, GroundTruth]:
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != record.source_size:
        raise ValueError(f"record expects {record.source_size}, image is {img.shape[:2]}")
    if record.flipped:
        img = img[:, ::-1]
    img = resize_bilinear(np.ascontiguousarray(img), *record.target_size)
    boxes = record.apply_boxes(gt.boxes)
    th, tw = record.target_size
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, tw)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, th)
    return img, GroundTruth(boxes, gt.classes.copy())


def weak_augment(image: np.ndarray, gt: GroundTruth, seed: int, **kwargs) -> Tuple[np.ndarray, GroundTruth, GeomRecord]:
    """50% horizontal flip and a resize from ``WEAK_SCALES`` snapped to the stride."""
    h, w = np.shape(image)[:2]
    record = plan_weak(seed, h, w, **kwargs)
    img, boxes = apply_weak(image, gt, record)
    return img, boxes, record


# ---------------------------------------------------------------------------
# Strong augmentation
# ---------------------------------------------------------------------------

class CutoutPatch(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    cy: int = Field(..., ge=0, description="Patch center row")
    cx: int = Field(..., ge=0, description="Patch center column")
    side: int = Field(..., ge=0, description="Square side in pixels; 0 cancels the patch")


class StrongAugPlan(BaseModel):
    """One color op with its sampled parameters, then alpha cutout patches."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    op_id: int = Field(..., ge=1, le=9, description="Color op, see STRONG_OPS")
    params: Dict[str, Any] = Field(default_factory=dict)
    patches: List[CutoutPatch] = Field(..., min_length=1, max_length=5)
    image_height: int = Field(..., ge=1)
    mask_seed: int = Field(0, ge=0, description="Seed for noise and pixel masks")

    @model_validator(mode="after")
    def _check_sides(self):
        allowed = {0, cutout_side(self.image_height)}
        bad = [p.side for p in self.patches if p.side not in allowed]
        if bad:
            raise ValueError(f"cutout sides {bad} not in {sorted(allowed)}")
        return self

    @property
    def op_name(self) -> str:
        return STRONG_OPS[self.op_id]

    @property
    def alpha(self) -> int:
        return len(self.patches)

    def to_line(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "StrongAugPlan":
        return cls.model_validate_json(line)


def cutout_side(image_height: int) -> int:
    return int(round(CUTOUT_FRACTION * image_height))


def plan_strong(seed: int, image_height: int, image_width: Optional[int] = None) -> StrongAugPlan:
    """Sample a strong-augmentation plan; a pure function of its arguments."""
    image_width = image_width or image_height
    rng = np.random.default_rng(seed)
    op_id = int(rng.integers(1, 10))
    params: Dict[str, Any] = {}
    if op_id == 2:
        params["sigma"] = float(rng.uniform(0.0, 3.0))
    elif op_id == 3:
        params["kernel"] = int(rng.integers(2, 8))
    elif op_id == 4:
        params["alpha"] = float(rng.uniform(0.0, 1.0))
        params["lightness"] = float(rng.uniform(0.75, 1.5))
    elif op_id == 5:
        params["scale"] = float(rng.uniform(0.0, 0.05)) * MAX_PIXEL
        params["per_channel"] = bool(rng.random() < 0.5)
    elif op_id == 6:
        params["apply"] = bool(rng.random() < 0.05)
    elif op_id == 7:
        params["values"] = [float(v) for v in rng.uniform(-10.0, 10.0, size=3)]
    elif op_id == 8:
        params["values"] = [float(v) for v in rng.uniform(0.5, 1.5, size=3)]
    elif op_id == 9:
        params["factors"] = [float(v) for v in rng.uniform(0.5, 2.0, size=3)]

    alpha = int(rng.integers(1, 6))
    side = cutout_side(image_height)
    patches = [
        CutoutPatch(
            cy=int(rng.integers(image_height)),
            cx=int(rng.integers(image_width)),
            side=side if rng.random() < 0.5 else 0,
        )
        for _ in range(alpha)
    ]
    mask_seed = int(rng.integers(2**31 - 1))
    return StrongAugPlan(op_id=op_id, params=params, patches=patches, image_height=image_height, mask_seed=mask_seed)


def _reflect_pad(image: np.ndarray, before: int, after: int, axis: int) -> np.ndarray:
    widths = [(0, 0)] * image.ndim
    widths[axis] = (before, after)
    return np.pad(image, widths, mode="reflect")


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with radius ceil(3 sigma) and reflect padding."""
    if sigma <= 0:
        return image.copy()
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = image
    for axis in (0, 1):
        padded = _reflect_pad(out, radius, radius, axis)
        windows = sliding_window_view(padded, len(kernel), axis=axis)
        out = windows @ kernel
    return out


def mean_blur(image: np.ndarray, k: int) -> np.ndarray:
    if k <= 1:
        return image.copy()
    padded = _reflect_pad(_reflect_pad(image, (k - 1) // 2, k // 2, 0), (k - 1) // 2, k // 2, 1)
    return sliding_window_view(padded, (k, k), axis=(0, 1)).mean(axis=(-2, -1))


def sharpen(image: np.ndarray, alpha: float, lightness: float) -> np.ndarray:
    """3x3 sharpening kernel alpha-blended with the identity kernel."""
    identity = np.zeros((3, 3))
    identity[1, 1] = 1.0
    effect = np.full((3, 3), -1.0)
    effect[1, 1] = 8.0 + lightness
    kernel = (1 - alpha) * identity + alpha * effect
    padded = _reflect_pad(_reflect_pad(image, 1, 1, 0), 1, 1, 1)
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))
    return np.einsum("hwcij,ij->hwc", windows, kernel)


def apply_cutout(image: np.ndarray, patches: Sequence[CutoutPatch], fill_value: float) -> np.ndarray:
    out = image.copy()
    out[cutout_mask(out.shape[:2], patches)] = fill_value
    return out


def cutout_mask(shape: Tuple[int, int], patches: Sequence[CutoutPatch]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for p in patches:
        if p.side:
            y0, x0 = p.cy - p.side // 2, p.cx - p.side // 2
            mask[max(0, y0):max(0, y0 + p.side), max(0, x0):max(0, x0 + p.side)] = True
    return mask


def apply_color(image: np.ndarray, plan: StrongAugPlan, max_value: float = MAX_PIXEL) -> np.ndarray:
    p = plan.params
    rng = np.random.default_rng(plan.mask_seed)
    if plan.op_id == 1:
        return image.copy()
    if plan.op_id == 2:
        return gaussian_blur(image, p["sigma"])
    if plan.op_id == 3:
        return mean_blur(image, p["kernel"])
    if plan.op_id == 4:
        return sharpen(image, p["alpha"], p["lightness"])
    if plan.op_id == 5:
        shape = image.shape if p["per_channel"] else image.shape[:2] + (1,)
        return image + rng.normal(0.0, p["scale"], size=shape)
    if plan.op_id == 6:
        return max_value - image if p["apply"] else image.copy()
    if plan.op_id == 7:
        mask = rng.random(image.shape) < 0.5
        return image + mask * np.asarray(p["values"])
    if plan.op_id == 8:
        mask = rng.random(image.shape) < 0.5
        return image * np.where(mask, np.asarray(p["values"]), 1.0)
    mean = image.mean(axis=(0, 1), keepdims=True)
    return mean + np.asarray(p["factors"]) * (image - mean)


def apply_strong(
    image: np.ndarray,
    plan: StrongAugPlan,
    fill_value: float = DEFAULT_FILL,
    max_value: float = MAX_PIXEL,
) -> np.ndarray:
    """Photometric op then cutout; shape is preserved and values clamped to [0, max_value]."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] != plan.image_height:
        raise ValueError(f"plan made for height {plan.image_height}, image has {img.shape[0]}")
    out = np.clip(apply_color(img, plan, max_value), 0.0, max_value)
    return np.clip(apply_cutout(out, plan.patches, fill_value), 0.0, max_value)
