"""
Oracle and invariant checks run by ``main verify``.

Each check is a named function returning a short detail string and raising
``CheckFailed`` when its invariant does not hold. Oracles here are written
with plain loops, independently of the vectorized library code they test.
"""
import logging
import math
import tempfile
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from src.autograd import ops
from src.autograd.gradcheck import finite_diff_report
from src.autograd.params import ParamSet
from src.autograd.tensor import backward, no_grad
from src.detection.augment import apply_strong, plan_strong, weak_augment
from src.detection.detector import (
    DetectorSpec,
    GroundTruth,
    anchors_for,
    backbone_forward,
    detect,
    init_detector,
    roi_forward,
    roi_pool_batch,
    rpn_forward,
    supervised_loss,
    top_n_proposals,
)
from src.detection.geometry import (
    AnchorSpec,
    Box,
    ScoredBox,
    decode_deltas_array,
    encode_deltas_array,
    hflip_array,
    hflip_deltas,
    nms_array,
    pairwise_iou,
)
from src.detection.pseudo_label import filter_detections, make_soft_label, teacher_ensemble_roi
from src.pipeline.config import CorpusConfig, ExperimentConfig, build_config, with_overrides
from src.pipeline.data import build_corpus, generate_scene
from src.pipeline.evaluation import evaluate_map
from src.pipeline.monitoring import read_metrics
from src.pipeline.schema_validator import validate_metrics_file
from src.pipeline.trainer import TrainerState, ema_update, run_training, train_step, unsup_roi_loss, unsup_rpn_loss

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-4
LOSS_TOLERANCE = 1e-3
FIXTURES = 5
FAULTS = ("gradient",)


class CheckFailed(AssertionError):
    pass


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


@dataclass
class VerifyReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failed(self) -> List[str]:
        return [r.name for r in self.results if not r.passed]

    def to_dict(self) -> Dict:
        return {"passed": self.passed, "checks": [asdict(r) for r in self.results]}


@dataclass
class VerifyContext:
    fault: Optional[str] = None

    def analytic_transform(self):
        if self.fault == "gradient":
            return lambda grads: {k: 1.05 * g + 1e-3 for k, g in grads.items()}
        return None


CHECKS: "OrderedDict[str, Callable[[VerifyContext], str]]" = OrderedDict()


def check(name: str):
    def register(fn):
        CHECKS[name] = fn
        return fn
    return register


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise CheckFailed(message)


# ---------------------------------------------------------------------------
# Fixtures and oracles
# ---------------------------------------------------------------------------

def tiny_spec(num_classes: int = 2) -> DetectorSpec:
    return DetectorSpec(
        num_classes=num_classes,
        channels=(4, 4, 4),
        rpn_channels=4,
        pool_size=2,
        hidden=8,
        anchors=AnchorSpec(stride=8, scales=(12.0, 20.0), aspects=(1.0,)),
    )


def tiny_config(**train) -> ExperimentConfig:
    return build_config({
        "run_name": "verify",
        "scene": {"image_size": 32, "min_size": 8, "max_size": 14, "max_objects": 2},
        "model": {
            "channels": [4, 4, 4], "rpn_channels": 4, "pool_size": 2, "hidden": 8,
            "anchor_scales": [12.0, 20.0], "anchor_aspects": [1.0],
            "rpn_batch": 16, "roi_batch": 16, "train_proposals": 32, "test_proposals": 32,
        },
        "train": {"n_proposals": 16, "burn_in_iters": 0, "total_iters": 2, **train},
    })


def random_boxes(rng: np.random.Generator, n: int, size: float = 32.0) -> np.ndarray:
    xy = rng.uniform(0, size * 0.7, size=(n, 2))
    wh = rng.uniform(2.0, size * 0.3, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def greedy_nms_oracle(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> List[int]:
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    kept: List[int] = []
    for i in order:
        if all(box_iou(boxes[i], boxes[j]) <= thresh for j in kept):
            kept.append(i)
    return kept


def _match_prefix(pool, gt_boxes, k: int, thresh: float) -> int:
    """True positives among the top ``k`` detections, matched from scratch."""
    taken = set()
    tp = 0
    for _, img, box in pool[:k]:
        candidates = [
            (box_iou(box, gbox), g) for g, gbox in enumerate(gt_boxes[img]) if (img, g) not in taken
        ]
        if not candidates:
            continue
        best_iou, best = max(candidates, key=lambda c: (c[0], -c[1]))
        if best_iou >= thresh:
            taken.add((img, best))
            tp += 1
    return tp


def ap_oracle(dets: List[List[ScoredBox]], gts: List[GroundTruth], class_id: int, thresh: float) -> float:
    """
    AP by exhaustive enumeration: every score cut-off is matched from scratch,
    and the precision envelope is sampled at every reachable recall level.
    """
    pool = sorted(
        ((d.score, img, d.box.as_tuple()) for img, ds in enumerate(dets) for d in ds if d.class_id == class_id),
        key=lambda r: -r[0],
    )
    gt_boxes = [[tuple(b) for b, c in zip(gt.boxes, gt.classes) if c == class_id] for gt in gts]
    n_gt = sum(len(g) for g in gt_boxes)
    if not pool or n_gt == 0:
        return 0.0
    curve = []
    for k in range(1, len(pool) + 1):
        tp = _match_prefix(pool, gt_boxes, k, thresh)
        curve.append((tp, tp / k))
    return sum(max((p for tp, p in curve if tp >= j), default=0.0) for j in range(1, n_gt + 1)) / n_gt


def naive_conv(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, cin))
    xp[pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = b[o]
                for di in range(kh):
                    for dj in range(kw):
                        for c in range(cin):
                            acc += xp[i * stride + di, j * stride + dj, c] * k[di, dj, c, o]
                out[i, j, o] = acc
    return out


def _projected(out, rng_seed: int):
    weights = np.random.default_rng(rng_seed).normal(size=out.shape)
    return ops.total(ops.mul(out, ops.constant(weights)))


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def _op_fixtures(rng: np.random.Generator) -> Dict[str, tuple]:
    """name -> (ParamSet, f) for every differentiable op."""
    probs = ops.softmax_array(rng.normal(size=(4, 3)), axis=1)
    labels = rng.integers(0, 3, size=5)
    smooth_target = rng.normal(size=(3, 4)) * 2
    l2_target = rng.normal(size=(4, 5))
    rois = np.array([[1.0, 2.0, 20.0, 25.0], [8.0, 0.0, 30.0, 14.0]])
    return {
        "linear": (
            ParamSet([("x", rng.normal(size=(3, 4))), ("w", rng.normal(size=(4, 2))), ("b", rng.normal(size=2))]),
            lambda p: _projected(ops.linear(p["x"], p["w"], p["b"]), 1),
        ),
        "conv2d": (
            ParamSet([("x", rng.normal(size=(6, 6, 2))), ("k", rng.normal(size=(3, 3, 2, 3))), ("b", rng.normal(size=3))]),
            lambda p: _projected(ops.conv2d(p["x"], p["k"], p["b"], stride=2, pad=1), 2),
        ),
        "relu_max_pool2d": (
            ParamSet([("x", rng.normal(size=(4, 4, 2)))]),
            lambda p: _projected(ops.max_pool2d(ops.relu(p["x"]), 2), 3),
        ),
        "softmax_kl_div": (
            ParamSet([("z", rng.normal(size=(4, 3)))]),
            lambda p: ops.kl_div(probs, ops.softmax(p["z"], axis=1)),
        ),
        "l2_residual_norm": (
            ParamSet([("y", rng.normal(size=(4, 5)))]),
            lambda p: ops.total(ops.l2_residual_norm(l2_target, p["y"], axis=-1)),
        ),
        "cross_entropy": (
            ParamSet([("z", rng.normal(size=(5, 3)))]),
            lambda p: ops.cross_entropy(p["z"], labels),
        ),
        "smooth_l1": (
            ParamSet([("y", rng.normal(size=(3, 4)))]),
            lambda p: ops.smooth_l1(p["y"], smooth_target),
        ),
        "roi_pool": (
            ParamSet([("f", rng.normal(size=(4, 4, 2)))]),
            lambda p: _projected(roi_pool_batch(p["f"], rois, 2, 8), 4),
        ),
    }


@check("gradcheck_ops")
def check_gradcheck_ops(ctx: VerifyContext) -> str:
    worst = 0.0
    for fixture in range(FIXTURES):
        for name, (params, f) in _op_fixtures(np.random.default_rng(100 + fixture)).items():
            report = finite_diff_report(f, params, analytic_transform=ctx.analytic_transform())
            _require(report.max_rel_error < OP_TOLERANCE,
                     f"{name} fixture {fixture}: relative error {report.max_rel_error:.2e} at {report.worst}")
            worst = max(worst, report.max_rel_error)
    return f"max relative error {worst:.2e}"


def _scene(seed: int, size: int = 32):
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 255, size=(size, size, 3))
    gt = GroundTruth(np.array([[3.0, 4.0, 17.0, 16.0], [14.0, 12.0, 29.0, 30.0]]), np.array([0, 1]))
    return image, gt


@check("gradcheck_supervised_loss")
def check_gradcheck_supervised(ctx: VerifyContext) -> str:
    worst = 0.0
    for fixture in range(FIXTURES):
        image, gt = _scene(200 + fixture)
        det = init_detector(tiny_spec(), seed=fixture)
        proposals = random_boxes(np.random.default_rng(fixture), 6)

        def f(p):
            return supervised_loss(image, gt, det.with_params(p), rng=np.random.default_rng(0), proposals=proposals)[0]

        report = finite_diff_report(f, det.params, seed=fixture, analytic_transform=ctx.analytic_transform())
        _require(report.max_rel_error < LOSS_TOLERANCE,
                 f"fixture {fixture}: relative error {report.max_rel_error:.2e} at {report.worst}")
        worst = max(worst, report.max_rel_error)
    return f"max relative error {worst:.2e}"


@check("gradcheck_unsupervised_loss")
def check_gradcheck_unsupervised(ctx: VerifyContext) -> str:
    worst = 0.0
    for fixture in range(FIXTURES):
        image, _ = _scene(300 + fixture)
        teacher = init_detector(tiny_spec(), seed=10 + fixture)
        student = init_detector(tiny_spec(), seed=20 + fixture)
        label = make_soft_label(teacher, image, n=8, ensemble="flip")

        def f(p):
            s = student.with_params(p)
            features = backbone_forward(image, s)
            rpn = rpn_forward(features, s, anchors_for(s.spec.anchors, *image.shape[:2]))
            roi = roi_forward(features, label.proposals.boxes, s)
            return ops.add(unsup_rpn_loss(rpn, label.rpn), unsup_roi_loss(roi, label.roi))

        report = finite_diff_report(f, student.params, seed=fixture, analytic_transform=ctx.analytic_transform())
        _require(report.max_rel_error < LOSS_TOLERANCE,
                 f"fixture {fixture}: relative error {report.max_rel_error:.2e} at {report.worst}")
        worst = max(worst, report.max_rel_error)
    return f"max relative error {worst:.2e}"


@check("conv_linear_oracle")
def check_conv_linear(ctx: VerifyContext) -> str:
    rng = np.random.default_rng(7)
    for _ in range(3):
        x, k, b = rng.normal(size=(7, 6, 2)), rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
        for stride, pad in ((1, 0), (2, 1)):
            got = ops.conv2d(ops.constant(x), ops.constant(k), ops.constant(b), stride=stride, pad=pad).data
            diff = np.abs(got - naive_conv(x, k, b, stride, pad)).max()
            _require(diff < 1e-10, f"conv2d stride={stride} pad={pad} differs by {diff:.2e}")
        xm, wm, bm = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
        naive = np.array([[sum(xm[i, t] * wm[t, j] for t in range(3)) + bm[j] for j in range(4)] for i in range(5)])
        diff = np.abs(ops.linear(ops.constant(xm), ops.constant(wm), ops.constant(bm)).data - naive).max()
        _require(diff < 1e-10, f"linear differs by {diff:.2e}")
    return "conv2d and linear match loop oracles"


@check("nms_oracle")
def check_nms(ctx: VerifyContext) -> str:
    rng = np.random.default_rng(11)
    instances = 1000
    for t in range(instances):
        n = int(rng.integers(0, 65))
        boxes = random_boxes(rng, n)
        scores = rng.random(n)
        thresh = float(rng.uniform(0.1, 0.9))
        got = list(nms_array(boxes, scores, thresh))
        _require(got == greedy_nms_oracle(boxes, scores, thresh), f"instance {t}: NMS differs from greedy oracle")
    return f"{instances} instances"


@check("map_oracle")
def check_map(ctx: VerifyContext) -> str:
    rng = np.random.default_rng(13)
    instances = 500
    for t in range(instances):
        n_img = int(rng.integers(1, 3))
        gts, dets = [], []
        for _ in range(n_img):
            n_gt = int(rng.integers(0, 3))
            gts.append(GroundTruth(random_boxes(rng, n_gt), rng.integers(0, 2, size=n_gt)))
            n_det = int(rng.integers(0, 9))
            dets.append([
                ScoredBox(Box(*map(float, b)), float(rng.random()), int(rng.integers(0, 2)))
                for b in random_boxes(rng, n_det)
            ])
        result = evaluate_map(dets, gts)
        classes = sorted({int(c) for gt in gts for c in gt.classes})
        for thr, per_class in result.ap.items():
            for c in classes:
                expected = ap_oracle(dets, gts, c, thr)
                _require(abs(per_class[c] - expected) < 1e-9, f"instance {t}: AP {per_class[c]} != exhaustive oracle {expected}")
        _require(0.0 <= result.map <= 1.0, f"instance {t}: mAP {result.map} outside [0, 1]")
    return f"{instances} instances"


@check("geometry_roundtrip")
def check_geometry(ctx: VerifyContext) -> str:
    rng = np.random.default_rng(17)
    a, b = random_boxes(rng, 50), random_boxes(rng, 50)
    ious = pairwise_iou(a, b)
    _require(np.all((ious >= 0) & (ious <= 1)), "IoU outside [0, 1]")
    _require(np.allclose(ious, pairwise_iou(b, a).T), "IoU not symmetric")
    back = decode_deltas_array(a, encode_deltas_array(a, b))
    _require(np.abs(back - b).max() < 1e-9, "delta encode/decode roundtrip drifted")
    _require(np.allclose(hflip_array(hflip_array(a, 32.0), 32.0), a, rtol=0, atol=1e-12), "hflip is not an involution")
    return "IoU bounds, symmetry, delta roundtrip, flip involution"


@check("ema_closed_form")
def check_ema(ctx: VerifyContext) -> str:
    alpha = 0.999
    spec = tiny_spec()
    w0 = init_detector(spec, seed=1)
    ws = init_detector(spec, seed=2)
    teacher = w0
    done = 0
    for t in (1, 10, 1000):
        for _ in range(t - done):
            teacher = ema_update(teacher, ws, alpha)
        done = t
        for name, tensor in teacher.params.items():
            expected = alpha ** t * w0[name].data + (1 - alpha ** t) * ws[name].data
            err = np.abs(tensor.data - expected).max()
            _require(err < 1e-9, f"t={t} {name}: EMA off closed form by {err:.2e}")
    _require(ema_update(w0, ws, 1.0).equals(w0), "alpha=1 changed the teacher")
    _require(ema_update(w0, ws, 0.0).params.equals(ws.params), "alpha=0 did not copy the student")
    return "t in {1, 10, 1000}"


@check("unsup_identity")
def check_unsup_identity(ctx: VerifyContext) -> str:
    image, _ = _scene(23)
    det = init_detector(tiny_spec(), seed=3)
    label = make_soft_label(det, image, n=8, ensemble="none")
    features = backbone_forward(image, det)
    rpn = rpn_forward(features, det, anchors_for(det.spec.anchors, *image.shape[:2]))
    roi = roi_forward(features, label.proposals.boxes, det)
    rpn_value = unsup_rpn_loss(rpn, label.rpn).item()
    roi_value = unsup_roi_loss(roi, label.roi).item()
    _require(rpn_value == 0.0 and roi_value == 0.0, f"identical outputs gave rpn={rpn_value} roi={roi_value}")
    return "student == teacher gives exactly 0"


@check("localization_off_zero_grads")
def check_localization(ctx: VerifyContext) -> str:
    image, _ = _scene(29)
    teacher = init_detector(tiny_spec(), seed=4)
    student = init_detector(tiny_spec(), seed=5)
    label = make_soft_label(teacher, image, n=8, ensemble="flip")
    features = backbone_forward(image, student)
    rpn = rpn_forward(features, student, anchors_for(student.spec.anchors, *image.shape[:2]))
    roi = roi_forward(features, label.proposals.boxes, student)
    loss = ops.add(unsup_rpn_loss(rpn, label.rpn, False), unsup_roi_loss(roi, label.roi, False))
    grads = backward(loss, student.params)
    heads = [n for n in grads if n.startswith(("rpn.reg.", "roi.reg."))]
    _require(heads and all(not np.any(grads[n]) for n in heads), "regression heads received unsupervised gradient")
    return f"{len(heads)} regression parameters with zero gradient"


@check("beta_zero_trajectory")
def check_beta_zero(ctx: VerifyContext) -> str:
    scenes = [generate_scene(s, tiny_config().scene) for s in range(3)]
    images = [img.astype(np.float64) for img, _ in scenes]
    gts = [gt for _, gt in scenes]
    start = init_detector(tiny_config().detector_spec(), seed=0)

    def trajectory(config: ExperimentConfig, unlabeled: List[np.ndarray]) -> TrainerState:
        state = TrainerState.initial(start)
        for _ in range(2):
            state, _ = train_step(state, images[:1], gts[:1], unlabeled, config)
        return state

    supervised = trajectory(tiny_config(n_unlabeled=0), [])
    zero_beta = trajectory(tiny_config(beta=0.0), images[1:2])
    _require(zero_beta.student.equals(supervised.student), "beta=0 diverged from the supervised-only trajectory")
    return "bitwise identical student after 2 steps"


@check("fixed_teacher")
def check_fixed_teacher(ctx: VerifyContext) -> str:
    config = tiny_config(update_rule="fixed")
    img, gt = generate_scene(31, config.scene)
    state = TrainerState.initial(init_detector(config.detector_spec(), seed=0))
    before = state.teacher.copy()
    for _ in range(2):
        state, _ = train_step(state, [img.astype(np.float64)], [gt], [img.astype(np.float64)], config)
    _require(state.teacher.equals(before), "fixed update rule changed the teacher")
    return "teacher unchanged over 2 steps"


@check("flip_ensemble_symmetry")
def check_flip_symmetry(ctx: VerifyContext) -> str:
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        teacher = init_detector(tiny_spec(), seed=seed)
        image = rng.uniform(0, 255, size=(32, 32, 3))
        proposals = random_boxes(rng, 5)
        a = teacher_ensemble_roi(teacher, image, proposals)
        b = teacher_ensemble_roi(teacher, np.ascontiguousarray(image[:, ::-1]), hflip_array(proposals, 32.0))
        err = max(np.abs(a.probs - b.probs).max(), np.abs(a.deltas - hflip_deltas(b.deltas)).max())
        _require(err < 1e-9, f"seed {seed}: ensemble not mirror-symmetric ({err:.2e})")
        worst = max(worst, err)
    return f"20 teachers, max deviation {worst:.2e}"


@check("determinism")
def check_determinism(ctx: VerifyContext) -> str:
    spec = tiny_config().scene
    for seed in range(5):
        (a, ga), (b, gb) = generate_scene(seed, spec), generate_scene(seed, spec)
        _require(a.tobytes() == b.tobytes() and np.array_equal(ga.boxes, gb.boxes), f"scene {seed} not deterministic")
        image = a.astype(np.float64)
        w1, _, r1 = weak_augment(image, ga, seed)
        w2, _, r2 = weak_augment(image, ga, seed)
        _require(r1 == r2 and np.array_equal(w1, w2), f"weak augmentation {seed} not deterministic")
        p1, p2 = plan_strong(seed, *w1.shape[:2]), plan_strong(seed, *w1.shape[:2])
        _require(p1 == p2 and np.array_equal(apply_strong(w1, p1), apply_strong(w2, p2)), f"strong augmentation {seed} not deterministic")
    corpus = _tiny_corpus()
    runs = []
    with tempfile.TemporaryDirectory() as root:
        for _ in range(2):
            with open(_tiny_run(root, corpus), "rb") as f:
                runs.append(f.read())
    _require(runs[0] == runs[1], "two same-seed training runs wrote different metrics files")
    return "scenes, augmentation and two full training runs are reproducible"


@check("hard_label_filter")
def check_hard_filter(ctx: VerifyContext) -> str:
    box = Box(0.0, 0.0, 4.0, 4.0)
    dets = [ScoredBox(box, s, 0) for s in (0.9, 0.69, 0.71)]
    _require(len(filter_detections(dets, 0.7)) == 2, "theta=0.7 should keep 2 of {0.9, 0.69, 0.71}")
    _require(len(filter_detections(dets, 1.0)) == 0, "theta=1.0 should keep none")
    return "threshold fixture"


@check("softmax_normalization")
def check_softmax(ctx: VerifyContext) -> str:
    rng = np.random.default_rng(41)
    for scale in (1.0, 50.0, 700.0):
        probs = ops.softmax_array(rng.normal(size=(64, 5)) * scale, axis=1)
        _require(np.all(probs >= 0.0), f"negative probability at logit scale {scale}")
        err = np.abs(probs.sum(axis=1) - 1.0).max()
        _require(err < 1e-12, f"rows sum to 1 +/- {err:.2e} at logit scale {scale}")
    example = ops.softmax_array(np.array([[0.0, np.log(3.0)]]), axis=1)
    _require(np.allclose(example, [[0.25, 0.75]], rtol=0, atol=1e-15), f"softmax(0, ln 3) = {example}")
    return "rows sum to 1 up to logit scale 700"


@check("strong_aug_range")
def check_strong_range(ctx: VerifyContext) -> str:
    rng = np.random.default_rng(43)
    seeds = 200
    for seed in range(seeds):
        height, width = (32, 32) if seed % 2 else (24, 40)
        image = rng.uniform(0, 255, size=(height, width, 3))
        out = apply_strong(image, plan_strong(seed, height, width))
        _require(out.shape == image.shape, f"seed {seed}: shape {out.shape} != {image.shape}")
        _require(out.min() >= 0.0 and out.max() <= 255.0, f"seed {seed}: values outside [0, 255]")
    return f"{seeds} plans keep shape and [0, 255]"


@check("weak_record_inverts_boxes")
def check_weak_inverse(ctx: VerifyContext) -> str:
    rng = np.random.default_rng(47)
    worst = 0.0
    for seed in range(100):
        image = rng.uniform(0, 255, size=(32, 32, 3))
        boxes = random_boxes(rng, 3)
        gt = GroundTruth(boxes, rng.integers(0, 2, size=3))
        _, moved, record = weak_augment(image, gt, seed)
        err = np.abs(record.invert_boxes(moved.boxes) - boxes).max()
        _require(err < 1e-9, f"seed {seed}: inverted boxes drift by {err:.2e}")
        worst = max(worst, err)
    return f"100 records, max drift {worst:.2e}"


def _separated_gt(rng: np.random.Generator) -> GroundTruth:
    """Up to 3 objects in distinct 16 px columns, so no two objects overlap."""
    cols = rng.choice(4, size=int(rng.integers(0, 4)), replace=False)
    boxes = []
    for c in cols:
        x1, y1 = 16.0 * c + rng.uniform(0, 4), rng.uniform(0, 40)
        boxes.append([x1, y1, x1 + rng.uniform(6, 11), y1 + rng.uniform(6, 20)])
    return GroundTruth(np.array(boxes).reshape(-1, 4), rng.integers(0, 2, size=len(boxes)))


@check("map_duplicate_monotone")
def check_map_duplicates(ctx: VerifyContext) -> str:
    rng = np.random.default_rng(53)
    instances = 300
    for t in range(instances):
        gts = [_separated_gt(rng) for _ in range(2)]
        dets = []
        for gt in gts:
            jittered = [b + rng.normal(scale=1.5, size=4) for b in gt.boxes]
            extra = list(random_boxes(rng, int(rng.integers(0, 4)), size=64.0))
            dets.append([
                ScoredBox(Box(*map(float, b)), float(rng.random()), int(rng.integers(0, 2)))
                for b in jittered + extra if b[2] > b[0] and b[3] > b[1]
            ])
        if not any(dets) or not any(len(gt) for gt in gts):
            continue
        before = evaluate_map(dets, gts).map
        img = int(rng.choice([i for i, ds in enumerate(dets) if ds]))
        dets[img] = dets[img] + [dets[img][int(rng.integers(len(dets[img])))]]
        after = evaluate_map(dets, gts).map
        _require(after <= before + 1e-12, f"instance {t}: duplicate raised mAP {before} -> {after}")
    return f"{instances} instances on non-overlapping objects"


@check("detect_bounds_and_top_n")
def check_detect_bounds(ctx: VerifyContext) -> str:
    for seed in range(5):
        image, _ = _scene(400 + seed)
        det = init_detector(tiny_spec(), seed=seed)
        height, width = image.shape[:2]
        found = detect(image, det, score_thresh=0.0, n_proposals=16)
        for d in found:
            b = d.box
            _require(0.0 <= b.x1 < b.x2 <= width and 0.0 <= b.y1 < b.y2 <= height, f"seed {seed}: {b} leaves the image")
            _require(0.0 <= d.score <= 1.0, f"seed {seed}: score {d.score} outside [0, 1]")
        scores = [d.score for d in found]
        _require(scores == sorted(scores, reverse=True), f"seed {seed}: detections not sorted by score")
        anchors = anchors_for(det.spec.anchors, height, width)
        with no_grad():
            rpn = rpn_forward(backbone_forward(image, det), det, anchors)
        for n in (1, 5, 16):
            proposals = top_n_proposals(rpn, anchors, n)
            _require(len(proposals) <= n, f"seed {seed}: {len(proposals)} proposals for N={n}")
            _require(np.all(np.diff(proposals.scores) <= 0), f"seed {seed}: top-{n} not sorted by objectness")
    return "5 detectors, N in {1, 5, 16}"


def _gradient_bytes(f, params: ParamSet) -> Dict[str, bytes]:
    return {name: g.tobytes() for name, g in backward(f(params), params).items()}


@check("backward_repeatable")
def check_backward_repeatable(ctx: VerifyContext) -> str:
    image, gt = _scene(59)
    det = init_detector(tiny_spec(), seed=7)
    teacher = init_detector(tiny_spec(), seed=8)
    label = make_soft_label(teacher, image, n=8, ensemble="flip")

    def sup(p):
        return supervised_loss(image, gt, det.with_params(p), rng=np.random.default_rng(0))[0]

    def unsup(p):
        s = det.with_params(p)
        features = backbone_forward(image, s)
        rpn = rpn_forward(features, s, anchors_for(s.spec.anchors, *image.shape[:2]))
        return ops.add(unsup_rpn_loss(rpn, label.rpn), unsup_roi_loss(roi_forward(features, label.proposals.boxes, s), label.roi))

    for name, f in (("supervised", sup), ("unsupervised", unsup)):
        _require(_gradient_bytes(f, det.params) == _gradient_bytes(f, det.params), f"{name} gradients differ between runs")
    return "supervised and unsupervised gradients are byte-identical"


@check("teacher_detached")
def check_teacher_detached(ctx: VerifyContext) -> str:
    image, _ = _scene(61)
    teacher = init_detector(tiny_spec(), seed=9)
    student = init_detector(tiny_spec(), seed=10)
    label = make_soft_label(teacher, image, n=8, ensemble="flip")
    targets = (label.rpn.probs, label.rpn.deltas, label.roi.probs, label.roi.deltas)
    _require(all(type(t) is np.ndarray for t in targets), "teacher targets are not plain arrays")
    features = backbone_forward(image, student)
    rpn = rpn_forward(features, student, anchors_for(student.spec.anchors, *image.shape[:2]))
    loss = ops.add(unsup_rpn_loss(rpn, label.rpn), unsup_roi_loss(roi_forward(features, label.proposals.boxes, student), label.roi))
    teacher_grads = backward(loss, teacher.params)
    _require(all(not np.any(g) for g in teacher_grads.values()), "teacher parameters received gradient")
    student_grads = backward(loss, student.params)
    _require(any(np.any(g) for g in student_grads.values()), "student received no gradient")
    return f"{len(teacher_grads)} teacher parameters with zero gradient"


def _tiny_run(root: str, corpus) -> str:
    config = with_overrides(tiny_config(), {
        "output_dir": root,
        "train.burn_in_iters": 2,
        "train.total_iters": 2,
        "train.eval_interval": 2,
        "train.checkpoint_interval": 100,
        "train.unlabeled_eval_size": 2,
    })
    return run_training(config, corpus).metrics_path


def _tiny_corpus():
    return build_corpus(CorpusConfig(n_train=12, n_eval=4, seed=0), tiny_config().scene)


@check("metrics_finite")
def check_metrics_finite(ctx: VerifyContext) -> str:
    with tempfile.TemporaryDirectory() as root:
        path = _tiny_run(root, _tiny_corpus())
        ok, errors = validate_metrics_file(path)
        _require(ok, f"metrics file invalid: {errors[:3]}")
        records = read_metrics(path)
    for record in records:
        for key, value in record.items():
            if isinstance(value, (int, float)):
                _require(math.isfinite(value) and value >= 0, f"iteration {record['iteration']}: {key}={value}")
    return f"{len(records)} records finite and non-negative"


def run_verify(fault: Optional[str] = None, only: Optional[Sequence[str]] = None) -> VerifyReport:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    ctx = VerifyContext(fault=fault)
    names = list(only) if only else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks {unknown}")
    report = VerifyReport()
    for name in names:
        start = time.perf_counter()
        try:
            detail = CHECKS[name](ctx)
            passed = True
        except CheckFailed as e:
            detail, passed = str(e), False
        except Exception as e:
            logger.error(f"Check {name} raised: {e}", exc_info=True)
            detail, passed = f"{type(e).__name__}: {e}", False
        result = CheckResult(name, passed, detail, time.perf_counter() - start)
        report.results.append(result)
        log = logger.info if passed else logger.error
        log(f"{'PASS' if passed else 'FAIL'} {name}: {detail} ({result.seconds:.2f}s)")
    return report
