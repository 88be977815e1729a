"""
Synthetic shapes corpus: scene rendering, archive I/O and seeded splits.

Archive layout (one directory):
    manifest.json  schema, spec, spec hash, scene ids/seeds/partition
    images.npy     N x H x W x 3 uint8
    gt.txt         one object per line: "<scene_id> <class_id> <x1> <y1> <x2> <y2>"
"""
import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.detection.detector import GroundTruth
from src.detection.geometry import pairwise_iou
from src.pipeline.config import CorpusConfig, SceneSpec
from src.pipeline.schema_validator import calculate_content_hash, validate_manifest

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "humble-corpus"
MANIFEST_VERSION = 1
SUPERSAMPLE = 4


class DataError(RuntimeError):
    """Missing or corrupt corpus, unsatisfiable scene spec or infeasible split."""


# ---------------------------------------------------------------------------
# Scene rendering
# ---------------------------------------------------------------------------

def _object_box(kind: str, size: float, x1: float, y1: float) -> Tuple[float, float, float, float]:
    if kind == "bar":
        return (x1, y1, x1 + size, y1 + size / 2.0)
    return (x1, y1, x1 + size, y1 + size)


def _coverage(kind: str, box: Tuple[float, float, float, float], height: int, width: int):
    """Fractional pixel coverage of one shape, over its bounding pixel window."""
    x1, y1, x2, y2 = box
    px0, py0 = int(np.floor(x1)), int(np.floor(y1))
    px1, py1 = min(width, int(np.ceil(x2))), min(height, int(np.ceil(y2)))
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    sx = (np.arange(px0, px1)[:, None] + offsets[None, :]).reshape(-1)
    sy = (np.arange(py0, py1)[:, None] + offsets[None, :]).reshape(-1)
    yy, xx = np.meshgrid(sy, sx, indexing="ij")
    if kind == "disc":
        cx, cy, r = 0.5 * (x1 + x2), 0.5 * (y1 + y2), 0.5 * (x2 - x1)
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    else:
        inside = (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
    cov = inside.reshape(py1 - py0, SUPERSAMPLE, px1 - px0, SUPERSAMPLE).mean(axis=(1, 3))
    return (slice(py0, py1), slice(px0, px1)), cov


def generate_scene(seed: int, spec: SceneSpec) -> Tuple[np.ndarray, GroundTruth]:
    """
    Render one scene.

    Returns a uint8 H x W x 3 image and its exact boxes. Objects lie fully
    inside the image and no pair overlaps with IoU above ``max_overlap_iou``.
    """
    rng = np.random.default_rng(seed)
    size = spec.image_size
    image = spec.background + rng.normal(0.0, spec.noise_std, size=(size, size, 3)) if spec.noise_std else np.full((size, size, 3), spec.background)
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    boxes: List[Tuple[float, float, float, float]] = []
    classes: List[int] = []
    for _ in range(n_objects):
        for attempt in range(spec.max_retries):
            cls = int(rng.integers(spec.num_classes))
            kind = spec.classes[cls].shape
            side = float(rng.uniform(spec.min_size, spec.max_size))
            extent_y = side / 2.0 if kind == "bar" else side
            box = _object_box(kind, side, float(rng.uniform(0, size - side)), float(rng.uniform(0, size - extent_y)))
            if boxes and pairwise_iou(np.array([box]), np.array(boxes)).max() > spec.max_overlap_iou:
                continue
            break
        else:
            raise DataError(f"could not place {n_objects} objects after {spec.max_retries} attempts (seed {seed})")
        color = np.asarray(spec.classes[cls].color) + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        window, cov = _coverage(kind, box, size, size)
        region = image[window]
        image[window] = region * (1.0 - cov[..., None]) + np.clip(color, 0, 255) * cov[..., None]
        boxes.append(box)
        classes.append(cls)

    pixels = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return pixels, GroundTruth(np.array(boxes).reshape(-1, 4), np.array(classes, dtype=np.int64))


def scene_seed(corpus_seed: int, scene_id: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, scene_id]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Corpus:
    spec: SceneSpec
    images: np.ndarray
    gts: List[GroundTruth]
    seeds: List[int]
    n_train: int
    n_eval: int
    meta: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def image(self, scene_id: int) -> np.ndarray:
        return self.images[scene_id].astype(np.float64)

    @property
    def eval_ids(self) -> np.ndarray:
        return np.arange(self.n_train, self.n_train + self.n_eval)

    @property
    def mean_pixel(self) -> float:
        return float(self.images[: self.n_train].mean())

    @property
    def spec_hash(self) -> str:
        return calculate_content_hash(self.spec.model_dump(mode="json"))


def _render(args: Tuple[int, dict]) -> Tuple[np.ndarray, GroundTruth]:
    seed, spec_doc = args
    return generate_scene(seed, SceneSpec.model_validate(spec_doc))


def build_corpus(config: CorpusConfig, spec: SceneSpec, workers: int = 1) -> Corpus:
    """Render n_train + n_eval scenes; the trailing n_eval ids are the held-out set."""
    total = config.n_train + config.n_eval
    seeds = [scene_seed(config.seed, i) for i in range(total)]
    jobs = [(s, spec.model_dump(mode="json")) for s in seeds]
    logger.info(f"Generating {total} scenes ({config.n_train} train + {config.n_eval} eval) with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_render, jobs, chunksize=32), total=total, desc="scenes", disable=None))
    else:
        results = [_render(job) for job in tqdm(jobs, desc="scenes", disable=None)]
    images = np.stack([img for img, _ in results])
    gts = [gt for _, gt in results]
    return Corpus(spec=spec, images=images, gts=gts, seeds=seeds, n_train=config.n_train, n_eval=config.n_eval)


def manifest_for(corpus: Corpus) -> Dict:
    return {
        "schema": MANIFEST_SCHEMA,
        "schema_version": MANIFEST_VERSION,
        "spec": corpus.spec.model_dump(mode="json"),
        "spec_hash": corpus.spec_hash,
        "num_scenes": len(corpus),
        "n_train": corpus.n_train,
        "n_eval": corpus.n_eval,
        "image_shape": list(corpus.images.shape[1:]),
        "gt_format": "scene_id class_id x1 y1 x2 y2",
        "scenes": [
            {
                "id": i,
                "seed": corpus.seeds[i],
                "partition": "train" if i < corpus.n_train else "eval",
                "num_objects": len(corpus.gts[i]),
            }
            for i in range(len(corpus))
        ],
    }


def save_corpus(corpus: Corpus, path: str, force: bool = False) -> str:
    manifest_path = os.path.join(path, "manifest.json")
    if os.path.exists(manifest_path) and not force:
        raise DataError(f"corpus already exists at {path}; use --force to overwrite")
    try:
        if os.path.isdir(path) and force:
            shutil.rmtree(path)
        os.makedirs(path, exist_ok=True)
        np.save(os.path.join(path, "images.npy"), corpus.images)
        with open(os.path.join(path, "gt.txt"), "w") as f:
            for i, gt in enumerate(corpus.gts):
                for box, cls in zip(gt.boxes, gt.classes):
                    f.write(f"{i} {int(cls)} {box[0]!r} {box[1]!r} {box[2]!r} {box[3]!r}\n")
        with open(manifest_path, "w") as f:
            json.dump(manifest_for(corpus), f, indent=2, sort_keys=True)
    except OSError as e:
        logger.error(f"Error writing corpus to {path}: {e}")
        raise DataError(f"cannot write corpus to {path}: {e}") from e
    logger.info(f"Corpus with {len(corpus)} scenes saved to {path}")
    return manifest_path


def _read_gt(path: str, count: int) -> List[GroundTruth]:
    rows: Dict[int, List[Tuple[int, List[float]]]] = {i: [] for i in range(count)}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            scene_id, cls = int(parts[0]), int(parts[1])
            if scene_id not in rows:
                raise DataError(f"{path}:{lineno}: unknown scene id {scene_id}")
            rows[scene_id].append((cls, [float(v) for v in parts[2:]]))
    return [
        GroundTruth(np.array([b for _, b in rows[i]]).reshape(-1, 4), np.array([c for c, _ in rows[i]], dtype=np.int64))
        for i in range(count)
    ]


def load_corpus(path: str) -> Corpus:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no corpus at {path} (missing manifest.json); run gen-data first")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
        is_valid, errors = validate_manifest(manifest)
        if not is_valid:
            raise DataError(f"corrupt manifest at {path}: {errors}")
        images = np.load(os.path.join(path, "images.npy"))
        gts = _read_gt(os.path.join(path, "gt.txt"), manifest["num_scenes"])
    except DataError:
        raise
    except Exception as e:
        logger.error(f"Error loading corpus from {path}: {e}")
        raise DataError(f"cannot read corpus at {path}: {e}") from e
    if len(images) != manifest["num_scenes"] or list(images.shape[1:]) != manifest["image_shape"]:
        raise DataError(f"images.npy shape {images.shape} disagrees with manifest")
    spec = SceneSpec.model_validate(manifest["spec"])
    corpus = Corpus(
        spec=spec,
        images=images,
        gts=gts,
        seeds=[s["seed"] for s in manifest["scenes"]],
        n_train=manifest["n_train"],
        n_eval=manifest["n_eval"],
        meta={"spec_hash": manifest["spec_hash"]},
    )
    if corpus.spec_hash != manifest["spec_hash"]:
        raise DataError("spec hash mismatch: manifest spec was modified")
    logger.info(f"Loaded corpus with {len(corpus)} scenes from {path}")
    return corpus


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DatasetSplit:
    labeled: np.ndarray
    unlabeled: np.ndarray
    eval: np.ndarray
    seed: int
    fraction: float

    def to_dict(self) -> Dict:
        return {
            "seed": self.seed,
            "fraction": self.fraction,
            "labeled": self.labeled.tolist(),
            "unlabeled": self.unlabeled.tolist(),
            "eval": self.eval.tolist(),
        }


def split_dataset(corpus_size: int, fraction: float, seed: int, n_eval: int) -> DatasetSplit:
    """
    Held-out ids are the trailing ``n_eval`` block for every seed; the rest is
    shuffled and its first round(fraction * (size - n_eval)) ids are labeled.
    """
    if not (0.0 < fraction <= 1.0):
        raise DataError(f"labeled fraction must be in (0, 1], got {fraction}")
    if not (0 <= n_eval < corpus_size):
        raise DataError(f"n_eval={n_eval} infeasible for corpus of {corpus_size}")
    pool = corpus_size - n_eval
    n_labeled = int(round(fraction * pool))
    if n_labeled < 1:
        raise DataError(f"fraction {fraction} of {pool} training scenes leaves no labeled images")
    order = np.random.default_rng(seed).permutation(pool)
    return DatasetSplit(
        labeled=np.sort(order[:n_labeled]),
        unlabeled=np.sort(order[n_labeled:]),
        eval=np.arange(pool, corpus_size),
        seed=seed,
        fraction=fraction,
    )
