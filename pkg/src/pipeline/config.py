"""
Experiment configuration.

An :class:`ExperimentConfig` is a JSON document validated by pydantic. Unknown
keys are rejected and omitted keys take the defaults below. Environment
variables override file values before validation:

    HUMBLE_<SECTION>__<FIELD>=<value>     e.g. HUMBLE_TRAIN__BETA=0.3
    HUMBLE_<FIELD>=<value>                e.g. HUMBLE_RUN_NAME=ablation-1

Values are parsed as JSON when possible and used as strings otherwise. A
``.env`` file in the working directory is loaded first.
"""
import copy
import json
import logging
import os
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

from environs import Env
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.detection.detector import DetectorSpec, SamplingSpec
from src.detection.geometry import AnchorSpec

logger = logging.getLogger(__name__)

ENV_PREFIX = "HUMBLE_"
RESOLVED_CONFIG_FILE = "resolved_config.json"
DEFAULT_CONFIG_PATH = os.path.join(
    os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))), "configs", "default.json"
)

SOFT_BETA = 0.5
HARD_BETA = 0.1


class ConfigError(ValueError):
    """Invalid configuration document or override."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ClassSpec(_Section):
    name: str = Field(..., description="Class name")
    shape: Literal["square", "disc", "bar"] = Field(..., description="Rendered shape kind")
    color: Tuple[float, float, float] = Field(..., description="Base RGB color family")


def _default_classes() -> List[ClassSpec]:
    return [
        ClassSpec(name="square", shape="square", color=(200.0, 60.0, 60.0)),
        ClassSpec(name="disc", shape="disc", color=(60.0, 190.0, 70.0)),
        ClassSpec(name="bar", shape="bar", color=(60.0, 80.0, 210.0)),
    ]


class SceneSpec(_Section):
    image_size: int = Field(64, ge=16, description="Square image side in pixels (multiple of 8)")
    classes: List[ClassSpec] = Field(default_factory=_default_classes, min_length=1, description="Class inventory")
    min_objects: int = Field(1, ge=0, description="Minimum objects per scene")
    max_objects: int = Field(3, ge=0, description="Maximum objects per scene")
    min_size: int = Field(12, ge=4, description="Minimum object side in pixels")
    max_size: int = Field(28, ge=4, description="Maximum object side in pixels")
    background: float = Field(100.0, ge=0, le=255, description="Background gray level")
    noise_std: float = Field(8.0, ge=0, description="Background pixel noise standard deviation")
    color_jitter: float = Field(25.0, ge=0, description="Uniform per-channel color jitter amplitude")
    max_overlap_iou: float = Field(0.3, ge=0, le=1, description="Maximum IoU between two objects")
    max_retries: int = Field(200, ge=1, description="Placement attempts per object before giving up")

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.image_size % 8:
            raise ValueError(f"image_size must be a multiple of 8, got {self.image_size}")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects exceeds max_objects")
        if self.min_size > self.max_size or self.max_size >= self.image_size:
            raise ValueError("object size range must satisfy min_size <= max_size < image_size")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.classes)


class CorpusConfig(_Section):
    path: str = Field("data/corpus", description="Corpus archive directory")
    n_train: int = Field(2000, ge=1, description="Scenes available for labeled/unlabeled splitting")
    n_eval: int = Field(200, ge=1, description="Held-out evaluation scenes")
    seed: int = Field(0, ge=0, description="Corpus generation seed")


class SplitConfig(_Section):
    labeled_fraction: float = Field(0.1, gt=0, le=1, description="Fraction of training scenes that keep labels")
    seed: int = Field(0, ge=0, description="Split seed")


class ModelConfig(_Section):
    channels: Tuple[int, ...] = Field((8, 16, 32), min_length=1, description="Backbone block widths")
    rpn_channels: int = Field(32, ge=1)
    pool_size: int = Field(4, ge=1, description="ROI pooling grid side")
    hidden: int = Field(64, ge=1, description="ROI head hidden width")
    anchor_scales: Tuple[float, ...] = Field((12.0, 20.0, 32.0), min_length=1)
    anchor_aspects: Tuple[float, ...] = Field((1.0, 0.5), min_length=1, description="Anchor height / width")
    init_seed: int = Field(0, ge=0)
    rpn_nms_thresh: float = Field(0.7, gt=0, le=1, description="NMS IoU for RPN proposals")
    rpn_batch: int = Field(32, ge=1)
    rpn_positive_fraction: float = Field(0.5, gt=0, le=1)
    roi_batch: int = Field(64, ge=1)
    roi_foreground_fraction: float = Field(0.25, gt=0, le=1)
    train_proposals: int = Field(128, ge=1, description="RPN proposals considered for supervised ROI sampling")
    test_proposals: int = Field(100, ge=1, description="RPN proposals at inference")
    score_thresh: float = Field(0.05, ge=0, le=1)
    nms_thresh: float = Field(0.5, gt=0, le=1, description="Per-class NMS IoU at inference")
    max_detections: int = Field(50, ge=1)

    def detector_spec(self, num_classes: int) -> DetectorSpec:
        anchors = AnchorSpec(stride=2 ** len(self.channels), scales=tuple(self.anchor_scales), aspects=tuple(self.anchor_aspects))
        return DetectorSpec(
            num_classes=num_classes,
            channels=tuple(self.channels),
            rpn_channels=self.rpn_channels,
            pool_size=self.pool_size,
            hidden=self.hidden,
            anchors=anchors,
        )

    def detect_kwargs(self) -> Dict[str, Any]:
        """Keyword arguments for ``detect`` at evaluation time."""
        return {
            "score_thresh": self.score_thresh,
            "nms_thresh": self.nms_thresh,
            "n_proposals": self.test_proposals,
            "rpn_nms_thresh": self.rpn_nms_thresh,
            "max_detections": self.max_detections,
        }

    def sampling_spec(self) -> SamplingSpec:
        return SamplingSpec(
            rpn_batch=self.rpn_batch,
            rpn_positive_fraction=self.rpn_positive_fraction,
            roi_batch=self.roi_batch,
            roi_foreground_fraction=self.roi_foreground_fraction,
            train_proposals=self.train_proposals,
            nms_thresh=self.rpn_nms_thresh,
        )


class TrainConfig(_Section):
    beta: Optional[float] = Field(None, ge=0, description="Unsupervised weight; defaults to 0.5 (soft) or 0.1 (hard)")
    alpha: float = Field(0.999, ge=0, le=1, description="EMA decay of the teacher")
    n_proposals: int = Field(640, ge=1, description="Teacher top-N proposals for ROI pseudo-labels")
    theta: float = Field(0.7, gt=0, le=1, description="Hard-label confidence threshold")
    label_mode: Literal["soft", "hard"] = "soft"
    update_rule: Literal["ema_per_iter", "copy_every_k", "fixed"] = "ema_per_iter"
    copy_interval: int = Field(10000, ge=1, description="k for the copy_every_k update rule")
    ensemble_mode: Literal["none", "flip", "random_aug"] = "flip"
    unsup_localization: bool = Field(True, description="Include regression terms in the unsupervised loss")
    burn_in_iters: int = Field(300, ge=0)
    total_iters: int = Field(1000, ge=0, description="Semi-supervised iterations after burn-in")
    lr: float = Field(0.01, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    n_labeled: int = Field(1, ge=1, description="Labeled images per batch (n_S)")
    n_unlabeled: int = Field(1, ge=0, description="Unlabeled images per batch (n_U)")
    seed: int = Field(0, ge=0, description="Training stream seed")
    eval_interval: int = Field(200, ge=1)
    checkpoint_interval: int = Field(200, ge=1)
    unlabeled_eval_size: int = Field(100, ge=0, description="Unlabeled scenes scored for pseudo-label quality")
    cutout_fill: Optional[float] = Field(None, ge=0, le=255, description="Cutout fill; defaults to the dataset mean")

    @property
    def effective_beta(self) -> float:
        if self.beta is not None:
            return self.beta
        return SOFT_BETA if self.label_mode == "soft" else HARD_BETA


class ExperimentConfig(_Section):
    run_name: str = Field("default", min_length=1)
    output_dir: str = Field("runs", description="Parent directory for run outputs")
    scene: SceneSpec = Field(default_factory=SceneSpec)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @field_validator("run_name")
    @classmethod
    def _plain_name(cls, v: str) -> str:
        if os.sep in v or v in (".", ".."):
            raise ValueError(f"run_name must be a plain directory name, got {v!r}")
        return v

    @property
    def run_dir(self) -> str:
        return os.path.join(self.output_dir, self.run_name)

    def detector_spec(self) -> DetectorSpec:
        return self.model.detector_spec(self.scene.num_classes)

    def resolved(self) -> Dict[str, Any]:
        """Fully defaulted document with the mode-dependent beta filled in."""
        data = self.model_dump(mode="json")
        data["train"]["beta"] = self.train.effective_beta
        return data


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(env: Optional[Env] = None) -> Dict[str, Any]:
    """Collect HUMBLE_* overrides as a nested dict."""
    if env is None:
        env = Env()
        env.read_env()
    overrides: Dict[str, Any] = {}
    sections = {name: field.annotation for name, field in ExperimentConfig.model_fields.items()}
    with env.prefixed(ENV_PREFIX):
        for name, annotation in sections.items():
            if isinstance(annotation, type) and issubclass(annotation, BaseModel):
                for sub in annotation.model_fields:
                    raw = env.str(f"{name.upper()}__{sub.upper()}", None)
                    if raw is not None:
                        overrides.setdefault(name, {})[sub] = _parse_value(raw)
            else:
                raw = env.str(name.upper(), None)
                if raw is not None:
                    overrides[name] = _parse_value(raw)
    if overrides:
        logger.info(f"Applying environment overrides: {overrides}")
    return overrides


def deep_merge(base: Mapping[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(dict(base))
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def dotted_to_nested(delta: Mapping[str, Any]) -> Dict[str, Any]:
    """{"train.beta": 0.3} -> {"train": {"beta": 0.3}}"""
    nested: Dict[str, Any] = {}
    for key, value in delta.items():
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def build_config(document: Mapping[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    use_env: bool = True,
) -> ExperimentConfig:
    """
    Load, merge and validate a configuration.

    Args:
        path: JSON document; None starts from the built-in defaults.
        overrides: nested or dotted keys applied after the file.
        use_env: apply HUMBLE_* environment overrides last.
    """
    document: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as f:
                document = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError(f"config file {path} must contain a JSON object")
    if overrides:
        document = deep_merge(document, dotted_to_nested(overrides))
    if use_env:
        document = deep_merge(document, env_overrides())
    config = build_config(document)
    logger.info(f"Loaded configuration for run '{config.run_name}'")
    return config


def with_overrides(config: ExperimentConfig, delta: Mapping[str, Any]) -> ExperimentConfig:
    """A copy of ``config`` with dotted-key changes, re-validated."""
    return build_config(deep_merge(config.model_dump(mode="json"), dotted_to_nested(delta)))


def write_resolved(config: ExperimentConfig, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, RESOLVED_CONFIG_FILE)
    with open(path, "w") as f:
        json.dump(config.resolved(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def config_schema() -> Dict[str, Any]:
    return ExperimentConfig.model_json_schema()
