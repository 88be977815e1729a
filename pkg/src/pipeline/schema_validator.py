"""
Schema validation and data lineage tracking module.
"""
import hashlib
import json
import logging
import math
import os
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

MANIFEST_REQUIRED = {
    "schema": str,
    "schema_version": int,
    "spec": dict,
    "spec_hash": str,
    "num_scenes": int,
    "n_train": int,
    "n_eval": int,
    "image_shape": list,
    "scenes": list,
}

METRICS_SCHEMA = "humble-metrics"
METRICS_REQUIRED = ("iteration", "phase", "status", "label_mode")
LOSS_FIELDS = (
    "loss_total", "loss_sup", "loss_unsup",
    "sup_rpn_cls", "sup_rpn_loc", "sup_roi_cls", "sup_roi_loc",
    "unsup_rpn_cls", "unsup_rpn_loc", "unsup_roi_cls", "unsup_roi_loc",
)


class DataLineageTracker:
    """Track how a run's artifacts derive from its inputs."""

    def __init__(self, run_id: Optional[str] = None):
        self.lineage_records = []
        self.pipeline_run_id = run_id or datetime.utcnow().isoformat()

    def record_step(self, step_name: str, inputs: Dict[str, Any] = None, outputs: Dict[str, Any] = None,
                    metadata: Dict = None):
        """Record a pipeline step with the hashes or paths it consumed and produced."""
        record = {
            "pipeline_run_id": self.pipeline_run_id,
            "step_name": step_name,
            "timestamp": datetime.utcnow().isoformat(),
            "inputs": inputs or {},
            "outputs": outputs or {},
            "metadata": metadata or {},
        }
        self.lineage_records.append(record)
        logger.info(f"Lineage recorded: {step_name} - inputs={list((inputs or {}).keys())}, outputs={list((outputs or {}).keys())}")

    def get_lineage_summary(self) -> Dict:
        return {
            "pipeline_run_id": self.pipeline_run_id,
            "total_steps": len(self.lineage_records),
            "steps": self.lineage_records,
        }

    def save_lineage(self, output_path: str):
        os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
        with open(output_path, "w") as f:
            json.dump(self.get_lineage_summary(), f, indent=2)
        logger.info(f"Lineage saved to {output_path}")


def calculate_content_hash(content: Any) -> str:
    """SHA-256 of a JSON-serializable value, independent of key order."""
    content_str = json.dumps(content, default=str, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(content_str.encode()).hexdigest()


def validate_manifest(manifest: Dict[str, Any]) -> Tuple[bool, List[str]]:
    """
    Validate a corpus manifest.

    Returns:
        (is_valid, list_of_errors)
    """
    errors = []
    for key, expected_type in MANIFEST_REQUIRED.items():
        if key not in manifest:
            errors.append(f"Missing required field: {key}")
        elif not isinstance(manifest[key], expected_type):
            errors.append(f"Field {key} type mismatch: expected {expected_type.__name__}, got {type(manifest[key]).__name__}")
    if errors:
        logger.warning(f"Manifest validation failed with {len(errors)} errors: {errors}")
        return False, errors

    if manifest["schema"] != "humble-corpus":
        errors.append(f"Unknown manifest schema {manifest['schema']!r}")
    if manifest["n_train"] + manifest["n_eval"] != manifest["num_scenes"]:
        errors.append("n_train + n_eval does not equal num_scenes")
    if len(manifest["scenes"]) != manifest["num_scenes"]:
        errors.append(f"Scene list has {len(manifest['scenes'])} entries, expected {manifest['num_scenes']}")
    ids = [s.get("id") for s in manifest["scenes"]]
    if ids != list(range(len(ids))):
        errors.append("Scene ids are not 0..N-1 in order")

    is_valid = len(errors) == 0
    if is_valid:
        logger.info(f"Manifest validation passed: {manifest['num_scenes']} scenes")
    else:
        logger.warning(f"Manifest validation failed with {len(errors)} errors: {errors}")
    return is_valid, errors


def validate_metrics_record(record: Dict[str, Any]) -> List[str]:
    errors = []
    for key in METRICS_REQUIRED:
        if key not in record:
            errors.append(f"Missing required field: {key}")
    if record.get("status") == "numeric_failure":
        return errors
    for key in LOSS_FIELDS:
        value = record.get(key)
        if value is None:
            continue
        if not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
            errors.append(f"{key}={value!r} is not a finite non-negative number")
    for key in ("teacher_map", "student_map", "teacher_map50", "student_map50", "teacher_unlabeled_map"):
        value = record.get(key)
        if value is not None and not (0.0 <= value <= 1.0):
            errors.append(f"{key}={value!r} outside [0, 1]")
    return errors


def validate_metrics_file(path: str) -> Tuple[bool, List[str]]:
    """
    Validate a metrics stream using only the JSON-lines format.

    The first line must be the schema header; iterations must not decrease.
    """
    errors: List[str] = []
    try:
        with open(path) as f:
            lines = [line for line in f.read().splitlines() if line.strip()]
    except OSError as e:
        return False, [f"Cannot read {path}: {e}"]
    if not lines:
        return False, ["Metrics file is empty"]

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        return False, [f"Header is not JSON: {e}"]
    if header.get("schema") != METRICS_SCHEMA or not isinstance(header.get("schema_version"), int):
        errors.append(f"Header does not declare the {METRICS_SCHEMA} schema: {header}")

    last_iteration = -1
    for lineno, line in enumerate(lines[1:], 2):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            errors.append(f"line {lineno}: not JSON ({e})")
            continue
        errors.extend(f"line {lineno}: {msg}" for msg in validate_metrics_record(record))
        iteration = record.get("iteration", -1)
        if iteration < last_iteration:
            errors.append(f"line {lineno}: iteration {iteration} after {last_iteration}")
        last_iteration = max(last_iteration, iteration)

    is_valid = len(errors) == 0
    if is_valid:
        logger.info(f"Metrics validation passed: {len(lines) - 1} records in {path}")
    else:
        logger.warning(f"Metrics validation failed with {len(errors)} errors")
    return is_valid, errors


def detect_anomalies(gts: List[Any], num_classes: int, image_size: int) -> Dict[str, Any]:
    """
    Detect anomalies in corpus ground truth.

    Returns:
        Dictionary with anomaly counts and the class histogram
    """
    anomalies = {
        "empty_scenes": 0,
        "out_of_bounds_boxes": 0,
        "invalid_class_ids": 0,
    }
    histogram = [0] * num_classes
    for gt in gts:
        if not len(gt):
            anomalies["empty_scenes"] += 1
            continue
        b = gt.boxes
        anomalies["out_of_bounds_boxes"] += int(((b[:, :2] < 0).any(axis=1) | (b[:, 2:] > image_size).any(axis=1)).sum())
        for c in gt.classes:
            if 0 <= c < num_classes:
                histogram[int(c)] += 1
            else:
                anomalies["invalid_class_ids"] += 1

    total_anomalies = anomalies["out_of_bounds_boxes"] + anomalies["invalid_class_ids"]
    if total_anomalies > 0:
        logger.warning(f"Detected {total_anomalies} anomalies: {anomalies}")
    else:
        logger.info(f"No anomalies detected in {len(gts)} scenes")

    anomalies["total_scenes"] = len(gts)
    anomalies["class_histogram"] = histogram
    return anomalies
