"""
Monitoring and observability for training runs.

Two channels are kept apart: the metrics stream (``metrics.jsonl``) holds only
values that are a deterministic function of the seed, while wall-clock
durations go to Prometheus metrics, ``run_summary.json`` and the logs.
"""
import json
import logging
import os
import threading
import time
from collections import defaultdict
from datetime import datetime
from typing import Any, Dict, List, Mapping, Optional, Union

from prometheus_client import REGISTRY, Counter, Gauge, Histogram, write_to_textfile
from pydantic import BaseModel

logger = logging.getLogger(__name__)

METRICS_SCHEMA = "humble-metrics"
METRICS_SCHEMA_VERSION = 1
METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "run_summary.json"
PROM_FILE = "metrics.prom"

# Prometheus metrics
training_runs_total = Counter('training_runs_total', 'Total number of training runs', ['status'])
training_iterations_total = Counter('training_iterations_total', 'Optimizer steps taken', ['phase'])
training_step_duration_seconds = Histogram('training_step_duration_seconds', 'Training step duration in seconds', ['phase'])
training_errors_total = Counter('training_errors_total', 'Total number of training errors', ['error_type'])
training_loss = Gauge('training_loss', 'Latest loss value', ['component'])
model_map = Gauge('model_map', 'Latest held-out mAP', ['model', 'metric'])
pseudo_label_stat = Gauge('pseudo_label_stat', 'Latest pseudo-label statistic', ['stat'])


class MetricsWriter:
    """
    Append-only JSON-lines writer for MetricsRecords.

    The first line of a new file is a header naming the schema and version.
    Records are buffered and written to disk on ``flush``.
    """

    def __init__(self, path: str, header: Optional[Mapping[str, Any]] = None):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        new_file = not os.path.exists(path) or os.path.getsize(path) == 0
        self._file = open(path, "a")
        self._pending: List[str] = []
        if new_file:
            first = {"schema": METRICS_SCHEMA, "schema_version": METRICS_SCHEMA_VERSION}
            first.update(header or {})
            self._file.write(json.dumps(first, sort_keys=True) + "\n")
            self._file.flush()

    def write(self, record: Union[BaseModel, Mapping[str, Any]]) -> None:
        data = record.model_dump(mode="json") if isinstance(record, BaseModel) else dict(record)
        self._pending.append(json.dumps(data, sort_keys=True))

    def flush(self) -> None:
        if self._pending:
            self._file.write("\n".join(self._pending) + "\n")
            self._pending = []
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self.flush()
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def truncate_after(path: str, iteration: int) -> int:
        """Drop records past ``iteration`` (used before resuming); returns records kept."""
        if not os.path.exists(path):
            return 0
        with open(path) as f:
            lines = [line for line in f.read().splitlines() if line.strip()]
        kept = lines[:1] + [line for line in lines[1:] if json.loads(line).get("iteration", 0) <= iteration]
        with open(path, "w") as f:
            f.write("".join(line + "\n" for line in kept))
        return len(kept) - 1


def read_metrics(path: str) -> List[Dict[str, Any]]:
    """Records of a metrics file, header excluded."""
    with open(path) as f:
        lines = [line for line in f.read().splitlines() if line.strip()]
    return [json.loads(line) for line in lines[1:]]


class TrainingMonitor:
    """Track phases, durations and evaluation results of one training run."""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.metrics = {
            "runs": [],
            "phase_durations": defaultdict(float),
            "phase_steps": defaultdict(int),
            "evaluations": [],
            "errors": [],
        }
        self.current_run = None
        self.lock = threading.Lock()

    def start_run(self, run_id: str, config_hash: str = None):
        with self.lock:
            self.current_run = {
                "run_id": run_id,
                "config_hash": config_hash,
                "start_time": datetime.utcnow().isoformat(),
                "status": "running",
            }
            training_runs_total.labels(status='running').inc()
        logger.info(f"Run {run_id} started")

    def record_step(self, phase: str, duration: float, losses: Mapping[str, float] = None):
        with self.lock:
            self.metrics["phase_durations"][phase] += duration
            self.metrics["phase_steps"][phase] += 1
            training_iterations_total.labels(phase=phase).inc()
            training_step_duration_seconds.labels(phase=phase).observe(duration)
            for component, value in (losses or {}).items():
                training_loss.labels(component=component).set(value)

    def record_evaluation(self, iteration: int, phase: str, results: Mapping[str, Optional[float]]):
        with self.lock:
            entry = {"iteration": iteration, "phase": phase, **results}
            self.metrics["evaluations"].append(entry)
            for key, value in results.items():
                if value is None:
                    continue
                model, _, metric = key.partition("_")
                model_map.labels(model=model, metric=metric).set(value)

    def record_pseudo_labels(self, stats: Mapping[str, float]):
        for stat, value in stats.items():
            pseudo_label_stat.labels(stat=stat).set(value)

    def end_run(self, status: str = "completed", error: str = None):
        with self.lock:
            if self.current_run is None:
                return
            self.current_run["end_time"] = datetime.utcnow().isoformat()
            self.current_run["status"] = status
            start = datetime.fromisoformat(self.current_run["start_time"])
            self.current_run["total_duration_seconds"] = (datetime.utcnow() - start).total_seconds()
            if error:
                self.current_run["error"] = error
                self.metrics["errors"].append({"run_id": self.current_run["run_id"], "error": error})
                training_errors_total.labels(error_type=status).inc()
            self.metrics["runs"].append(self.current_run)
            training_runs_total.labels(status=status).inc()
            self.current_run = None

    def get_summary(self) -> Dict:
        with self.lock:
            runs = self.metrics["runs"]
            durations = dict(self.metrics["phase_durations"])
            steps = dict(self.metrics["phase_steps"])
            return {
                "last_run": runs[-1] if runs else None,
                "phase_durations_seconds": durations,
                "phase_steps": steps,
                "seconds_per_step": {p: durations[p] / steps[p] for p in steps if steps[p]},
                "evaluations": list(self.metrics["evaluations"]),
                "errors": list(self.metrics["errors"]),
            }

    def save_metrics(self):
        """Write run_summary.json and the Prometheus text export."""
        try:
            os.makedirs(self.output_dir, exist_ok=True)
            with open(os.path.join(self.output_dir, SUMMARY_FILE), 'w') as f:
                json.dump(self.get_summary(), f, indent=2, default=str)
            write_to_textfile(os.path.join(self.output_dir, PROM_FILE), REGISTRY)
            logger.info(f"Run summary saved to {self.output_dir}")
        except Exception as e:
            logger.error(f"Error saving run summary: {e}")


class StepTimer:
    """Context manager measuring one step for ``TrainingMonitor.record_step``."""

    def __init__(self):
        self.duration = 0.0

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.duration = time.perf_counter() - self._start


# Global monitor instance
_training_monitor: Optional[TrainingMonitor] = None


def get_training_monitor(output_dir: str) -> TrainingMonitor:
    """Get or create the training monitor for ``output_dir``."""
    global _training_monitor
    if _training_monitor is None or _training_monitor.output_dir != output_dir:
        _training_monitor = TrainingMonitor(output_dir)
    return _training_monitor
