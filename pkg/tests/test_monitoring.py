import json
import os

from src.pipeline.monitoring import (
    PROM_FILE,
    SUMMARY_FILE,
    MetricsWriter,
    StepTimer,
    TrainingMonitor,
    get_training_monitor,
    read_metrics,
)
from src.pipeline.schema_validator import validate_metrics_file
from src.pipeline.trainer import MetricsRecord


def _record(iteration, **extra):
    return MetricsRecord(iteration=iteration, phase="semi_supervised", label_mode="soft", loss_total=1.0, **extra)


def test_writer_starts_with_header_and_buffers_records(tmp_path):
    path = str(tmp_path / "run" / "metrics.jsonl")
    writer = MetricsWriter(path, {"run_name": "r"})
    writer.write(_record(1))
    assert read_metrics(path) == []
    writer.flush()
    writer.write(_record(2, teacher_map=0.25))
    writer.close()
    with open(path) as f:
        header = json.loads(f.readline())
    assert header["schema"] == "humble-metrics" and header["run_name"] == "r"
    records = read_metrics(path)
    assert [r["iteration"] for r in records] == [1, 2]
    assert records[1]["teacher_map"] == 0.25


def test_reopening_appends_without_second_header(tmp_path):
    path = str(tmp_path / "metrics.jsonl")
    with MetricsWriter(path) as writer:
        writer.write(_record(1))
    with MetricsWriter(path) as writer:
        writer.write(_record(2))
    with open(path) as f:
        lines = f.read().splitlines()
    assert len(lines) == 3
    assert validate_metrics_file(path) == (True, [])


def test_truncate_after(tmp_path):
    path = str(tmp_path / "metrics.jsonl")
    with MetricsWriter(path) as writer:
        for i in range(1, 6):
            writer.write(_record(i))
    assert MetricsWriter.truncate_after(path, 3) == 3
    assert [r["iteration"] for r in read_metrics(path)] == [1, 2, 3]
    assert MetricsWriter.truncate_after(str(tmp_path / "absent.jsonl"), 3) == 0


def test_validate_metrics_file_flags_problems(tmp_path):
    path = tmp_path / "metrics.jsonl"
    header = json.dumps({"schema": "humble-metrics", "schema_version": 1})
    good = _record(2).model_dump_json()
    earlier = _record(1).model_dump_json()
    path.write_text("\n".join([header, good, earlier]) + "\n")
    ok, errors = validate_metrics_file(str(path))
    assert not ok and errors

    path.write_text("\n".join([header, json.dumps({"iteration": 1, "phase": "burn_in", "status": "ok", "label_mode": "soft", "loss_total": -2.0})]) + "\n")
    ok, errors = validate_metrics_file(str(path))
    assert not ok and any("loss_total" in e for e in errors)

    path.write_text(good + "\n")
    assert not validate_metrics_file(str(path))[0]
    assert not validate_metrics_file(str(tmp_path / "absent.jsonl"))[0]


def test_numeric_failure_records_skip_value_checks(tmp_path):
    path = str(tmp_path / "metrics.jsonl")
    with MetricsWriter(path) as writer:
        writer.write(MetricsRecord(iteration=4, phase="semi_supervised", status="numeric_failure", label_mode="soft", message="nan"))
    assert validate_metrics_file(path) == (True, [])


def test_monitor_summary_and_files(tmp_path):
    monitor = TrainingMonitor(str(tmp_path))
    monitor.start_run("r", "hash")
    monitor.record_step("burn_in", 0.5, {"total": 2.0})
    monitor.record_step("burn_in", 1.5, {"total": 1.0})
    monitor.record_evaluation(2, "burn_in", {"teacher_map": 0.1, "student_map": None})
    monitor.record_pseudo_labels({"pseudo_num_proposals": 12.0})
    monitor.end_run("completed")
    summary = monitor.get_summary()
    assert summary["phase_steps"] == {"burn_in": 2}
    assert summary["seconds_per_step"]["burn_in"] == 1.0
    assert summary["last_run"]["status"] == "completed"
    assert summary["evaluations"][0]["teacher_map"] == 0.1
    monitor.save_metrics()
    assert os.path.exists(tmp_path / SUMMARY_FILE) and os.path.exists(tmp_path / PROM_FILE)


def test_monitor_records_errors(tmp_path):
    monitor = TrainingMonitor(str(tmp_path))
    monitor.start_run("r")
    monitor.end_run("numeric_failure", "loss is nan")
    summary = monitor.get_summary()
    assert summary["errors"] == [{"run_id": "r", "error": "loss is nan"}]
    monitor.end_run("completed")
    assert len(monitor.get_summary()["errors"]) == 1


def test_step_timer_measures_non_negative_duration():
    with StepTimer() as timer:
        sum(range(100))
    assert timer.duration >= 0.0


def test_get_training_monitor_is_shared_per_directory(tmp_path):
    a = get_training_monitor(str(tmp_path / "a"))
    assert get_training_monitor(str(tmp_path / "a")) is a
    assert get_training_monitor(str(tmp_path / "b")) is not a
