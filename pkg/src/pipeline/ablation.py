"""
Ablation presets and the sweep runner.

Each preset enumerates one study axis as a list of named config deltas. Every
variant is trained on the same corpus, split and seed as the others, once per
requested split seed, and the sweep writes a per-run table plus a mean/std
summary per variant.
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.pipeline.config import ExperimentConfig, with_overrides, write_resolved
from src.pipeline.data import load_corpus
from src.pipeline.trainer import run_training

logger = logging.getLogger(__name__)

# copy_every_k interval for toy-length runs; 10000 would never fire
TOY_COPY_INTERVAL = 250

RESULTS_FILE = "ablation_runs.csv"
SUMMARY_FILE = "ablation_summary.csv"


class Variant(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(..., min_length=1)
    delta: Dict[str, Any] = Field(default_factory=dict, description="Dotted-key config overrides")


class AblationPreset(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    description: str
    variants: List[Variant] = Field(..., min_length=1)

    @model_validator(mode="after")
    def _unique_names(self):
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ValueError(f"preset {self.name} has duplicate variant names")
        return self


def _sweep(name: str, description: str, key: str, values: Sequence[Any], fmt: str = "{}", extra: Optional[Dict[str, Any]] = None) -> AblationPreset:
    return AblationPreset(
        name=name,
        description=description,
        variants=[Variant(name=fmt.format(v), delta={**(extra or {}), key: v}) for v in values],
    )


PRESETS: Dict[str, AblationPreset] = {
    p.name: p
    for p in [
        _sweep("proposals", "Teacher proposals used for ROI pseudo-labels", "train.n_proposals", [8, 32, 128, 640, 2000], "n{}"),
        AblationPreset(
            name="update-rules",
            description="How the teacher follows the student",
            variants=[
                Variant(name="ema_per_iter", delta={"train.update_rule": "ema_per_iter"}),
                Variant(name="copy_every_k", delta={"train.update_rule": "copy_every_k", "train.copy_interval": TOY_COPY_INTERVAL}),
                Variant(name="fixed", delta={"train.update_rule": "fixed"}),
            ],
        ),
        AblationPreset(
            name="soft-vs-hard",
            description="Soft versus thresholded pseudo-labels, both without the teacher ensemble",
            variants=[
                Variant(name="soft", delta={"train.label_mode": "soft", "train.ensemble_mode": "none"}),
                Variant(name="hard", delta={"train.label_mode": "hard", "train.ensemble_mode": "none"}),
            ],
        ),
        _sweep("ensembles", "Teacher ROI-head ensembles", "train.ensemble_mode", ["none", "random_aug", "flip"]),
        _sweep("beta-sweep", "Weight of the unsupervised loss", "train.beta", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], "beta{}"),
        AblationPreset(
            name="localization",
            description="Regression terms in the unsupervised loss",
            variants=[
                Variant(name="loc_on", delta={"train.unsup_localization": True}),
                Variant(name="loc_off", delta={"train.unsup_localization": False}),
            ],
        ),
        _sweep("hard-theta", "Hard-label confidence threshold", "train.theta", [0.5, 0.6, 0.7, 0.8, 0.9], "theta{}",
               {"train.label_mode": "hard"}),
        _sweep("hard-beta", "Unsupervised weight for hard labels", "train.beta", [0.05, 0.1, 0.2, 0.5], "beta{}",
               {"train.label_mode": "hard"}),
    ]
}


def get_preset(name: str) -> AblationPreset:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def variant_configs(
    base: ExperimentConfig,
    preset: AblationPreset,
    output_dir: str,
    seeds: int = 1,
) -> List[Dict[str, Any]]:
    """One job per (variant, split seed); run names encode both."""
    jobs = []
    for offset in range(seeds):
        split_seed = base.split.seed + offset
        for variant in preset.variants:
            delta = {
                **variant.delta,
                "run_name": f"{preset.name}-{variant.name}-s{split_seed}",
                "output_dir": output_dir,
                "split.seed": split_seed,
            }
            config = with_overrides(base, delta)
            jobs.append({"variant": variant.name, "split_seed": split_seed, "config": config.model_dump(mode="json")})
    return jobs


def run_variant(job: Dict[str, Any]) -> Dict[str, Any]:
    """Train one variant; failures are reported in the row instead of raised."""
    config = ExperimentConfig.model_validate(job["config"])
    row: Dict[str, Any] = {"variant": job["variant"], "split_seed": job["split_seed"], "run_name": config.run_name}
    try:
        corpus = load_corpus(config.corpus.path)
        result = run_training(config, corpus)
        row.update(
            status="ok",
            baseline_map=result.baseline.get("teacher_map"),
            teacher_map=result.final.get("teacher_map"),
            student_map=result.final.get("student_map"),
            teacher_map50=result.final.get("teacher_map50"),
            student_map50=result.final.get("student_map50"),
            teacher_unlabeled_map=result.final.get("teacher_unlabeled_map"),
        )
    except Exception as e:
        logger.warning(f"Variant {config.run_name} failed: {e}")
        row.update(status="failed", error=f"{type(e).__name__}: {e}")
    return row


def summarize(rows: List[Dict[str, Any]], variant_order: Sequence[str]) -> pd.DataFrame:
    """Mean and std of final mAPs per variant, in preset order."""
    df = pd.DataFrame(rows)
    metrics = [c for c in ("baseline_map", "teacher_map", "student_map", "teacher_unlabeled_map") if c in df]
    ok = df[df["status"] == "ok"] if "status" in df else df
    if ok.empty or not metrics:
        summary = pd.DataFrame({"variant": list(variant_order)})
    else:
        grouped = ok.groupby("variant")[metrics].agg(["mean", "std"])
        grouped.columns = [f"{m}_{stat}" for m, stat in grouped.columns]
        summary = grouped.reindex(list(variant_order)).reset_index().rename(columns={"index": "variant"})
    runs = df.groupby("variant").size().reindex(list(variant_order), fill_value=0)
    failed = df[df["status"] != "ok"].groupby("variant").size().reindex(list(variant_order), fill_value=0)
    summary["runs"] = runs.values
    summary["failed"] = failed.values
    return summary


def run_ablation(
    base: ExperimentConfig,
    preset_name: str,
    output_dir: Optional[str] = None,
    seeds: int = 1,
    parallel: int = 1,
) -> pd.DataFrame:
    """Run every variant of a preset and write the run table and summary CSVs."""
    preset = get_preset(preset_name)
    output_dir = output_dir or os.path.join(base.output_dir, f"ablate-{preset.name}")
    os.makedirs(output_dir, exist_ok=True)
    write_resolved(base, output_dir)
    jobs = variant_configs(base, preset, output_dir, seeds)
    logger.info(f"Ablation {preset.name}: {len(preset.variants)} variants x {seeds} seed(s), parallel={parallel}")

    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(run_variant, jobs))
    else:
        rows = [run_variant(job) for job in jobs]

    pd.DataFrame(rows).to_csv(os.path.join(output_dir, RESULTS_FILE), index=False)
    summary = summarize(rows, [v.name for v in preset.variants])
    summary.to_csv(os.path.join(output_dir, SUMMARY_FILE), index=False)
    failed = sum(1 for r in rows if r["status"] != "ok")
    if failed:
        logger.warning(f"{failed} of {len(rows)} ablation runs failed")
    logger.info(f"Ablation summary written to {output_dir}")
    return summary
