import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

from environs import Env
from pythonjsonlogger import jsonlogger

# Add the project root to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from src.autograd.tensor import NumericError
from src.detection.detector import DetectorParams
from src.pipeline.ablation import PRESETS, run_ablation
from src.pipeline.config import ConfigError, ExperimentConfig, config_schema, load_config, write_resolved
from src.pipeline.data import DataError, build_corpus, load_corpus, save_corpus
from src.pipeline.evaluation import evaluate_model
from src.pipeline.monitoring import get_training_monitor
from src.pipeline.schema_validator import detect_anomalies
from src.pipeline.trainer import run_training
from src.pipeline.verify import CHECKS, FAULTS, run_verify

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(log_dir: Optional[str] = None) -> None:
    """
    Console handler plus a structured ``run.log`` in ``log_dir``.

    HUMBLE_LOG_LEVEL sets the level; HUMBLE_LOG_JSON=true switches the console
    to JSON records as well.
    """
    env = Env()
    env.read_env()
    level = env.str("HUMBLE_LOG_LEVEL", "INFO").upper()
    json_console = env.bool("HUMBLE_LOG_JSON", False)

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(level)

    console = logging.StreamHandler()
    console.setFormatter(jsonlogger.JsonFormatter(LOG_FORMAT) if json_console else logging.Formatter(LOG_FORMAT))
    root.addHandler(console)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, "run.log"))
        file_handler.setFormatter(jsonlogger.JsonFormatter(LOG_FORMAT))
        root.addHandler(file_handler)


def _overrides(args: argparse.Namespace) -> Dict:
    """--set key=value pairs; values parse as JSON when they can."""
    delta: Dict = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            delta[key] = json.loads(raw)
        except json.JSONDecodeError:
            delta[key] = raw
    return delta


def _load(args: argparse.Namespace, seed_key: Optional[str] = None, out_key: Optional[str] = None) -> ExperimentConfig:
    delta = _overrides(args)
    if getattr(args, "out", None) and out_key:
        delta[out_key] = args.out
    if getattr(args, "seed", None) is not None and seed_key:
        delta[seed_key] = args.seed
    return load_config(args.config, delta)


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _load(args, "corpus.seed", "corpus.path")
    path = config.corpus.path
    configure_logging(path)
    corpus = build_corpus(config.corpus, config.scene, workers=args.parallel)
    save_corpus(corpus, path, force=args.force)
    write_resolved(config, path)
    anomalies = detect_anomalies(corpus.gts, config.scene.num_classes, config.scene.image_size)
    print(f"Corpus: {len(corpus)} scenes ({corpus.n_train} train + {corpus.n_eval} eval) at {path}")
    print(f"Objects per class: {anomalies['class_histogram']}; empty scenes: {anomalies['empty_scenes']}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args, "train.seed", "output_dir")
    configure_logging(config.run_dir)
    corpus = load_corpus(config.corpus.path)
    result = run_training(config, corpus, resume=args.resume, monitor=get_training_monitor(config.run_dir))
    print(f"Run {config.run_name}: {result.state.iteration} iterations, metrics at {result.metrics_path}")
    print(f"Supervised baseline mAP: {result.baseline.get('teacher_map')}")
    print(f"Final teacher mAP: {result.final.get('teacher_map')}  student mAP: {result.final.get('student_map')}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load(args)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    configure_logging(out_dir)
    params, meta = DetectorParams.load(args.checkpoint)
    corpus = load_corpus(args.corpus or config.corpus.path)
    if params.num_classes != corpus.spec.num_classes:
        raise DataError(f"checkpoint has {params.num_classes} classes, corpus has {corpus.spec.num_classes}")
    ids = corpus.eval_ids
    result = evaluate_model(
        params, [corpus.image(i) for i in ids], [corpus.gts[i] for i in ids], config.model.detect_kwargs(), desc="eval"
    )
    summary = {"checkpoint": args.checkpoint, "role": meta.get("role"), "iteration": meta.get("iteration"), **result.to_dict()}
    name = os.path.splitext(os.path.basename(args.checkpoint))[0]
    path = os.path.join(out_dir, f"eval_{name}.json")
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    write_resolved(config, out_dir)
    print(f"{args.checkpoint}: AP50={result.ap50:.4f} mAP(50:95)={result.map:.4f} on {len(ids)} held-out scenes")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load(args, "train.seed", "output_dir")
    out_dir = os.path.join(config.output_dir, f"ablate-{args.preset}")
    configure_logging(out_dir)
    summary = run_ablation(config, args.preset, out_dir, seeds=args.seeds, parallel=args.parallel)
    print(summary.to_string(index=False))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    configure_logging(args.out)
    report = run_verify(fault=args.inject_fault, only=args.check)
    for r in report.results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<30} {r.detail}")
    if args.out:
        with open(os.path.join(args.out, "verify_report.json"), "w") as f:
            json.dump(report.to_dict(), f, indent=2)
    if not report.passed:
        print(f"{len(report.failed())} check(s) failed: {', '.join(report.failed())}")
        return EXIT_FAILURE
    print(f"All {len(report.results)} checks passed")
    return EXIT_OK


def cmd_schema(args: argparse.Namespace) -> int:
    print(json.dumps(config_schema(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Semi-supervised micro two-stage detector experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", type=str, default=None, help="Experiment config JSON (default: built-in defaults)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Dotted config override, e.g. train.beta=0.3")
        return p

    p = with_config(sub.add_parser("gen-data", help="Generate the synthetic shapes corpus"))
    p.add_argument("--out", type=str, default=None, help="Corpus directory (default: corpus.path)")
    p.add_argument("--seed", type=int, default=None, help="Corpus seed")
    p.add_argument("--force", action="store_true", help="Overwrite an existing corpus")
    p.add_argument("--parallel", type=int, default=1, help="Worker processes")
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("train", help="Burn-in then semi-supervised training"))
    p.add_argument("--out", type=str, default=None, help="Parent output directory (default: output_dir)")
    p.add_argument("--seed", type=int, default=None, help="Training seed")
    p.add_argument("--resume", action="store_true", help="Continue from the run's latest checkpoint")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="Evaluate a checkpoint on the held-out scenes"))
    p.add_argument("checkpoint", type=str, help="Detector checkpoint file")
    p.add_argument("--corpus", type=str, default=None, help="Corpus directory (default: corpus.path)")
    p.add_argument("--out", type=str, default=None, help="Directory for the evaluation JSON")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("ablate", help="Run an ablation preset"))
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--out", type=str, default=None, help="Parent output directory (default: output_dir)")
    p.add_argument("--seed", type=int, default=None, help="Training seed shared by all variants")
    p.add_argument("--seeds", type=int, default=1, help="Number of data splits per variant")
    p.add_argument("--parallel", type=int, default=1, help="Variants trained concurrently")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="Run the oracle and invariant checks")
    p.add_argument("--check", action="append", choices=list(CHECKS), help="Run only this check (repeatable)")
    p.add_argument("--out", type=str, default=None, help="Directory for verify_report.json")
    p.add_argument("--inject-fault", choices=FAULTS, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("schema", help="Print the JSON schema of the experiment config")
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except DataError as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except Exception as e:
        logger.error(f"Command {args.command} failed: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
