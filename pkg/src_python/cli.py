"""
Command-line entry point. Each subcommand resolves an ExperimentConfig,
attaches `<out>/run.log`, runs one ExperimentRunner method and maps expected
failures to their exit status.
"""

import argparse
import json
import os
import uuid
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional

import sentry_sdk

from config import load_experiment_config
from errors import EXIT_OK, EXIT_UNEXPECTED, GaitError
from gait_data import SyntheticSpec
from logger import attach_run_log, clear_context, detach_handler, logger, set_run_context
from pipeline import VARIANTS, ExperimentRunner

SENTRY_DSN = os.getenv("SENTRY_DSN")
ENVIRONMENT = os.getenv("ENVIRONMENT", "development")

def init_sentry() -> bool:
    if not SENTRY_DSN:
        return False
    sentry_sdk.init(
        dsn=SENTRY_DSN,
        environment=ENVIRONMENT,
        traces_sample_rate=0.0,
        attach_stacktrace=True,
        send_default_pii=False,
    )
    logger.info("Sentry initialized for CLI runs")
    return True


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="Directory of gait recording files")
    common.add_argument("--config", help="JSON settings file merged over the defaults")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--out", help="Output directory for reports, bundles and logs")
    common.add_argument("--threads", type=int, help="Parallel workers (folds, file parsing)")
    common.add_argument("--synthetic", action="store_true", help="Use a generated dataset instead of --data")
    common.add_argument("--subjects-per-class", type=int, help="Synthetic subjects per class")
    common.add_argument("--walks", type=int, help="Synthetic recordings per subject")
    common.add_argument("--duration", type=float, help="Synthetic recording length in seconds")
    common.add_argument("--separation", type=float, help="Synthetic class separation in [0, 1]")

    parser = argparse.ArgumentParser(prog="gaitlpr", description="Gait residual classification experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest-check", parents=[common], help="Parse a dataset directory and summarize it")
    sub.add_parser("fit-lp", parents=[common], help="Fit per-channel linear predictors on control recordings")
    leakage = sub.add_parser("leakage", parents=[common], help="Validation-strategy leakage study")
    leakage.add_argument("--repeats", type=int, help="Re-draw the holdout this many times")
    crossval = sub.add_parser("crossval", parents=[common], help="Subject-level k-fold cross-validation")
    crossval.add_argument("--variant", choices=VARIANTS, default="lpgnet")
    bench = sub.add_parser("bench", parents=[common], help="Single-thread inference timing")
    bench.add_argument("--bundle", required=True)
    bench.add_argument("--recording", help="Recording file to time (default: first of the data source)")
    predict = sub.add_parser("predict", parents=[common], help="Classify one recording")
    predict.add_argument("--bundle", required=True)
    predict.add_argument("--recording", required=True)
    sub.add_parser("synth", parents=[common], help="Write a synthetic dataset in the recording file format")
    return parser


def _overrides(args) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "data_dir": args.data,
        "seed": args.seed,
        "output_dir": args.out,
        "threads": args.threads,
        "repeats": getattr(args, "repeats", None),
    }
    synthetic_flags = {
        "n_subjects_per_class": args.subjects_per_class,
        "walks_per_subject": args.walks,
        "duration_s": args.duration,
        "class_separation": args.separation,
    }
    if args.synthetic or args.command == "synth" or any(v is not None for v in synthetic_flags.values()):
        spec = asdict(SyntheticSpec())
        if args.seed is not None:
            spec["seed"] = args.seed
        spec.update({k: v for k, v in synthetic_flags.items() if v is not None})
        overrides["synthetic"] = spec
    return overrides


def _experiment(args) -> str:
    if args.command == "crossval" and args.variant == "ablation":
        return "ablation"
    return args.command.replace("-", "_")


def run(args) -> Any:
    run_id = uuid.uuid4().hex[:12]
    set_run_context(run_id)
    cfg = load_experiment_config(_experiment(args), args.config, _overrides(args))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = attach_run_log(out / "run.log")
    try:
        logger.info(f"Run {run_id}: {args.command} (config {cfg.hash}, seed {cfg.seed}) -> {out}")
        runner = ExperimentRunner(cfg, run_id=run_id)
        if args.command == "ingest-check":
            return runner.ingest_check()
        if args.command == "fit-lp":
            return {"predictor": str(runner.fit_lp())}
        if args.command == "leakage":
            runner.run_leakage_experiment()
            return runner.report.result["mean_gap"]
        if args.command == "crossval":
            report = runner.run_crossval(args.variant)
            return {"mean": report.mean, "std": report.std}
        if args.command == "bench":
            return runner.run_bench(args.bundle, args.recording).to_dict(orient="records")
        if args.command == "predict":
            return runner.predict_one(args.bundle, args.recording)
        return {"data_dir": str(runner.synth())}
    finally:
        detach_handler(handler)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    sentry_enabled = init_sentry()
    try:
        result = run(args)
        print(json.dumps(result, indent=2, default=str))
        return EXIT_OK
    except GaitError as e:
        logger.error(f"{type(e).__name__}: {e}")
        if sentry_enabled:
            with sentry_sdk.push_scope() as scope:
                scope.set_tag("command", args.command)
                sentry_sdk.capture_exception(e)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}: {e}")
        if sentry_enabled:
            sentry_sdk.capture_exception(e)
        return EXIT_UNEXPECTED
    finally:
        clear_context()
