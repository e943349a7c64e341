"""
Experiment orchestration: dataset loading, the window-split leakage study,
subject-level cross-validation of the residual CNN and its variants,
single-thread benchmarking, single-recording prediction and LP fitting.
Every run leaves a `run_report.json` plus CSV artifacts in its output dir.
"""

import contextvars
import json
import platform
import time
import uuid
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from config import LIBRARY_VERSION, ExperimentConfig
from cv_splits import (
    Strategy,
    holdout_subjects,
    split_windows,
    stratified_kfold,
    validation_subjects,
    verify_no_subject_leakage,
    write_manifest,
)
from dsp import Preprocessing, make_windows, preprocess, stack_windows
from errors import ConfigError, DataError, NoControlRecordings, TrainingError
from gait_data import (
    CHANNEL_NAMES,
    Dataset,
    Label,
    Recording,
    SubjectId,
    SyntheticSpec,
    dataset_summary,
    parse_recording_file,
    scan_dataset_dir,
    synthesize_dataset,
    write_recording_file,
)
from linpred import fit_all_channels, mean_abs_residual_by_class, residual, residual_energy_ratios
from logger import logger, set_fold_context
from metrics import EvalResult, FoldReport, aggregate_folds, evaluate
from models import (
    SINGLE_PASS,
    WINDOW_MEAN,
    GaitClassifier,
    ModelSpec,
    count_params,
    load_bundle,
    make_bundle,
    parameter_report,
    pooled_features,
    save_bundle,
    save_predictor,
    spec_from_settings,
)
from nn import Network
from trainer import TrainResult, predict_batches, train_network

VARIANTS = ("lpgnet", "ablation", "baseline")


# 1. RUN REPORT
# ---------------------------------------------------
@dataclass
class RunReport:
    run_id: str
    experiment: str
    config: Dict[str, Any]
    config_hash: str
    seeds: Dict[str, Any] = field(default_factory=dict)
    library_version: str = LIBRARY_VERSION
    python_version: str = field(default_factory=platform.python_version)
    numpy_version: str = np.__version__
    stages: List[Dict[str, Any]] = field(default_factory=list)
    result: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def start(cls, cfg: ExperimentConfig, run_id: Optional[str] = None) -> "RunReport":
        return cls(run_id or uuid.uuid4().hex[:12], cfg.experiment, cfg.echo(), cfg.hash,
                   seeds={"master": cfg.seed})

    def add_stage(self, result: TrainResult, **tags):
        self.stages.append({**tags, **result.to_dict()})

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "run_report.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts["run_report"] = str(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, default=_json_default)
        return path


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (SubjectId, Path)):
        return str(value)
    raise TypeError(f"Not JSON serializable: {type(value).__name__}")


def derive_seeds(master: int, n: int) -> List[int]:
    """n independent child seeds of `master`, stable across runs and platforms."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master).spawn(n)]


# 2. DATA
# ---------------------------------------------------
def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_dir:
        ds = scan_dataset_dir(cfg.data_dir, max_workers=max(cfg.threads, 1))
    elif cfg.synthetic is not None:
        ds = synthesize_dataset(cfg.synthetic)
    else:
        raise ConfigError("No data source: pass --data DIR or --synthetic")
    summary = dataset_summary(ds)
    logger.info(f"Loaded {summary.n_recordings} recordings from {summary.n_subjects} subjects "
                f"({summary.subjects_per_class}) [{ds.provenance or cfg.data_dir}]")
    return ds


def _preprocess_all(ds: Dataset, variant: Preprocessing, zero_mean: bool) -> Dict[Tuple[SubjectId, int], Recording]:
    return {rec.key: preprocess(rec, variant, zero_mean=zero_mean) for rec in ds}


def _windows_for(recs: Sequence[Recording], window_len: int, stride: int) -> List:
    windows = []
    for rec in recs:
        windows += make_windows(rec, window_len, stride)
    return windows


def _targets(recs: Sequence[Recording]) -> np.ndarray:
    return np.array([rec.label.target for rec in recs], dtype=np.float32)


# 3. EXPERIMENT RUNNER
# ---------------------------------------------------
@dataclass
class FoldOutcome:
    fold: int
    seed: int
    result: EvalResult
    stages: List[TrainResult]
    probabilities: List[float]
    labels: List[int]
    recordings: List[str]
    lpr_by_class: Optional[Dict[str, float]] = None
    bundle_path: Optional[str] = None
    seconds: float = 0.0


class ExperimentRunner:
    """Runs one configured experiment and collects its report."""

    def __init__(self, cfg: ExperimentConfig, log_callback: Optional[Callable[[str], None]] = None,
                 run_id: Optional[str] = None):
        self.cfg = cfg
        self.log_callback = log_callback
        self.out_dir = Path(cfg.output_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.report = RunReport.start(cfg, run_id)

    def _log(self, message: str):
        logger.info(message)
        if self.log_callback:
            self.log_callback(message)

    def _finish(self, t0: float) -> RunReport:
        self.report.timings["total_seconds"] = round(time.perf_counter() - t0, 3)
        self.report.write(self.out_dir)
        return self.report

    # ---- leakage study -------------------------------------------------
    def run_leakage_experiment(self) -> pd.DataFrame:
        """Train the baseline CNN under each validation strategy and compare val vs test accuracy."""
        cfg = self.cfg
        t0 = time.perf_counter()
        ds = load_dataset(cfg)
        prepared = _preprocess_all(ds, Preprocessing.NORMALIZED_100HZ, cfg.zero_mean_normalization)
        spec = spec_from_settings("baseline", cfg.architecture)
        self._log(f"Baseline CNN: {count_params(spec)} parameters, minimum input {spec.min_input_length} samples")
        win_len, stride = cfg.windows["leakage_len"], cfg.windows["leakage_stride"]

        repeat_seeds = [cfg.seed] if cfg.repeats == 1 else derive_seeds(cfg.seed, cfg.repeats)
        self.report.seeds["repeats"] = repeat_seeds
        rows = []
        for r, seed in enumerate(repeat_seeds):
            train_subj, test_subj = holdout_subjects(ds, cfg.holdout_fraction, seed)
            self._log(f"Repeat {r}: holdout of {len(test_subj)} test subjects (seed {seed})")
            train_set = set(train_subj)
            train_windows = _windows_for([p for k, p in prepared.items() if k[0] in train_set], win_len, stride)
            test_windows = _windows_for([p for k, p in prepared.items() if k[0] not in train_set], win_len, stride)
            x_test, y_test = stack_windows(test_windows)

            for strategy, net_seed in zip(Strategy, derive_seeds(seed, len(Strategy))):
                plan = split_windows(train_windows, strategy, cfg.val_fraction, seed)
                manifest = write_manifest(plan, self.out_dir / "manifests" / f"leakage_r{r}_{strategy.value}.txt")
                self.report.artifacts[f"manifest_r{r}_{strategy.value}"] = str(manifest)
                leaked = verify_no_subject_leakage(plan).leaked_subjects
                tr, va = plan.select(train_windows)
                x_tr, y_tr = stack_windows(tr)
                x_va, y_va = stack_windows(va)

                net = Network(spec.layers, seed=net_seed)
                train_cfg = cfg.train("leakage", seed=net_seed)
                result = train_network(net, x_tr, y_tr, x_va, y_va, train_cfg, stage=f"leakage/{strategy.value}")
                self.report.add_stage(result, repeat=r, strategy=strategy.value)

                scores = {}
                for side, x, y in (("train", x_tr, y_tr), ("val", x_va, y_va), ("test", x_test, y_test)):
                    scores[side] = evaluate(predict_batches(net, x, train_cfg.batch_size), y)
                row = {
                    "repeat": r,
                    "seed": seed,
                    "strategy": strategy.value,
                    "train_windows": len(tr),
                    "val_windows": len(va),
                    "test_windows": len(test_windows),
                    "overlap_subjects": len(leaked),
                    **{f"{side}_accuracy": 100.0 * s.accuracy for side, s in scores.items()},
                    **{f"{side}_loss": s.loss for side, s in scores.items()},
                }
                row["accuracy_gap"] = row["val_accuracy"] - row["test_accuracy"]
                row["loss_gap"] = row["test_loss"] - row["val_loss"]
                rows.append(row)
                self._log(f"{strategy.value}: val {row['val_accuracy']:.1f}% test {row['test_accuracy']:.1f}% "
                          f"gap {row['accuracy_gap']:.1f} ({row['loss_gap']:.3f}), {len(leaked)} subjects on both sides")

        table = pd.DataFrame(rows)
        summary = table.groupby("strategy", sort=False)[["accuracy_gap", "loss_gap"]].mean()
        path = self.out_dir / "leakage_table.csv"
        table.to_csv(path, index=False)
        self.report.artifacts["leakage_table"] = str(path)
        self.report.result = {
            "rows": rows,
            "mean_gap": {s: float(v) for s, v in summary["accuracy_gap"].items()},
            "mean_loss_gap": {s: float(v) for s, v in summary["loss_gap"].items()},
        }
        self._finish(t0)
        return table

    # ---- cross-validation ---------------------------------------------
    def run_crossval(self, variant: str = "lpgnet") -> FoldReport:
        if variant not in VARIANTS:
            raise ConfigError(f"Unknown variant {variant}, expected one of {VARIANTS}")
        cfg = self.cfg
        t0 = time.perf_counter()
        ds = load_dataset(cfg)
        spec = spec_from_settings("baseline" if variant == "baseline" else "lpgnet", cfg.architecture)
        chain = Preprocessing.FILTERED_50HZ if variant == "lpgnet" else Preprocessing.NORMALIZED_100HZ
        prepared = _preprocess_all(ds, chain, cfg.zero_mean_normalization)

        plan = stratified_kfold(ds, cfg.folds, cfg.seed)
        manifest = write_manifest(plan, self.out_dir / "manifests" / f"folds_{variant}.txt")
        self.report.artifacts["fold_manifest"] = str(manifest)
        fold_seeds = derive_seeds(cfg.seed, cfg.folds)
        self.report.seeds["folds"] = fold_seeds
        self._log(f"{variant}: {cfg.folds}-fold subject-level CV, {count_params(spec)} CNN parameters, "
                  f"fold class counts {plan.stratification}")

        def job(fold: int) -> FoldOutcome:
            set_fold_context(fold)
            try:
                return self._run_fold(variant, spec, prepared, plan, fold, fold_seeds[fold])
            finally:
                set_fold_context(None)

        outcomes: List[FoldOutcome] = []
        with ThreadPoolExecutor(max_workers=max(cfg.threads, 1)) as executor:
            futures = {executor.submit(contextvars.copy_context().run, job, i): i for i in range(cfg.folds)}
            for future in as_completed(futures):
                outcomes.append(future.result())
        outcomes.sort(key=lambda o: o.fold)

        for o in outcomes:
            for stage in o.stages:
                self.report.add_stage(stage, fold=o.fold)
            if o.bundle_path:
                self.report.artifacts[f"bundle_fold{o.fold}"] = o.bundle_path
            self.report.timings[f"fold{o.fold}_seconds"] = round(o.seconds, 3)

        fold_report = aggregate_folds([o.result for o in outcomes], strategy=variant, seed=cfg.seed,
                                      config_hash=cfg.hash)
        path = fold_report.to_csv(self.out_dir / f"crossval_{variant}.csv")
        pred_path = self.out_dir / f"crossval_{variant}_predictions.csv"
        pd.DataFrame([
            {"fold": o.fold, "recording": name, "label": y, "probability": p}
            for o in outcomes for name, y, p in zip(o.recordings, o.labels, o.probabilities)
        ]).to_csv(pred_path, index=False)
        self.report.artifacts.update({"crossval_csv": str(path), "predictions_csv": str(pred_path)})
        self.report.result = {
            "variant": variant,
            "fold_report": fold_report.to_dict(),
            "lpr_by_class": {o.fold: o.lpr_by_class for o in outcomes if o.lpr_by_class},
            "parameters": count_params(spec),
        }
        m, s = fold_report.mean, fold_report.std
        self._log(f"{variant}: accuracy {m['accuracy']:.1f}±{s['accuracy']:.1f}  AUC {m['auc']:.1f}±{s['auc']:.1f}  "
                  f"F1 {m['f1']:.1f}±{s['f1']:.1f}")
        self._finish(t0)
        return fold_report

    def _run_fold(self, variant: str, spec: ModelSpec, prepared: Dict[Tuple[SubjectId, int], Recording],
                  plan, fold: int, seed: int) -> FoldOutcome:
        cfg = self.cfg
        t0 = time.perf_counter()
        train_subj, test_subj = plan.train_test(fold)
        fit_subj, val_subj = validation_subjects(train_subj, cfg.val_fraction, seed)
        fit_set, val_set, test_set = set(fit_subj), set(val_subj), set(test_subj)
        fit_recs = [r for k, r in sorted(prepared.items()) if k[0] in fit_set]
        val_recs = [r for k, r in sorted(prepared.items()) if k[0] in val_set]
        test_recs = [r for k, r in sorted(prepared.items()) if k[0] in test_set]

        predictor = None
        lpr_by_class = None
        provenance = {"train": fit_subj, "validation": val_subj}
        if variant == "lpgnet":
            controls = [r for r in fit_recs if r.label is Label.CONTROL]
            provenance["lp_fit"] = [r.subject for r in controls]
            if not controls:
                raise NoControlRecordings(f"Fold {fold} has no control recordings to fit the predictor")
        leakage = verify_no_subject_leakage(plan, provenance, fold=fold)
        if not leakage.clean:
            raise TrainingError(f"Fold {fold} would train on test subjects: {sorted(map(str, leakage.leaked_subjects))}")

        if variant == "lpgnet":
            predictor = fit_all_channels(controls, cfg.lp_order)
            fit_recs = [residual(predictor, r) for r in fit_recs]
            val_recs = [residual(predictor, r) for r in val_recs]
            test_recs = [residual(predictor, r) for r in test_recs]
            lpr_by_class = mean_abs_residual_by_class(fit_recs)
            logger.info(f"Fold {fold}: mean |LPR| by class {lpr_by_class}")

        key = {"lpgnet": "lpgnet", "ablation": "ablation", "baseline": "leakage"}[variant]
        win_len, stride = cfg.windows[f"{key}_len"], cfg.windows[f"{key}_stride"]
        x_tr, y_tr = stack_windows(_windows_for(fit_recs, win_len, stride))
        x_va, y_va = stack_windows(_windows_for(val_recs, win_len, stride))

        net = Network(spec.layers, seed=seed)
        stages = []
        stage1 = "baseline" if variant == "baseline" else "stage1"
        stages.append(train_network(net, x_tr, y_tr, x_va, y_va, cfg.train(stage1, seed=seed),
                                    stage=f"{variant}/{stage1}", fold=fold))

        if variant == "baseline":
            bundle = make_bundle(Preprocessing.NORMALIZED_100HZ, spec, net, config_hash=cfg.hash,
                                 aggregation=WINDOW_MEAN, window_len=win_len, stride=stride,
                                 zero_mean=cfg.zero_mean_normalization)
        else:
            stages.append(self._retrain_head(net, spec, fit_recs, val_recs, seed, variant, fold))
            bundle = make_bundle(Preprocessing.FILTERED_50HZ if predictor is not None else Preprocessing.NORMALIZED_100HZ,
                                 spec, net, predictor, config_hash=cfg.hash, aggregation=SINGLE_PASS,
                                 zero_mean=cfg.zero_mean_normalization)

        classifier = GaitClassifier(bundle)
        probs = [classifier.predict_prepared(rec)[0] for rec in test_recs]
        labels = [rec.label.target for rec in test_recs]
        result = evaluate(probs, labels)
        bundle_path = save_bundle(bundle, self.out_dir / "bundles" / f"{variant}_fold{fold}.bundle")
        logger.info(f"Fold {fold}: {len(test_recs)} test recordings, accuracy {100 * result.accuracy:.1f}%, "
                    f"AUC {100 * result.auc:.1f}, F1 {100 * result.f1:.1f} | {parameter_report(bundle)}")
        return FoldOutcome(fold, seed, result, stages, probs, labels, [r.key_str for r in test_recs],
                           lpr_by_class, str(bundle_path), time.perf_counter() - t0)

    def _retrain_head(self, net: Network, spec: ModelSpec, fit_recs: List[Recording], val_recs: List[Recording],
                      seed: int, variant: str, fold: int) -> TrainResult:
        """Freeze the backbone and refit the dense head on full-length recordings."""
        head = spec.head_start
        before = {k: v for k, v in net.state_dict().items() if int(k.split(".")[0]) < head}
        net.freeze(head)
        f_tr = pooled_features(net, spec, [r.channels for r in fit_recs])
        f_va = pooled_features(net, spec, [r.channels for r in val_recs]) if val_recs else None
        result = train_network(net, f_tr, _targets(fit_recs), f_va, _targets(val_recs) if val_recs else None,
                               self.cfg.train("stage2", seed=seed), stage=f"{variant}/stage2", fold=fold, start=head)
        after = net.state_dict()
        for name, value in before.items():
            if value.tobytes() != after[name].tobytes():
                raise TrainingError(f"Backbone weight {name} changed during head retraining")
        return result

    # ---- benchmark ------------------------------------------------------
    def run_bench(self, bundle_path, recording_path=None) -> pd.DataFrame:
        """Single-thread timing of preprocessing+LPR and the CNN pass over one recording."""
        cfg = self.cfg
        t0 = time.perf_counter()
        classifier = GaitClassifier(load_bundle(bundle_path))
        rec = self._bench_recording(recording_path)
        runs, warmup = cfg.bench["runs"], cfg.bench["warmup"]
        self._log(f"Benchmarking {rec.key_str} ({rec.length} samples): {warmup} warm-up + {runs} timed runs")

        prepare_ms = np.empty(runs)
        forward_ms = np.empty(runs)
        floor_ms = np.empty(runs)
        with threadpool_limits(limits=1):
            for _ in range(warmup):
                classifier.predict_prepared(classifier.prepare(rec))
            for i in range(runs):
                a = time.perf_counter()
                prepared = classifier.prepare(rec)
                b = time.perf_counter()
                classifier.predict_prepared(prepared)
                c = time.perf_counter()
                d = time.perf_counter()
                prepare_ms[i], forward_ms[i], floor_ms[i] = (b - a) * 1e3, (c - b) * 1e3, (d - c) * 1e3

        total_ms = prepare_ms + forward_ms
        rows = []
        for name, values in (("total", total_ms), ("lpr", prepare_ms), ("cnn", forward_ms), ("overhead", floor_ms)):
            rows.append({"component": name, "mean_ms": float(values.mean()), "std_ms": float(values.std()),
                         "min_ms": float(values.min()), "max_ms": float(values.max()), "runs": runs})
        table = pd.DataFrame(rows)
        path = self.out_dir / "bench.csv"
        table.to_csv(path, index=False)
        self.report.artifacts["bench_csv"] = str(path)
        self.report.result = {"bench": rows, "parameters": parameter_report(classifier.bundle)}
        stability = total_ms.std() / total_ms.mean() if total_ms.mean() > 0 else 0.0
        self._log(f"Inference {total_ms.mean():.2f} ms (LPR {prepare_ms.mean():.2f} + CNN {forward_ms.mean():.2f}), "
                  f"std/mean {stability:.2f}, timer floor {floor_ms.mean() * 1e3:.2f} us")
        self._finish(t0)
        return table

    def _bench_recording(self, recording_path) -> Recording:
        if recording_path is not None:
            return read_recording(recording_path)
        if self.cfg.data_dir:
            return next(iter(load_dataset(self.cfg)))
        spec = SyntheticSpec(n_subjects_per_class=1, walks_per_subject=1, seed=self.cfg.seed)
        return synthesize_dataset(spec).recordings[0]

    # ---- single prediction ---------------------------------------------
    def predict_one(self, bundle_path, recording_path) -> Dict[str, Any]:
        t0 = time.perf_counter()
        classifier = GaitClassifier(load_bundle(bundle_path))
        rec = read_recording(recording_path)
        prepared = classifier.prepare(rec)
        probability, window_probs = classifier.predict_prepared(prepared)
        diagnosis = Label.PD if probability >= 0.5 else Label.CONTROL
        summary = {
            "recording": rec.key_str,
            "probability": probability,
            "diagnosis": diagnosis.value,
            "windows": len(window_probs),
        }
        if classifier.bundle.predictor is not None:
            settings = self.cfg.predict
            trace, regions = residual_regions(prepared, settings["rms_window"], settings["top_k"])
            trace_path = self.out_dir / "residual_trace.csv"
            regions_path = self.out_dir / "residual_regions.csv"
            trace.to_csv(trace_path, index=False)
            regions.to_csv(regions_path, index=False)
            self.report.artifacts.update({"residual_trace": str(trace_path), "residual_regions": str(regions_path)})
            summary["lpr_channel_mean_abs"] = dict(zip(CHANNEL_NAMES, np.mean(np.abs(prepared.channels), axis=1).tolist()))
        else:
            logger.info("Bundle has no linear predictor; residual trace skipped")
        self.report.result = {**summary, "window_probs": window_probs}
        self._log(f"{rec.key_str}: P(PD) = {probability:.4f} -> {diagnosis.value}")
        self._finish(t0)
        return summary

    # ---- LP fitting -----------------------------------------------------
    def fit_lp(self) -> Path:
        cfg = self.cfg
        t0 = time.perf_counter()
        ds = load_dataset(cfg)
        controls = [r for r in ds if r.label is Label.CONTROL]
        if cfg.fit_lp_subjects:
            wanted = set(cfg.fit_lp_subjects)
            unknown = wanted - {str(s) for s in ds.subjects}
            if unknown:
                raise ConfigError(f"fit_lp_subjects not in the dataset: {sorted(unknown)}")
            controls = [r for r in controls if str(r.subject) in wanted]
        if not controls:
            raise NoControlRecordings()
        zero_mean = cfg.zero_mean_normalization
        prepared = [preprocess(r, Preprocessing.FILTERED_50HZ, zero_mean) for r in controls]
        predictor = fit_all_channels(prepared, cfg.lp_order, max_workers=cfg.threads)
        ratios = residual_energy_ratios(predictor, prepared)
        for name, ratio in zip(CHANNEL_NAMES, ratios):
            logger.info(f"Residual energy ratio {name}: {ratio:.4f}")
        everything = [residual(predictor, preprocess(r, Preprocessing.FILTERED_50HZ, zero_mean)) for r in ds]
        by_class = mean_abs_residual_by_class(everything)
        self._log(f"Fitted {predictor.total_coefficients} LP coefficients (order {predictor.order_p}) "
                  f"on {len(controls)} control recordings; mean |LPR| by class {by_class}")
        path = save_predictor(predictor, self.out_dir / "lp_predictor.bundle", cfg.hash, zero_mean)
        self.report.artifacts["predictor"] = str(path)
        self.report.result = {
            "coefficients": predictor.total_coefficients,
            "fit_recordings": [r.key_str for r in controls],
            "energy_ratios": dict(zip(CHANNEL_NAMES, ratios.tolist())),
            "lpr_by_class": by_class,
        }
        self._finish(t0)
        return path

    # ---- dataset utilities ---------------------------------------------
    def ingest_check(self) -> Dict[str, Any]:
        t0 = time.perf_counter()
        summary = asdict(dataset_summary(load_dataset(self.cfg)))
        self.report.result = summary
        self._log(f"Dataset OK: {summary}")
        self._finish(t0)
        return summary

    def synth(self) -> Path:
        t0 = time.perf_counter()
        spec = self.cfg.synthetic or SyntheticSpec(seed=self.cfg.seed)
        ds = synthesize_dataset(spec)
        target = self.out_dir / "data"
        target.mkdir(parents=True, exist_ok=True)
        for rec in ds:
            write_recording_file(rec, target)
        self.report.artifacts["data_dir"] = str(target)
        self.report.result = {"synthetic": asdict(spec), "recordings": len(ds)}
        self._log(f"Wrote {len(ds)} synthetic recordings to {target}")
        self._finish(t0)
        return target


# 4. HELPERS
# ---------------------------------------------------
def read_recording(path) -> Recording:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Recording file not found: {path}")
    return parse_recording_file(path.name, path.read_text(encoding="utf-8"))


def residual_regions(lpr: Recording, rms_window: int, top_k: int) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Per-sample residual trace with its rolling RMS, and the `top_k` highest-RMS
    regions of every channel (non-overlapping, `rms_window` samples wide).
    """
    rate = lpr.sample_rate_hz
    values = pd.DataFrame(lpr.channels.T, columns=list(CHANNEL_NAMES))
    rms = values.pow(2).rolling(rms_window, center=True, min_periods=1).mean().pow(0.5)
    trace = pd.concat([values.add_prefix("lpr_"), rms.add_prefix("rms_")], axis=1)
    trace.insert(0, "time_s", np.arange(lpr.length) / rate)
    trace.insert(0, "sample", np.arange(lpr.length))

    half = rms_window // 2
    rows = []
    for name in CHANNEL_NAMES:
        series = rms[name].to_numpy()
        picked: List[int] = []
        for idx in np.argsort(-series, kind="stable"):
            if all(abs(int(idx) - p) >= rms_window for p in picked):
                picked.append(int(idx))
                if len(picked) == top_k:
                    break
        for rank, idx in enumerate(picked, start=1):
            start, end = max(idx - half, 0), min(idx + half, lpr.length - 1)
            rows.append({"channel": name, "rank": rank, "start_sample": start, "end_sample": end,
                         "start_s": start / rate, "end_s": end / rate, "peak_rms": float(series[idx])})
    regions = pd.DataFrame(rows, columns=["channel", "rank", "start_sample", "end_sample", "start_s", "end_s", "peak_rms"])
    return trace, regions
