# services/experiments.py
"""
Batch commands behind the CLI: generate datasets, run configured experiments
(one EM run per repetition), evaluate a run against ground truth, and compare
experiments that share a model and a dataset.

Every output directory gets a config.resolved.yaml so a result can always be
traced back to the exact settings that produced it.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import shutil
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
import yaml
from pydantic import BaseModel, ValidationError

from config import settings
from errors import ConfigError, NumericalError
from jobs import RunManager
from models import (
    ComparisonEntry,
    ComparisonReport,
    EvaluationReport,
    ExperimentConfig,
    ExperimentSummary,
    GenerateConfig,
    ParamsRecord,
    RunSummary,
)
from services.em_engine import (
    PARAMS_FILE,
    SELECTIONS_FILE,
    STATE_FILE,
    TRACE_FILE,
    EMEngine,
    GroundTruth,
    align_latents,
    evaluate_recovery,
    label_accuracy,
    read_trace,
)
from services.gmm import hard_labels
from services.params import GMMParams, ModelParams, kind_of, params_from_record
from services.selection import read_selections, selection_hit_rate
from services.synthdata import Dataset, generate, load_dataset, to_engine_truth, write_dataset

log = logging.getLogger("experiments")

RESOLVED_CONFIG_FILE = "config.resolved.yaml"
SUMMARY_FILE = "summary.json"
REPORT_FILE = "report.json"
COMPARISON_CSV = "comparison.csv"
COMPARISON_JSON = "comparison.json"
DATASET_SUBDIR = "dataset"

GMM_SUCCESS_ACCURACY = 0.95
PHASES = ("t_affinity", "t_selection", "t_estep", "t_mstep", "t_hyperopt", "t_total")

M = TypeVar("M", bound=BaseModel)

# ----------------------------
# Config loading
# ----------------------------

def load_yaml(path: Path) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return raw

def apply_overrides(raw: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply `dotted.key=value` overrides to a copy of `raw`; values are parsed as YAML scalars."""
    out = copy.deepcopy(raw)
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form dotted.key=value")
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: '{part}' is not a section")
            node = child
        try:
            node[parts[-1]] = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {key!r}: cannot parse value {value!r}") from exc
    return out

def validate_config(model: Type[M], raw: Dict[str, Any]) -> M:
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"invalid config field '{field}': {err['msg']}") from exc

def load_config(model: Type[M], path: Path, overrides: Sequence[str] = ()) -> M:
    return validate_config(model, apply_overrides(load_yaml(path), overrides))

def write_resolved(out_dir: Path, config: BaseModel) -> Path:
    path = Path(out_dir) / RESOLVED_CONFIG_FILE
    path.write_text(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False), encoding="utf-8")
    return path

# ----------------------------
# Helpers
# ----------------------------

def _prepare_output(out_dir: Path, *, force: bool, resume: bool = False) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not (force or resume):
        raise ConfigError(f"output directory {out_dir} is not empty; pass --force to overwrite")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc.strerror or exc}") from exc
    return out_dir

def _default_dir(output: Optional[Path], configured: Optional[str], *fallback: str) -> Path:
    if output is not None:
        return Path(output)
    if configured:
        return Path(configured)
    return Path(settings.OUTPUT_ROOT, *fallback)

def dataset_fingerprint(Y: np.ndarray) -> str:
    data = np.ascontiguousarray(np.asarray(Y, dtype=np.float64))
    return "sha256:" + hashlib.sha256(data.tobytes()).hexdigest()[:16]

def _write_json(path: Path, model: BaseModel) -> None:
    Path(path).write_text(model.model_dump_json(indent=2), encoding="utf-8")

def _finite_or_none(value: Optional[float]) -> Optional[float]:
    return value if value is not None and math.isfinite(value) else None

# ----------------------------
# generate
# ----------------------------

def cmd_generate(config: GenerateConfig, *, output: Optional[Path] = None, force: bool = False) -> Path:
    spec = config.generator
    out_dir = _default_dir(output, config.output_dir, "datasets", f"{spec.kind}-{spec.seed}")
    _prepare_output(out_dir, force=force)
    Y, truth = generate(spec)
    write_dataset(out_dir, spec, Y, truth)
    write_resolved(out_dir, config)
    log.info("Dataset generated", extra={"path": str(out_dir), "kind": spec.kind, "seed": spec.seed})
    return out_dir

# ----------------------------
# run
# ----------------------------

def resolve_dataset(config: ExperimentConfig, out_dir: Path) -> Tuple[Dataset, Path]:
    """Load the configured dataset, or generate it into <out_dir>/dataset."""
    if config.dataset.path is not None:
        path = Path(config.dataset.path)
        return load_dataset(path), path
    spec = config.dataset.generator
    Y, truth = generate(spec)
    data_dir = out_dir / DATASET_SUBDIR
    manifest = write_dataset(data_dir, spec, Y, truth)
    return Dataset(Y=Y, manifest=manifest, ground_truth=to_engine_truth(truth)), data_dir

def check_compatible(config: ExperimentConfig, dataset: Dataset) -> None:
    """Reject dataset/config combinations before any compute."""
    em = config.em
    Y = dataset.Y
    n, d = Y.shape
    if n < em.n_latents:
        raise ConfigError(f"dataset has {n} points, fewer than n_latents={em.n_latents}")
    if dataset.manifest is not None and dataset.manifest.n_dims != d:
        raise ConfigError(f"manifest says D={dataset.manifest.n_dims}, data.csv has {d} columns")
    truth = dataset.ground_truth
    truth_params = truth.params if truth is not None else None
    if truth_params is not None:
        truth_is_gmm = isinstance(truth_params, GMMParams)
        if truth_is_gmm != (em.model_kind == "gmm"):
            raise ConfigError(f"dataset ground truth is {kind_of(truth_params)}, config model_kind is {em.model_kind}")
        truth_d = truth_params.means.shape[1] if truth_is_gmm else truth_params.W.shape[0]
        if truth_d != d:
            raise ConfigError(f"ground truth has D={truth_d}, data has D={d}")
    if config.init == "ground_truth":
        if truth_params is None:
            raise ConfigError("init 'ground_truth' needs a dataset with ground_truth.json")
        if kind_of(truth_params) != em.model_kind or truth_params.n_latents != em.n_latents:
            raise ConfigError(
                f"init 'ground_truth' needs {em.model_kind} ground truth with H={em.n_latents}, dataset has "
                f"{kind_of(truth_params)} with H={truth_params.n_latents}"
            )

def score_run(params: ModelParams, truth: Optional[GroundTruth], Y: np.ndarray) -> Tuple[Optional[bool], Optional[float]]:
    """(success, score): dictionary recovery with mean best cosine, or label accuracy for the mixture."""
    if truth is None or truth.params is None:
        return None, None
    if isinstance(params, GMMParams):
        if truth.labels is None:
            return None, None
        acc = label_accuracy(hard_labels(params, Y), truth.labels)
        return acc >= GMM_SUCCESS_ACCURACY, acc
    if isinstance(truth.params, GMMParams) or params.n_latents < truth.params.n_latents:
        return None, None
    report = evaluate_recovery(params.W, truth.params.W)
    return report.success, float(np.mean(report.best_cosines))

def run_repetition(
    config: ExperimentConfig,
    rep: int,
    Y: np.ndarray,
    truth: Optional[GroundTruth],
    out_dir: Path,
    resume: bool = False,
    progress: Optional[Callable[[str], None]] = None,
) -> RunSummary:
    seed = config.em.seed + rep
    em = config.em.model_copy(update={"seed": seed})
    name = f"rep-{rep:02d}"
    run_dir = Path(out_dir) / name
    engine = EMEngine(em, Y, ground_truth=truth, run_dir=run_dir)

    if resume and (run_dir / STATE_FILE).exists():
        state = engine.resume_state()
    else:
        if run_dir.exists():
            shutil.rmtree(run_dir)
        if config.init == "ground_truth" and truth is not None:
            state = engine.initial_state(truth.params, warm_targets=True)
        else:
            state = engine.initial_state()

    try:
        result = engine.run(state, progress=progress)
    except NumericalError as exc:
        trace = exc.trace or []
        return RunSummary(
            repetition=rep,
            seed=seed,
            run_dir=name,
            iterations=len(trace),
            final_free_energy=_finite_or_none(trace[-1]["free_energy"]) if trace else None,
            error=exc.detail,
        )

    success, score = score_run(result.params, truth, Y)
    return RunSummary(
        repetition=rep,
        seed=seed,
        run_dir=name,
        iterations=len(result.trace),
        final_free_energy=_finite_or_none(result.final_free_energy),
        success=success,
        score=score,
        kernel_dominance=result.kernel_dominance["dominant"] if result.kernel_dominance else None,
        elapsed_s=result.elapsed_s,
    )

def cmd_run(
    config: ExperimentConfig,
    *,
    output: Optional[Path] = None,
    force: bool = False,
    resume: bool = False,
    jobs: Optional[int] = None,
) -> ExperimentSummary:
    out_dir = _prepare_output(_default_dir(output, config.output_dir, config.name), force=force, resume=resume)
    dataset, data_dir = resolve_dataset(config, out_dir)
    check_compatible(config, dataset)
    write_resolved(out_dir, config)

    manager = RunManager(jobs or settings.DEFAULT_JOBS)
    for rep in range(config.repetitions):
        manager.submit(
            run_repetition,
            label=f"{config.name}-rep{rep:02d}",
            args=(config, rep, dataset.Y, dataset.ground_truth, out_dir, resume),
        )
    finished = manager.wait()
    failures = [job.error for job in finished if job.error is not None]
    if failures:
        raise failures[0]

    runs = sorted((job.result for job in finished), key=lambda r: r.repetition)
    summary = ExperimentSummary(
        name=config.name,
        model_kind=config.em.model_kind,
        selection_mode=config.em.selection_mode,
        dataset=dataset_fingerprint(dataset.Y),
        dataset_dir=str(data_dir),
        runs=runs,
        success_count=sum(1 for r in runs if r.success),
    )
    _write_json(out_dir / SUMMARY_FILE, summary)
    log.info("Experiment finished", extra={
        "experiment": config.name,
        "repetitions": len(runs),
        "success_count": summary.success_count,
        "path": str(out_dir),
    })

    failed = [r for r in runs if r.error]
    if failed:
        raise NumericalError(
            f"{len(failed)} of {len(runs)} repetitions failed; first: {failed[0].run_dir}: {failed[0].error}",
            context={"path": str(out_dir)},
        )
    return summary

# ----------------------------
# evaluate
# ----------------------------

def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"required file not found: {path}")
    return path

def cmd_evaluate(run_dir: Path, dataset_dir: Path, *, output: Optional[Path] = None) -> EvaluationReport:
    run_dir = Path(run_dir)
    record = ParamsRecord.model_validate_json(_require(run_dir / PARAMS_FILE).read_text(encoding="utf-8"))
    params = params_from_record(record)
    trace = read_trace(_require(run_dir / TRACE_FILE))
    dataset = load_dataset(Path(dataset_dir))

    Y = dataset.Y
    d = params.means.shape[1] if isinstance(params, GMMParams) else params.W.shape[0]
    if d != Y.shape[1]:
        raise ConfigError(f"run parameters have D={d}, dataset has D={Y.shape[1]}")

    truth = dataset.ground_truth
    recovery = None
    accuracy = None
    hit_rates: List[float] = []
    if truth is not None and truth.params is not None:
        if isinstance(params, GMMParams) != isinstance(truth.params, GMMParams):
            raise ConfigError(f"run is {kind_of(params)}, dataset ground truth is {kind_of(truth.params)}")
        if isinstance(params, GMMParams):
            accuracy = label_accuracy(hard_labels(params, Y), truth.labels)
        else:
            recovery = evaluate_recovery(params.W, truth.params.W)

        selections_path = run_dir / SELECTIONS_FILE
        if selections_path.exists() and truth.states is not None:
            alignment = align_latents(params, truth.params)
            with open(selections_path, "r", encoding="utf-8", newline="") as f:
                by_iteration = read_selections(f)
            hit_rates = [selection_hit_rate(by_iteration[t], truth.states, alignment) for t in sorted(by_iteration)]

    report = EvaluationReport(
        run_dir=str(run_dir),
        dataset_dir=str(dataset_dir),
        recovery=recovery,
        label_accuracy=accuracy,
        hit_rate_per_iteration=hit_rates,
        final_free_energy=_finite_or_none(trace[-1]["free_energy"]) if trace else None,
    )
    _write_json(Path(output) if output is not None else run_dir / REPORT_FILE, report)
    log.info("Run evaluated", extra={
        "path": str(run_dir),
        "success": recovery.success if recovery is not None else None,
        "label_accuracy": accuracy,
    })
    return report

# ----------------------------
# compare
# ----------------------------

def load_summary(experiment_dir: Path) -> ExperimentSummary:
    path = _require(Path(experiment_dir) / SUMMARY_FILE)
    return ExperimentSummary.model_validate_json(path.read_text(encoding="utf-8"))

def _mean_curve(traces: List[List[Dict[str, Any]]]) -> Tuple[List[int], List[Optional[float]]]:
    by_iteration: Dict[int, List[float]] = {}
    for trace in traces:
        for rec in trace:
            fe = rec.get("free_energy")
            if fe is not None and math.isfinite(fe):
                by_iteration.setdefault(rec["iteration"], []).append(fe)
    if not traces:
        return [], []
    last = max((rec["iteration"] for trace in traces for rec in trace), default=0)
    iterations = list(range(1, last + 1))
    return iterations, [float(np.mean(by_iteration[t])) if t in by_iteration else None for t in iterations]

def _max_abs_difference(curve: List[Optional[float]], reference: List[Optional[float]]) -> float:
    diffs = [abs(a - b) for a, b in zip(curve, reference) if a is not None and b is not None]
    return max(diffs, default=0.0)

def cmd_compare(experiment_dirs: Sequence[Path], *, output: Path, force: bool = False) -> ComparisonReport:
    """Align free-energy curves, success counts and phase timings of experiments on one model and dataset."""
    if not experiment_dirs:
        raise ConfigError("compare needs at least one experiment directory")
    dirs = [Path(p) for p in experiment_dirs]
    summaries = [load_summary(p) for p in dirs]
    first = summaries[0]
    for path, summary in zip(dirs[1:], summaries[1:]):
        if summary.model_kind != first.model_kind:
            raise ConfigError(f"{path} ran {summary.model_kind}, {dirs[0]} ran {first.model_kind}")
        if summary.dataset != first.dataset:
            raise ConfigError(f"{path} used dataset {summary.dataset}, {dirs[0]} used {first.dataset}")

    out_dir = _prepare_output(Path(output), force=force)
    traces = [
        {run.repetition: read_trace(_require(path / run.run_dir / TRACE_FILE)) for run in summary.runs if not run.error}
        for path, summary in zip(dirs, summaries)
    ]

    entries: List[ComparisonEntry] = []
    reference_curve: List[Optional[float]] = []
    for i, (path, summary, by_rep) in enumerate(zip(dirs, summaries, traces)):
        iterations, curve = _mean_curve(list(by_rep.values()))
        if i == 0:
            reference_curve = curve
        phase_seconds = {
            phase: float(np.mean([sum(rec[phase] or 0.0 for rec in trace) for trace in by_rep.values()]))
            if by_rep else 0.0
            for phase in PHASES
        }
        finals = [r.final_free_energy for r in summary.runs if r.final_free_energy is not None]
        entries.append(ComparisonEntry(
            name=summary.name,
            source=str(path),
            selection_mode=summary.selection_mode,
            n_runs=len(summary.runs),
            success_count=summary.success_count,
            iterations=iterations,
            mean_free_energy=curve,
            final_free_energy=float(np.mean(finals)) if finals else None,
            phase_seconds=phase_seconds,
            max_abs_difference=_max_abs_difference(curve, reference_curve),
        ))

    report = ComparisonReport(model_kind=first.model_kind, dataset=first.dataset, reference=str(dirs[0]), entries=entries)
    _write_json(out_dir / COMPARISON_JSON, report)

    reference = traces[0]
    with open(out_dir / COMPARISON_CSV, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("experiment", "name", "selection_mode", "repetition", "iteration",
                         "free_energy", "free_energy_diff", "hit_rate") + PHASES)
        for i, (summary, by_rep) in enumerate(zip(summaries, traces)):
            for rep, trace in sorted(by_rep.items()):
                ref_by_iteration = {rec["iteration"]: rec["free_energy"] for rec in reference.get(rep, [])}
                for rec in trace:
                    ref = ref_by_iteration.get(rec["iteration"])
                    diff = rec["free_energy"] - ref if ref is not None and rec["free_energy"] is not None else ""
                    writer.writerow((i, summary.name, summary.selection_mode, rep, rec["iteration"],
                                     rec["free_energy"], diff, rec.get("hit_rate"))
                                    + tuple(rec.get(p) for p in PHASES))
    log.info("Comparison written", extra={"path": str(out_dir), "experiments": len(entries)})
    return report
