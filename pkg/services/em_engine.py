# services/em_engine.py
"""
Truncated EM with affinity-based latent preselection.

Each iteration t (1-based) runs

    affinity -> selection -> truncated E-step -> M-step -> store <s> as the next GP targets

and, in GP-select mode, re-optimizes the kernel hyperparameters after the M-step whenever
t % hyper_update_every == 0. All randomness of iteration t is derived from (seed, purpose, t),
so a run resumed from a checkpoint continues exactly as an uninterrupted one.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from errors import InvalidArgumentError, NumericalError
from models import EMConfig, KernelHyperparams, RecoveryReport
from services.bsc import PI_BOUNDS, SIGMA2_FLOOR
from services.gp_regression import (
    GPFit,
    diagnostics,
    fit,
    fit_lowrank,
    optimize_hyperparams,
    with_targets,
)
from services.kernels import incomplete_cholesky, kernel_dominance
from services.latent_models import get_model
from services.nlss import GibbsChain
from services.params import (
    BSCParams,
    GMMParams,
    ModelParams,
    NLSSParams,
    SSParams,
    kind_of,
    params_from_arrays,
    params_to_arrays,
    params_to_record,
)
from services.selection import (
    StateSet,
    build_state_sets,
    cosine_affinity,
    full_selection,
    gp_affinity,
    select_indices,
    selection_hit_rate,
    singleton_affinity,
    write_selections,
)

log = logging.getLogger("em")

TRACE_COLUMNS = (
    "iteration",
    "free_energy",
    "free_energy_stderr",
    *KernelHyperparams.NAMES,
    "gp_evidence",
    "gp_loo_mae",
    "gp_rank",
    "hyperopt_evidence",
    "t_affinity",
    "t_selection",
    "t_estep",
    "t_mstep",
    "t_hyperopt",
    "t_total",
    "hit_rate",
    "gibbs_acceptance",
    "gibbs_scale_mean",
    "sigma2",
    "pi",
    "warnings",
    "targets_in_checksum",
    "targets_out_checksum",
)
_TEXT_COLUMNS = {"targets_in_checksum", "targets_out_checksum"}
_INT_COLUMNS = {"iteration", "warnings"}

# Stream tags for derived generators; selection rows use tag 1 inside services.selection.
_PURPOSES = {"init": 0, "selection": 1, "estep": 2, "mstep": 3, "targets": 4}

TRACE_FILE = "trace.csv"
PARAMS_FILE = "params.json"
STATE_FILE = "state.npz"
SELECTIONS_FILE = "selections.csv"

# ----------------------------
# Domain objects
# ----------------------------

@dataclass
class GroundTruth:
    """Known generating parameters; states are N x H_true (one-hot labels for the mixture)."""
    params: Optional[ModelParams] = None
    states: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

@dataclass
class EMState:
    iteration: int                       # completed iterations
    params: ModelParams
    hp: KernelHyperparams
    targets: Optional[np.ndarray] = None
    chain: Optional[GibbsChain] = None
    trace: List[Dict[str, Any]] = field(default_factory=list)

@dataclass
class EMResult:
    params: ModelParams
    trace: List[Dict[str, Any]]
    hp: KernelHyperparams
    targets: Optional[np.ndarray]
    last_selection: Optional[np.ndarray]
    kernel_dominance: Optional[Dict[str, float]]
    elapsed_s: float

    @property
    def final_free_energy(self) -> Optional[float]:
        return self.trace[-1]["free_energy"] if self.trace else None

# ----------------------------
# Helpers
# ----------------------------

def derived_rng(seed: int, purpose: str, iteration: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _PURPOSES[purpose], iteration]))

def targets_checksum(T: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(T, dtype=float).tobytes()).hexdigest()[:16]

def _as_data(Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 1:
        raise InvalidArgumentError(f"data must be an N x D matrix, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise InvalidArgumentError("data contains non-finite entries")
    return Y

def standardize(Y: np.ndarray) -> np.ndarray:
    std = Y.std(axis=0)
    return (Y - Y.mean(axis=0)) / np.where(std > 0, std, 1.0)

def _check_finite(params: ModelParams, iteration: int) -> None:
    for name, value in params_to_arrays(params).items():
        if not np.all(np.isfinite(value)):
            raise NumericalError("non-finite parameters after the M-step",
                                 context={"iteration": iteration, "field": name})

# ----------------------------
# Initialization
# ----------------------------

def init_params(model_kind: str, Y: np.ndarray, rng: np.random.Generator, n_latents: int) -> ModelParams:
    """Data-driven starting point: latents (or cluster means) at distinct random data points."""
    Y = _as_data(Y)
    n, d = Y.shape
    if n < n_latents:
        raise InvalidArgumentError(f"need at least H={n_latents} data points, got {n}")
    global_var = max(float(Y.var()), SIGMA2_FLOOR)
    idx = rng.choice(n, size=n_latents, replace=False)
    if model_kind == "gmm":
        return GMMParams(
            means=Y[idx].copy(),
            variances=np.full(n_latents, global_var),
            weights=np.full(n_latents, 1.0 / n_latents),
        )
    W = Y[idx].T + 0.01 * float(Y.std()) * rng.standard_normal((d, n_latents))
    pi = float(np.clip(1.0 / n_latents, *PI_BOUNDS))
    if model_kind == "bsc":
        return BSCParams(W=W, sigma2=global_var, pi=pi)
    positive = Y[Y > 0]
    mu = np.full(n_latents, float(positive.mean()) if positive.size else 1.0)
    cls = NLSSParams if model_kind == "nlss" else SSParams
    return cls(W=W, sigma2=global_var, pi=pi, mu=mu, psi=np.ones(n_latents))

# ----------------------------
# Recovery scoring
# ----------------------------

def cosine_matrix(W_learned: np.ndarray, W_true: np.ndarray) -> np.ndarray:
    """H_true x H cosines; zero-norm learned columns are -inf so they never match."""
    W_learned = np.asarray(W_learned, dtype=float)
    W_true = np.asarray(W_true, dtype=float)
    if W_learned.shape[0] != W_true.shape[0]:
        raise InvalidArgumentError(f"dimension mismatch: {W_learned.shape[0]} vs {W_true.shape[0]}")
    learned_norms = np.linalg.norm(W_learned, axis=0)
    true_norms = np.linalg.norm(W_true, axis=0)
    cos = np.full((W_true.shape[1], W_learned.shape[1]), -np.inf)
    ok = learned_norms > 0
    safe_true = np.where(true_norms > 0, true_norms, 1.0)
    cos[:, ok] = (W_true.T @ W_learned[:, ok]) / np.outer(safe_true, learned_norms[ok])
    return cos

def greedy_matching(scores: np.ndarray) -> Dict[int, int]:
    """One-to-one row -> column matching by descending score (ties: lowest flat index first)."""
    n_rows, n_cols = scores.shape
    order = np.argsort(-scores, axis=None, kind="stable")
    rows_used, cols_used = set(), set()
    pairs: Dict[int, int] = {}
    for flat in order:
        j, k = divmod(int(flat), n_cols)
        if not np.isfinite(scores[j, k]):
            break
        if j in rows_used or k in cols_used:
            continue
        pairs[j] = k
        rows_used.add(j)
        cols_used.add(k)
        if len(pairs) == min(n_rows, n_cols):
            break
    return pairs

def evaluate_recovery(W_learned: np.ndarray, W_true: np.ndarray, threshold: float = 0.95) -> RecoveryReport:
    W_learned = np.asarray(W_learned, dtype=float)
    W_true = np.asarray(W_true, dtype=float)
    if W_learned.shape[1] < W_true.shape[1]:
        raise InvalidArgumentError(f"H={W_learned.shape[1]} learned columns cannot cover {W_true.shape[1]} true ones")
    cos = cosine_matrix(W_learned, W_true)
    pairs = greedy_matching(cos)
    h_true = W_true.shape[1]
    best = [float(cos[j, pairs[j]]) if j in pairs else 0.0 for j in range(h_true)]
    matches = [(j, pairs[j]) for j in range(h_true) if j in pairs and best[j] >= threshold]
    unmatched = [j for j in range(h_true) if j not in pairs or best[j] < threshold]
    return RecoveryReport(threshold=threshold, best_cosines=best, matches=matches,
                          unmatched=unmatched, success=not unmatched)

def label_accuracy(predicted: np.ndarray, true_labels: np.ndarray) -> float:
    """Accuracy after the optimal one-to-one relabeling of predicted clusters."""
    predicted = np.asarray(predicted, dtype=int).ravel()
    true_labels = np.asarray(true_labels, dtype=int).ravel()
    if predicted.shape != true_labels.shape:
        raise InvalidArgumentError(f"{predicted.size} predictions for {true_labels.size} labels")
    if predicted.size == 0:
        raise InvalidArgumentError("no labels to score")
    k = int(max(predicted.max(), true_labels.max())) + 1
    confusion = np.zeros((k, k))
    np.add.at(confusion, (true_labels, predicted), 1.0)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    return float(confusion[rows, cols].sum() / predicted.size)

def align_latents(params: ModelParams, truth: ModelParams) -> np.ndarray:
    """Learned index standing for each true latent (-1 when none): cosine matching of dictionaries,
    minimum-distance assignment of cluster means."""
    if isinstance(params, GMMParams):
        cost = cdist(np.asarray(truth.means), np.asarray(params.means))
        rows, cols = linear_sum_assignment(cost)
        out = np.full(truth.n_latents, -1)
        out[rows] = cols
        return out
    pairs = greedy_matching(cosine_matrix(params.W, truth.W))
    return np.array([pairs.get(j, -1) for j in range(truth.n_latents)])

# ----------------------------
# Trace and checkpoint files
# ----------------------------

def _atomic_write(path: Path, write: Callable[[Any], None], mode: str = "w") -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": ""})) as f:
        write(f)
    os.replace(tmp, path)

def write_trace(path: Path, records: List[Dict[str, Any]]) -> None:
    def _write(f) -> None:
        writer = csv.DictWriter(f, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for rec in records:
            writer.writerow({k: rec.get(k, "") for k in TRACE_COLUMNS})
    _atomic_write(Path(path), _write)

def read_trace(path: Path) -> List[Dict[str, Any]]:
    out: List[Dict[str, Any]] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            rec: Dict[str, Any] = {}
            for key, raw in row.items():
                if key in _TEXT_COLUMNS:
                    rec[key] = raw
                elif key in _INT_COLUMNS:
                    rec[key] = int(raw)
                else:
                    rec[key] = float(raw) if raw not in ("", None) else None
            out.append(rec)
    return out

def save_checkpoint(run_dir: Path, state: EMState) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {
        "iteration": np.array(state.iteration),
        "kind": np.array(kind_of(state.params)),
        "hp": np.array([getattr(state.hp, name) for name in KernelHyperparams.NAMES]),
        "targets": state.targets if state.targets is not None else np.zeros((0, 0)),
    }
    arrays.update({f"param_{k}": v for k, v in params_to_arrays(state.params).items()})
    if state.chain is not None:
        arrays.update(chain_s=state.chain.s, chain_z=state.chain.z, chain_scale=state.chain.scale)
    _atomic_write(run_dir / STATE_FILE, lambda f: np.savez(f, **arrays), mode="wb")
    record = params_to_record(state.params)
    _atomic_write(run_dir / PARAMS_FILE, lambda f: f.write(record.model_dump_json(indent=2)))
    write_trace(run_dir / TRACE_FILE, state.trace)
    log.info("Checkpoint written", extra={"iteration": state.iteration, "path": str(run_dir)})

def load_checkpoint(run_dir: Path) -> EMState:
    run_dir = Path(run_dir)
    path = run_dir / STATE_FILE
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with np.load(path) as data:
        kind = str(data["kind"])
        params = params_from_arrays(kind, {k[len("param_"):]: data[k] for k in data.files if k.startswith("param_")})
        hp = KernelHyperparams(**dict(zip(KernelHyperparams.NAMES, (float(v) for v in data["hp"]))))
        targets = data["targets"] if data["targets"].size else None
        chain = None
        if "chain_s" in data.files:
            chain = GibbsChain(s=data["chain_s"], z=data["chain_z"], scale=data["chain_scale"])
        iteration = int(data["iteration"])
    trace = read_trace(run_dir / TRACE_FILE)[:iteration]
    return EMState(iteration=iteration, params=params, hp=hp, targets=targets, chain=chain, trace=trace)

def _truncate_selections(path: Path, iteration: int) -> None:
    """Drop selection rows newer than the checkpoint we resume from."""
    if not path.exists():
        return
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= iteration] if rows else []
    _atomic_write(path, lambda f: csv.writer(f).writerows(kept))

# ----------------------------
# Engine
# ----------------------------

class EMEngine:
    def __init__(
        self,
        config: EMConfig,
        Y: np.ndarray,
        *,
        ground_truth: Optional[GroundTruth] = None,
        run_dir: Optional[Path] = None,
    ) -> None:
        self.config = config
        self.Y = _as_data(Y)
        if self.Y.shape[0] < config.n_latents:
            raise InvalidArgumentError(f"need at least H={config.n_latents} data points, got {self.Y.shape[0]}")
        self.X = standardize(self.Y) if config.standardize_inputs else self.Y
        self.model = get_model(config.model_kind, config.gibbs)
        self.truth = ground_truth
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self._gp_base: Optional[GPFit] = None
        self.last_selection: Optional[np.ndarray] = None

    # ---- state ----

    def initial_state(self, params: Optional[ModelParams] = None, *, warm_targets: bool = False) -> EMState:
        """Iteration-0 state. With warm_targets the first GP targets are the full-posterior
        expectations under `params` instead of uniform noise."""
        cfg = self.config
        if params is None:
            params = init_params(cfg.model_kind, self.Y, derived_rng(cfg.seed, "init"), cfg.n_latents)
        if kind_of(params) != cfg.model_kind or params.n_latents != cfg.n_latents:
            raise InvalidArgumentError(
                f"initial parameters ({kind_of(params)}, H={params.n_latents}) do not match the config "
                f"({cfg.model_kind}, H={cfg.n_latents})"
            )
        targets = None
        if warm_targets and cfg.uses_gp:
            full = self._state_set(full_selection(self.Y.shape[0], cfg.n_latents))
            result = self.model.e_step(params, self.Y, full, derived_rng(cfg.seed, "targets", 0))
            targets = np.clip(result.targets, 0.0, 1.0)
        return EMState(iteration=0, params=params, hp=cfg.kernel, targets=targets)

    def resume_state(self) -> EMState:
        if self.run_dir is None:
            raise InvalidArgumentError("resume needs a run directory")
        state = load_checkpoint(self.run_dir)
        if kind_of(state.params) != self.config.model_kind:
            raise InvalidArgumentError(f"checkpoint holds {kind_of(state.params)} parameters")
        _truncate_selections(self.run_dir / SELECTIONS_FILE, state.iteration)
        log.info("Resuming from checkpoint", extra={"iteration": state.iteration, "path": str(self.run_dir)})
        return state

    # ---- phases ----

    def _gp_for(self, hp: KernelHyperparams, targets: np.ndarray, notes: List[str]) -> GPFit:
        base = self._gp_base
        if base is not None and base.hp == hp:
            return with_targets(base, targets)
        cfg = self.config
        if cfg.ichol_rank is not None:
            factor = incomplete_cholesky(hp, self.X, min(cfg.ichol_rank, self.X.shape[0]), cfg.ichol_tol)
            base = fit_lowrank(hp, self.X, targets, factor)
        else:
            base = fit(hp, self.X, targets)
        if base.jitter > 0:
            notes.append("gp_jitter")
        self._gp_base = base
        return base

    def _affinity(self, state: EMState, iteration: int, notes: List[str], record: Dict[str, Any]) -> Optional[np.ndarray]:
        cfg = self.config
        mode = cfg.selection_mode
        if mode == "gp_select":
            targets = state.targets
            if targets is None:
                targets = derived_rng(cfg.seed, "targets", iteration).random((self.Y.shape[0], cfg.n_latents))
            record["targets_in_checksum"] = targets_checksum(targets)
            gp = self._gp_for(state.hp, targets, notes)
            stats = diagnostics(gp)
            record.update(gp_evidence=stats["gp_evidence"], gp_loo_mae=stats["gp_loo_mae"], gp_rank=stats["gp_rank"])
            return gp_affinity(gp)
        if mode == "cosine":
            return cosine_affinity(state.params.W, self.Y)
        if mode == "singleton_likelihood":
            return singleton_affinity(state.params, self.Y)
        return None

    def _state_set(self, selected: np.ndarray) -> StateSet:
        cfg = self.config
        if cfg.model_kind == "gmm":
            one_hot = np.eye(cfg.n_latents, dtype=np.uint8)[np.sort(selected, axis=1)]
            return StateSet(states=one_hot, selected=selected)
        return build_state_sets(selected, cfg.n_latents, cfg.include_singletons)

    def _hit_rate(self, params: ModelParams, selected: np.ndarray) -> float:
        truth = self.truth
        if truth is None or truth.states is None:
            return float("nan")
        alignment = align_latents(params, truth.params) if truth.params is not None else None
        return selection_hit_rate(selected, truth.states, alignment)

    def step(self, state: EMState, iteration: int) -> Dict[str, Any]:
        """Run iteration `iteration` on `state` in place and return its trace record."""
        cfg = self.config
        notes: List[str] = []
        record: Dict[str, Any] = {k: float("nan") for k in TRACE_COLUMNS}
        record.update(iteration=iteration, targets_in_checksum="", hyperopt_evidence=float("nan"))
        record.update(state.hp.to_record())

        t0 = time.perf_counter()
        affinity = self._affinity(state, iteration, notes, record)
        t1 = time.perf_counter()
        if affinity is None:
            selected = full_selection(self.Y.shape[0], cfg.n_latents)
        else:
            selected = select_indices(affinity, cfg.h_prime, cfg.random_fraction, seed=cfg.seed, iteration=iteration)
        states = self._state_set(selected)
        t2 = time.perf_counter()
        result = self.model.e_step(state.params, self.Y, states, derived_rng(cfg.seed, "estep", iteration),
                                   chain=state.chain, notes=notes)
        t3 = time.perf_counter()
        new_params = self.model.m_step(result, state.params, self.Y, derived_rng(cfg.seed, "mstep", iteration), notes)
        _check_finite(new_params, iteration)
        t4 = time.perf_counter()

        hp = state.hp
        if cfg.uses_gp and cfg.optimize_hyperparams and iteration % cfg.hyper_update_every == 0:
            opt = optimize_hyperparams(hp, self.X, result.targets, cfg.max_grad_steps,
                                       ichol_rank=cfg.ichol_rank, ichol_tol=cfg.ichol_tol)
            if opt.reset:
                notes.append("hyperparameter_reset")
            hp = opt.hp
            record["hyperopt_evidence"] = opt.evidence_path[-1]
        t5 = time.perf_counter()

        record.update(
            free_energy=result.free_energy,
            free_energy_stderr=result.free_energy_stderr if result.free_energy_stderr is not None else float("nan"),
            t_affinity=t1 - t0,
            t_selection=t2 - t1,
            t_estep=t3 - t2,
            t_mstep=t4 - t3,
            t_hyperopt=t5 - t4,
            hit_rate=self._hit_rate(state.params, selected),
            gibbs_acceptance=result.diagnostics.get("gibbs_acceptance", float("nan")),
            gibbs_scale_mean=result.diagnostics.get("gibbs_scale_mean", float("nan")),
            sigma2=getattr(new_params, "sigma2", float("nan")),
            pi=getattr(new_params, "pi", float("nan")),
            warnings=len(notes),
            targets_out_checksum=targets_checksum(result.targets),
        )
        record["t_total"] = time.perf_counter() - t0

        state.params = new_params
        state.hp = hp
        state.targets = result.targets
        state.chain = result.chain
        state.iteration = iteration
        state.trace.append(record)
        self.last_selection = selected

        if self.run_dir is not None:
            path = self.run_dir / SELECTIONS_FILE
            with open(path, "a", encoding="utf-8", newline="") as f:
                write_selections(f, iteration, selected, header=f.tell() == 0)
        if notes:
            log.warning("Numerical degeneracies this iteration", extra={"iteration": iteration, "notes": notes})
        log.info("EM iteration done", extra={
            "iteration": iteration,
            "free_energy": result.free_energy,
            "warnings": len(notes),
            "t_total": record["t_total"],
        })
        return record

    # ---- loop ----

    def run(
        self,
        state: Optional[EMState] = None,
        *,
        params: Optional[ModelParams] = None,
        progress: Optional[Callable[[str], None]] = None,
    ) -> EMResult:
        cfg = self.config
        state = state or self.initial_state(params)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        try:
            for t in range(state.iteration + 1, cfg.n_iterations + 1):
                rec = self.step(state, t)
                if self.run_dir is not None and (t % cfg.checkpoint_every == 0 or t == cfg.n_iterations):
                    save_checkpoint(self.run_dir, state)
                if progress is not None:
                    progress(f"iteration {t}/{cfg.n_iterations} free_energy={rec['free_energy']:.6g}")
        except NumericalError as exc:
            exc.trace = list(state.trace)
            exc.context.setdefault("iteration", state.iteration + 1)
            if self.run_dir is not None:
                write_trace(self.run_dir / TRACE_FILE, state.trace)
            log.error("EM aborted on numerical failure", extra={"iteration": state.iteration + 1, "error": exc.detail})
            raise
        dominance = kernel_dominance(state.hp, self.X) if cfg.uses_gp else None
        elapsed = time.perf_counter() - start
        log.info("EM run finished", extra={"iterations": state.iteration, "elapsed_s": round(elapsed, 3)})
        return EMResult(
            params=state.params,
            trace=state.trace,
            hp=state.hp,
            targets=state.targets,
            last_selection=self.last_selection,
            kernel_dominance=dominance,
            elapsed_s=elapsed,
        )

def run_em(
    config: EMConfig,
    Y: np.ndarray,
    ground_truth: Optional[GroundTruth] = None,
    *,
    params: Optional[ModelParams] = None,
    run_dir: Optional[Path] = None,
) -> EMResult:
    return EMEngine(config, Y, ground_truth=ground_truth, run_dir=run_dir).run(params=params)
