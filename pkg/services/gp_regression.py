# services/gp_regression.py
"""
Shared-kernel multi-output GP regression from data points to latent expectations.

One factorization of the noisy Gram serves all H target columns; leave-one-out
means come from the closed form  mu_-n = t_n - [K^-1 t]_n / [K^-1]_nn  with no refits.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve, solve_triangular, LinAlgError

from errors import InvalidArgumentError, NumericalError
from models import KernelHyperparams
from services.kernels import (
    LowRankFactor,
    cross_kernel_gradients,
    gram_matrix,
    incomplete_cholesky,
    kernel_gradients,
)

log = logging.getLogger("gp")

_LOG_2PI = float(np.log(2.0 * np.pi))
_MAX_JITTER = 1e-4
_MAX_HALVINGS = 10
_INITIAL_TRUST = 0.5
_MAX_TRUST = 2.0
_LOG_BOUNDS = (-18.0, 12.0)
# Expectations summed from normalized probabilities may overshoot [0, 1] by rounding.
_TARGET_SLACK = 1e-9

# Instrumentation: number of matrix factorizations performed, by kind.
FACTORIZATIONS: Counter = Counter()

@dataclass(frozen=True)
class GPFit:
    hp: KernelHyperparams
    targets: np.ndarray                 # N x H
    alpha: np.ndarray                   # K^-1 T
    inverse_diag: np.ndarray            # [K^-1]_nn
    log_det: float
    jitter: float = 0.0
    inverse_gram: Optional[np.ndarray] = None          # full-rank mode
    lowrank: Optional[LowRankFactor] = None
    woodbury_basis: Optional[np.ndarray] = None        # V with K^-1 = (I - V V^T) / noise

    @property
    def n_points(self) -> int:
        return self.targets.shape[0]

    @property
    def noise(self) -> float:
        return self.hp.noise_variance + self.jitter

    def apply_inverse(self, B: np.ndarray) -> np.ndarray:
        if self.inverse_gram is not None:
            return self.inverse_gram @ B
        V = self.woodbury_basis
        return (B - V @ (V.T @ B)) / self.noise

    def trace_inverse_product(self, M: np.ndarray) -> float:
        """tr(K^-1 M) for symmetric M."""
        if self.inverse_gram is not None:
            return float(np.sum(self.inverse_gram * M))
        V = self.woodbury_basis
        return float((np.trace(M) - np.sum(V * (M @ V))) / self.noise)

@dataclass
class OptimizationResult:
    hp: KernelHyperparams
    evidence_path: List[float] = field(default_factory=list)
    n_evaluations: int = 0
    reset: bool = False

def _check_targets(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    if not np.all(np.isfinite(T)) or T.min(initial=0.0) < -_TARGET_SLACK or T.max(initial=0.0) > 1.0 + _TARGET_SLACK:
        raise InvalidArgumentError("targets must be latent expectations in [0, 1]")
    return T

def _check_inputs(X: np.ndarray, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    T = _check_targets(T)
    if X.shape[0] != T.shape[0]:
        raise InvalidArgumentError(f"X has {X.shape[0]} rows but targets have {T.shape[0]}")
    return X, T

def fit(hp: KernelHyperparams, X: np.ndarray, T: np.ndarray) -> GPFit:
    """Exact GP fit: one Cholesky of the noisy Gram, jitter escalated up to 1e-4 on failure."""
    X, T = _check_inputs(X, T)
    K = gram_matrix(hp, X, with_noise=True).values
    n = K.shape[0]
    jitter = 0.0
    while True:
        try:
            FACTORIZATIONS["cholesky"] += 1
            factor = cho_factor(K + jitter * np.eye(n) if jitter else K, lower=True, check_finite=True)
            break
        except (LinAlgError, ValueError):
            jitter = 1e-8 if jitter == 0.0 else jitter * 10.0
            if jitter > _MAX_JITTER:
                raise NumericalError(
                    "Cholesky of the noisy Gram failed after jitter escalation",
                    context={"hyperparameters": hp.to_record(), "max_jitter": _MAX_JITTER},
                )
            log.warning("Gram not positive definite; adding jitter", extra={"jitter": jitter, **hp.to_record()})

    L = factor[0]
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    inverse = cho_solve(factor, np.eye(n))
    inverse = 0.5 * (inverse + inverse.T)
    alpha = inverse @ T
    return GPFit(
        hp=hp,
        targets=T,
        alpha=alpha,
        inverse_diag=np.diag(inverse).copy(),
        log_det=log_det,
        jitter=jitter,
        inverse_gram=inverse,
    )

def fit_lowrank(hp: KernelHyperparams, X: np.ndarray, T: np.ndarray, factor: LowRankFactor) -> GPFit:
    """Approximate fit with K ~= G G^T + noise I inverted through the Woodbury identity, O(N Q^2)."""
    X, T = _check_inputs(X, T)
    G = factor.factor
    if G.shape[0] != X.shape[0]:
        raise InvalidArgumentError(f"factor has {G.shape[0]} rows but X has {X.shape[0]}")
    n, q = G.shape
    noise = hp.noise_variance
    jitter = 0.0
    while True:
        try:
            FACTORIZATIONS["woodbury"] += 1
            inner = (noise + jitter) * np.eye(q) + G.T @ G
            L = np.linalg.cholesky(inner) if q else np.zeros((0, 0))
            break
        except np.linalg.LinAlgError:
            jitter = 1e-8 if jitter == 0.0 else jitter * 10.0
            if jitter > _MAX_JITTER:
                raise NumericalError(
                    "Cholesky of the low-rank inner matrix failed after jitter escalation",
                    context={"hyperparameters": hp.to_record(), "rank": q},
                )
    total_noise = noise + jitter
    # V = G L^-T, so (noise I + G G^T)^-1 = (I - V V^T) / noise
    V = solve_triangular(L, G.T, lower=True).T if q else np.zeros((n, 0))
    log_det = (n - q) * float(np.log(total_noise)) + 2.0 * float(np.sum(np.log(np.diag(L))))
    alpha = (T - V @ (V.T @ T)) / total_noise
    inverse_diag = (1.0 - np.einsum("nq,nq->n", V, V)) / total_noise
    return GPFit(
        hp=hp,
        targets=T,
        alpha=alpha,
        inverse_diag=inverse_diag,
        log_det=log_det,
        jitter=jitter,
        lowrank=factor,
        woodbury_basis=V,
    )

def with_targets(fit: GPFit, T: np.ndarray) -> GPFit:
    """Same kernel factorization, new targets; the Gram depends only on X and the hyperparameters."""
    T = _check_targets(T)
    if T.shape[0] != fit.n_points:
        raise InvalidArgumentError(f"targets have {T.shape[0]} rows, fit has {fit.n_points}")
    return replace(fit, targets=T, alpha=fit.apply_inverse(T))

def loo_means(fit: GPFit) -> np.ndarray:
    """Leave-one-out posterior means for every (n, h), vectorized, N >= 2."""
    if fit.n_points < 2:
        raise InvalidArgumentError("leave-one-out prediction needs at least 2 data points")
    return fit.targets - fit.alpha / fit.inverse_diag[:, None]

def log_marginal_likelihood(fit: GPFit) -> float:
    n, h = fit.targets.shape
    data_fit = -0.5 * float(np.sum(fit.targets * fit.alpha))
    return data_fit - 0.5 * h * fit.log_det - 0.5 * h * n * _LOG_2PI

def evidence_gradient(fit: GPFit, X: np.ndarray) -> Dict[str, float]:
    """d evidence / d log(theta) = 1/2 sum_h tr((a_h a_h^T - K^-1) dK)."""
    if fit.lowrank is not None:
        return _lowrank_evidence_gradient(fit, X)
    h = fit.targets.shape[1]
    grads = kernel_gradients(fit.hp, X)
    out: Dict[str, float] = {}
    for name, dK in grads.items():
        quad = float(np.sum(fit.alpha * (dK @ fit.alpha)))
        out[name] = 0.5 * (quad - h * fit.trace_inverse_product(dK))
    return out

def _lowrank_evidence_gradient(fit: GPFit, X: np.ndarray) -> Dict[str, float]:
    """Gradient of the approximate evidence with the pivot set P held fixed.

    G G^T = C W^-1 C^T with C = k(X, X_P) and W = k(X_P, X_P), so with B = C W^-1 = G G_P^-1

        dK = dC B^T + B dC^T - B dW B^T ,

    and every term needs only the N x Q derivative columns: O(N Q^2) per hyperparameter.
    """
    hp = fit.hp
    h = fit.targets.shape[1]
    alpha = fit.alpha
    out = {name: 0.0 for name in KernelHyperparams.NAMES}
    out["noise_variance"] = 0.5 * hp.noise_variance * (float(np.sum(alpha ** 2)) - h * float(fit.inverse_diag.sum()))
    pivots = fit.lowrank.pivots
    if not pivots:
        return out

    G = fit.lowrank.factor
    B = solve(G[pivots].T, G.T).T                      # N x Q, B G_P = G
    A = B.T @ alpha                                    # Q x H
    inv_B = fit.apply_inverse(B)
    BtKB = B.T @ inv_B
    for name, dC in cross_kernel_gradients(hp, X, X[pivots]).items():
        dW = dC[pivots]
        dW = 0.5 * (dW + dW.T)
        quad = 2.0 * float(np.sum((dC.T @ alpha) * A)) - float(np.sum(A * (dW @ A)))
        trace = 2.0 * float(np.sum(dC * inv_B)) - float(np.sum(BtKB * dW))
        out[name] = 0.5 * (quad - h * trace)
    return out

def _fit_for(hp: KernelHyperparams, X: np.ndarray, T: np.ndarray,
             ichol_rank: Optional[int], ichol_tol: float) -> GPFit:
    if ichol_rank is None:
        return fit(hp, X, T)
    factor = incomplete_cholesky(hp, X, min(ichol_rank, X.shape[0]), ichol_tol)
    return fit_lowrank(hp, X, T, factor)

def _evidence_or_nan(hp, X, T, ichol_rank, ichol_tol) -> tuple[float, Optional[GPFit]]:
    try:
        gp = _fit_for(hp, X, T, ichol_rank, ichol_tol)
    except NumericalError:
        return float("nan"), None
    return log_marginal_likelihood(gp), gp

def optimize_hyperparams(
    hp0: KernelHyperparams,
    X: np.ndarray,
    T: np.ndarray,
    max_steps: int = 20,
    *,
    ichol_rank: Optional[int] = None,
    ichol_tol: float = 1e-10,
) -> OptimizationResult:
    """Backtracking gradient ascent on the log-hyperparameters maximizing the evidence.

    Each step moves along the normalized gradient by the current trust length; a step that
    lowers the evidence is halved (at most 10 times) before the search stops.
    """
    if max_steps < 1:
        raise InvalidArgumentError(f"max_steps must be >= 1, got {max_steps}")
    X, T = _check_inputs(X, T)

    result = OptimizationResult(hp=hp0)
    evidence, gp = _evidence_or_nan(hp0, X, T, ichol_rank, ichol_tol)
    result.n_evaluations += 1
    if not np.isfinite(evidence):
        log.warning("Evidence not finite at initial hyperparameters; resetting to defaults",
                    extra=hp0.to_record())
        hp0 = KernelHyperparams()
        result.hp = hp0
        result.reset = True
        evidence, gp = _evidence_or_nan(hp0, X, T, ichol_rank, ichol_tol)
        result.n_evaluations += 1
        if not np.isfinite(evidence):
            raise NumericalError("evidence not finite even at default hyperparameters",
                                 context={"hyperparameters": hp0.to_record()})

    hp = hp0
    result.evidence_path.append(evidence)
    mask = hp.active_mask()
    trust = _INITIAL_TRUST

    for step in range(max_steps):
        grad_map = evidence_gradient(gp, X)
        grad = np.array([grad_map[name] for name in KernelHyperparams.NAMES]) * mask
        norm = float(np.linalg.norm(grad))
        if norm == 0.0 or not np.isfinite(norm):
            break
        direction = grad / norm
        base = hp.log_vector()
        accepted = False
        for _ in range(_MAX_HALVINGS + 1):
            candidate_log = np.where(mask, np.clip(base + trust * direction, *_LOG_BOUNDS), base)
            candidate = hp.with_log_vector(candidate_log)
            cand_evidence, cand_gp = _evidence_or_nan(candidate, X, T, ichol_rank, ichol_tol)
            result.n_evaluations += 1
            if np.isfinite(cand_evidence) and cand_evidence >= evidence:
                accepted = True
                break
            trust *= 0.5
        if not accepted:
            break
        hp, evidence, gp = candidate, cand_evidence, cand_gp
        result.evidence_path.append(evidence)
        trust = min(2.0 * trust, _MAX_TRUST)

    result.hp = hp
    log.info("Kernel hyperparameters optimized", extra={
        "evidence": evidence,
        "steps": len(result.evidence_path) - 1,
        "evaluations": result.n_evaluations,
        **hp.to_record(),
    })
    return result

def diagnostics(fit: GPFit) -> Dict[str, float]:
    """Flat record for the EM trace."""
    record = {f"gp_{k}": v for k, v in fit.hp.to_record().items()}
    record["gp_evidence"] = log_marginal_likelihood(fit)
    record["gp_loo_mae"] = float(np.mean(np.abs(loo_means(fit) - fit.targets))) if fit.n_points > 1 else float("nan")
    record["gp_rank"] = float(fit.lowrank.rank if fit.lowrank is not None else fit.n_points)
    return record
