# services/kernels.py
"""
Composition covariance kernel (RBF + linear + bias, white noise on the Gram
diagonal), its log-parameter gradients, and a greedy incomplete Cholesky
factorization of the noiseless Gram matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np
from scipy.spatial.distance import cdist

from errors import InvalidArgumentError
from models import KernelHyperparams

log = logging.getLogger("kernels")

# Residual diagonal below this fraction of the initial trace is treated as exhausted.
_PIVOT_EPS = 1e-13

@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    includes_noise: bool

@dataclass(frozen=True)
class LowRankFactor:
    factor: np.ndarray        # N x Q
    pivots: List[int]
    residual_trace: float

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

def _as_matrix(X: np.ndarray, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 1:
        raise InvalidArgumentError(f"{name} must be a non-empty N x D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return X

def _parts(hp: KernelHyperparams, X: np.ndarray, Z: np.ndarray) -> Dict[str, np.ndarray]:
    """The three noiseless components of k(X, Z), plus squared distances for gradients."""
    sqdist = cdist(X, Z, metric="sqeuclidean")
    rbf = hp.rbf_variance * np.exp(-0.5 * sqdist / hp.rbf_lengthscale ** 2)
    linear = hp.linear_variance * (X @ Z.T)
    bias = np.full(sqdist.shape, hp.bias_variance)
    return {"rbf": rbf, "linear": linear, "bias": bias, "sqdist": sqdist}

def cross_kernel(hp: KernelHyperparams, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Noiseless k(X, Z); noise never enters cross-covariances."""
    X = _as_matrix(X)
    Z = _as_matrix(Z, "Z")
    if X.shape[1] != Z.shape[1]:
        raise InvalidArgumentError(f"dimension mismatch: {X.shape[1]} vs {Z.shape[1]}")
    p = _parts(hp, X, Z)
    return p["rbf"] + p["linear"] + p["bias"]

def eval_kernel(hp: KernelHyperparams, x: np.ndarray, x2: np.ndarray) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != x2.shape:
        raise InvalidArgumentError(f"dimension mismatch: {x.shape[0]} vs {x2.shape[0]}")
    diff = x - x2
    value = (
        hp.rbf_variance * np.exp(-0.5 * float(diff @ diff) / hp.rbf_lengthscale ** 2)
        + hp.linear_variance * float(x @ x2)
        + hp.bias_variance
    )
    return float(value)

def kernel_diagonal(hp: KernelHyperparams, X: np.ndarray) -> np.ndarray:
    """diag of the noiseless Gram without building it."""
    X = _as_matrix(X)
    return hp.rbf_variance + hp.linear_variance * np.einsum("nd,nd->n", X, X) + hp.bias_variance

def gram_matrix(hp: KernelHyperparams, X: np.ndarray, with_noise: bool = True) -> GramMatrix:
    X = _as_matrix(X)
    K = cross_kernel(hp, X, X)
    K = 0.5 * (K + K.T)
    if with_noise:
        K[np.diag_indices_from(K)] += hp.noise_variance
    return GramMatrix(values=K, includes_noise=with_noise)

def cross_kernel_gradients(hp: KernelHyperparams, X: np.ndarray, Z: np.ndarray) -> Dict[str, np.ndarray]:
    """d k(X, Z) / dlog(theta) for the four signal hyperparameters; noise has no cross term."""
    X = _as_matrix(X)
    Z = _as_matrix(Z, "Z")
    p = _parts(hp, X, Z)
    return {
        "rbf_variance": p["rbf"],
        "rbf_lengthscale": p["rbf"] * p["sqdist"] / hp.rbf_lengthscale ** 2,
        "linear_variance": p["linear"],
        "bias_variance": p["bias"],
    }

def kernel_gradients(hp: KernelHyperparams, X: np.ndarray) -> Dict[str, np.ndarray]:
    """dK/dlog(theta) for every hyperparameter, keyed by KernelHyperparams.NAMES.

    The noise gradient is noise_variance * I since noise sits on the diagonal of the noisy Gram.
    """
    X = _as_matrix(X)
    grads = {name: 0.5 * (g + g.T) for name, g in cross_kernel_gradients(hp, X, X).items()}
    grads["noise_variance"] = hp.noise_variance * np.eye(X.shape[0])
    return grads

def incomplete_cholesky(
    hp: KernelHyperparams,
    X: np.ndarray,
    max_rank: int,
    tol: float = 0.0,
) -> LowRankFactor:
    """Greedy diagonal-pivoting incomplete Cholesky of the noiseless Gram, K ~= G G^T.

    Pivot = largest residual diagonal entry (np.argmax keeps the lowest index on ties).
    Stops at max_rank, when the residual trace drops to tol, or when the residual is exhausted.
    """
    X = _as_matrix(X)
    n = X.shape[0]
    if not 1 <= max_rank <= n:
        raise InvalidArgumentError(f"max_rank must lie in [1, {n}], got {max_rank}")
    if tol < 0:
        raise InvalidArgumentError(f"tol must be nonnegative, got {tol}")

    residual = kernel_diagonal(hp, X).astype(float)
    initial_trace = float(residual.sum())
    G = np.zeros((n, max_rank))
    pivots: List[int] = []
    trace = initial_trace

    for q in range(max_rank):
        if trace <= tol:
            break
        j = int(np.argmax(residual))
        pivot_value = residual[j]
        if pivot_value <= _PIVOT_EPS * max(initial_trace, 1.0):
            break
        column = cross_kernel(hp, X, X[j:j + 1])[:, 0] - G[:, :q] @ G[j, :q]
        G[:, q] = column / np.sqrt(pivot_value)
        pivots.append(j)
        residual = residual - G[:, q] ** 2
        residual[pivots] = 0.0
        residual = np.maximum(residual, 0.0)
        trace = float(residual.sum())

    G = G[:, :len(pivots)]
    log.debug("Incomplete Cholesky done", extra={"rank": len(pivots), "residual_trace": trace, "n": n})
    return LowRankFactor(factor=G, pivots=pivots, residual_trace=max(trace, 0.0))

def kernel_dominance(hp: KernelHyperparams, X: np.ndarray) -> Dict[str, float]:
    """Share of the summed signal variance (mean Gram diagonal) carried by each component."""
    X = _as_matrix(X)
    contributions = {
        "rbf": hp.rbf_variance,
        "linear": hp.linear_variance * float(np.mean(np.einsum("nd,nd->n", X, X))),
        "bias": hp.bias_variance,
    }
    total = sum(contributions.values())
    if total <= 0:
        return {k: 0.0 for k in contributions} | {"dominant": 0.0}
    shares = {k: v / total for k, v in contributions.items()}
    shares["dominant"] = max(shares.values())
    return shares
