# services/gmm.py
"""Isotropic Gaussian mixture with per-point cluster preselection (C' of C clusters)."""
from __future__ import annotations

import logging
from typing import List, Optional

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from errors import InvalidArgumentError
from services.params import GMMParams
from services.posterior import entropy

log = logging.getLogger("models")

_LOG_2PI = float(np.log(2.0 * np.pi))
VARIANCE_FLOOR = 1e-6
_EMPTY_CLUSTER = 1e-8

def _sq_distances(Y: np.ndarray, means: np.ndarray) -> np.ndarray:
    return cdist(Y, means, metric="sqeuclidean")

def gmm_log_joints(params: GMMParams, Y: np.ndarray) -> np.ndarray:
    """log pi_c + log N(y_n; mu_c, var_c I) for all clusters, N x C."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    means = np.asarray(params.means, dtype=float)
    if Y.shape[1] != means.shape[1]:
        raise InvalidArgumentError(f"data dimension {Y.shape[1]} does not match means {means.shape}")
    var = np.asarray(params.variances, dtype=float)
    d = Y.shape[1]
    sq = _sq_distances(Y, means)
    return np.log(params.weights)[None, :] - 0.5 * (d * (_LOG_2PI + np.log(var))[None, :] + sq / var[None, :])

def selection_mask(selected: np.ndarray, n_clusters: int) -> np.ndarray:
    selected = np.atleast_2d(np.asarray(selected, dtype=int))
    if selected.shape[1] < 1 or selected.shape[1] > n_clusters:
        raise InvalidArgumentError(f"C'={selected.shape[1]} must lie in [1, C={n_clusters}]")
    mask = np.zeros((selected.shape[0], n_clusters), dtype=bool)
    mask[np.arange(selected.shape[0])[:, None], selected] = True
    return mask

def gmm_estep(
    params: GMMParams,
    Y: np.ndarray,
    selected: np.ndarray,
    notes: Optional[List[str]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Responsibilities normalized over each point's selected clusters (zero elsewhere).

    Returns (responsibilities N x C, log normalizers N).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    mask = selection_mask(selected, params.n_latents)
    if mask.shape[0] != Y.shape[0]:
        raise InvalidArgumentError(f"{mask.shape[0]} selections for {Y.shape[0]} data points")
    lj = np.where(mask, gmm_log_joints(params, Y), -np.inf)
    log_norm = logsumexp(lj, axis=1)
    bad = ~np.isfinite(log_norm)
    with np.errstate(invalid="ignore"):
        resp = np.where(mask, np.exp(lj - log_norm[:, None]), 0.0)
    if np.any(bad):
        resp[bad] = mask[bad] / mask[bad].sum(axis=1, keepdims=True)
        log.warning("Selected cluster densities underflowed; assigning uniformly", extra={"points": int(bad.sum())})
        if notes is not None:
            notes.append("responsibility_underflow")
    return resp, log_norm

def gmm_free_energy(params: GMMParams, Y: np.ndarray, resp: np.ndarray) -> float:
    """sum_n E_r[log p(y_n, c)] + H(r_n); zero-responsibility clusters contribute nothing."""
    lj = gmm_log_joints(params, Y)
    expected = np.where(resp > 0, resp * lj, 0.0).sum()
    return float(expected + entropy(resp).sum())

def gmm_mstep(
    resp: np.ndarray,
    Y: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    notes: Optional[List[str]] = None,
) -> GMMParams:
    """Weighted means, isotropic variances and mixing proportions.

    A cluster whose total responsibility is below 1e-8 is re-initialized at a random data point
    with the global data variance.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    resp = np.asarray(resp, dtype=float)
    n, d = Y.shape
    totals = resp.sum(axis=0)
    empty = totals < _EMPTY_CLUSTER
    safe = np.where(empty, 1.0, totals)
    means = (resp.T @ Y) / safe[:, None]
    sq = _sq_distances(Y, means)
    variances = np.maximum((resp * sq).sum(axis=0) / (d * safe), VARIANCE_FLOOR)
    weights = totals / n

    if np.any(empty):
        rng = rng or np.random.default_rng(0)
        global_var = max(float(Y.var(axis=0).mean()), VARIANCE_FLOOR)
        for c in np.flatnonzero(empty):
            means[c] = Y[rng.integers(n)]
            variances[c] = global_var
            weights[c] = 1.0 / n
        log.warning("Empty clusters re-initialized at random data points", extra={"clusters": np.flatnonzero(empty).tolist()})
        if notes is not None:
            notes.append("empty_cluster")
    weights = weights / weights.sum()
    return GMMParams(means=means, variances=variances, weights=weights)

def hard_labels(params: GMMParams, Y: np.ndarray) -> np.ndarray:
    """Most probable cluster per point under the full mixture."""
    return gmm_log_joints(params, Y).argmax(axis=1)
