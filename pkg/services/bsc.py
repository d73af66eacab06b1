# services/bsc.py
"""Binary sparse coding: s ~ Bern(pi), y ~ N(W s, sigma2 I)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from errors import InvalidArgumentError
from services.params import BSCParams
from services.posterior import (
    TruncatedPosterior,
    as_batch,
    chunk_slices,
    log_bernoulli_prior,
    normalize_log,
    solve_moments,
)

_LOG_2PI = float(np.log(2.0 * np.pi))
SIGMA2_FLOOR = 1e-6
PI_BOUNDS = (1e-4, 1.0 - 1e-4)

@dataclass
class BSCStats:
    n_points: int
    n_dims: int
    sum_s: np.ndarray       # H
    sum_ys: np.ndarray      # D x H
    sum_ss: np.ndarray      # H x H
    sum_yy: float

def bsc_log_joints(params: BSCParams, Y: np.ndarray, states: np.ndarray) -> np.ndarray:
    """log p(y_n, s) for every state of every K_n, N x S."""
    Y, states = as_batch(Y, states)
    W = np.asarray(params.W, dtype=float)
    if W.shape != (Y.shape[1], states.shape[2]):
        raise InvalidArgumentError(f"W has shape {W.shape}, data/states imply {(Y.shape[1], states.shape[2])}")
    d = Y.shape[1]
    means = states.astype(float) @ W.T                    # N x S x D
    resid = np.einsum("nsd,nsd->ns", Y[:, None, :] - means, Y[:, None, :] - means)
    log_lik = -0.5 * (d * (_LOG_2PI + np.log(params.sigma2)) + resid / params.sigma2)
    return log_lik + log_bernoulli_prior(states, params.pi)

def bsc_log_joint(params: BSCParams, y: np.ndarray, s: np.ndarray) -> float:
    s = np.asarray(s).reshape(1, -1)
    return float(bsc_log_joints(params, np.asarray(y, dtype=float).ravel(), s)[0, 0])

def bsc_estep(
    params: BSCParams,
    Y: np.ndarray,
    states: np.ndarray,
    notes: Optional[List[str]] = None,
) -> tuple[TruncatedPosterior, np.ndarray, BSCStats]:
    """Exact posterior over each K_n; returns q, <s> (N x H) and the accumulated statistics."""
    Y, states = as_batch(Y, states)
    n, n_states, h = states.shape
    d = Y.shape[1]

    probs = np.empty((n, n_states))
    log_norm = np.empty(n)
    expectations = np.empty((n, h))
    sum_ss = np.zeros((h, h))
    for sl in chunk_slices(n, n_states * (d + h)):
        lj = bsc_log_joints(params, Y[sl], states[sl])
        q, ln = normalize_log(lj, notes)
        st = states[sl].astype(float)
        weighted = st * q[..., None]
        probs[sl], log_norm[sl] = q, ln
        expectations[sl] = weighted.sum(axis=1)
        sum_ss += weighted.reshape(-1, h).T @ st.reshape(-1, h)

    stats = BSCStats(
        n_points=n,
        n_dims=d,
        sum_s=expectations.sum(axis=0),
        sum_ys=Y.T @ expectations,
        sum_ss=sum_ss,
        sum_yy=float(np.einsum("nd,nd->", Y, Y)),
    )
    return TruncatedPosterior(states=states, probs=probs, log_norm=log_norm), expectations, stats

def bsc_mstep(stats: BSCStats, notes: Optional[List[str]] = None) -> BSCParams:
    n, d = stats.n_points, stats.n_dims
    h = stats.sum_s.shape[0]
    W = solve_moments(stats.sum_ys, stats.sum_ss, notes, what="W")
    expected_resid = stats.sum_yy - 2.0 * np.sum(W * stats.sum_ys) + np.sum((W.T @ W) * stats.sum_ss)
    sigma2 = max(float(expected_resid) / (n * d), SIGMA2_FLOOR)
    pi = float(np.clip(stats.sum_s.sum() / (n * h), *PI_BOUNDS))
    return BSCParams(W=W, sigma2=sigma2, pi=pi)
