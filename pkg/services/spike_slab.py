# services/spike_slab.py
"""
Spike-and-slab sparse coding: s ~ Bern(pi), z ~ N(mu, diag(psi)), y ~ N(W (s * z), sigma2 I).

The slab is integrated out per binary state, so the truncated E-step is exact:
  p(y, s) = Bern(s) N(y; W_s mu_s, sigma2 I + W_s Psi_s W_s^T)
computed through the H x H posterior precision Lambda_s = W_s^T W_s / sigma2 + Psi_s^-1
(Woodbury and the matrix determinant lemma), never a D x D factorization.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from errors import InvalidArgumentError
from services.bsc import PI_BOUNDS, SIGMA2_FLOOR
from services.params import SSParams
from services.posterior import (
    TruncatedPosterior,
    as_batch,
    chunk_slices,
    log_bernoulli_prior,
    normalize_log,
    solve_moments,
)

_LOG_2PI = float(np.log(2.0 * np.pi))
PSI_FLOOR = 1e-6
_SUPPORT_EPS = 1e-8

@dataclass(frozen=True)
class SlabMoments:
    """Gaussian moments of z given (y, s); zero outside the active entries."""
    mean: np.ndarray        # ... x H
    cov: np.ndarray         # ... x H x H

@dataclass
class SSStats:
    n_points: int
    n_dims: int
    sum_s: np.ndarray       # H         sum_n <s>
    sum_ysz: np.ndarray     # D x H     sum_n y <s*z>^T
    sum_szsz: np.ndarray    # H x H     sum_n <(s*z)(s*z)^T>
    sum_sz: np.ndarray      # H         sum_n <s*z>
    sum_sz2: np.ndarray     # H         sum_n <s*z^2>
    sum_yy: float

def _state_terms(params: SSParams, Y: np.ndarray, states: np.ndarray) -> tuple[np.ndarray, SlabMoments]:
    W = np.asarray(params.W, dtype=float)
    mu = np.asarray(params.mu, dtype=float)
    psi = np.asarray(params.psi, dtype=float)
    s2 = params.sigma2
    d, h = W.shape
    if Y.shape[1] != d or states.shape[2] != h:
        raise InvalidArgumentError(f"W has shape {W.shape}, data/states imply {(Y.shape[1], states.shape[2])}")

    m = states.astype(float)                                   # n x S x H
    WtW = W.T @ W
    outer = m[..., :, None] * m[..., None, :]
    precision = outer * (WtW / s2)
    idx = np.arange(h)
    precision[..., idx, idx] += m / psi + (1.0 - m)
    cov = np.linalg.inv(precision) * outer
    _, log_det_precision = np.linalg.slogdet(precision)

    Wy = Y @ W                                                 # n x H
    mean = np.einsum("nsij,nsj->nsi", cov, m * (Wy[:, None, :] / s2 + mu / psi))

    prior_mean = m * mu                                        # W_s mu_s in latent coordinates
    y2 = np.einsum("nd,nd->n", Y, Y)[:, None]
    r2 = y2 - 2.0 * np.einsum("nh,nsh->ns", Wy, prior_mean) + np.einsum("nsi,ij,nsj->ns", prior_mean, WtW, prior_mean)
    b = m * (Wy[:, None, :] - prior_mean @ WtW) / s2
    quad = r2 / s2 - np.einsum("nsi,nsij,nsj->ns", b, cov, b)
    log_det_cov = d * np.log(s2) + m @ np.log(psi) + log_det_precision

    log_marginal = -0.5 * (d * _LOG_2PI + log_det_cov + quad) + log_bernoulli_prior(states, params.pi)
    return log_marginal, SlabMoments(mean=mean, cov=cov)

def ss_log_joints(params: SSParams, Y: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Collapsed log p(y_n, s) for every state of every K_n, N x S."""
    Y, states = as_batch(Y, states)
    return _state_terms(params, Y, states)[0]

def ss_collapsed_log_marginal(params: SSParams, y: np.ndarray, s: np.ndarray) -> tuple[float, SlabMoments]:
    y = np.asarray(y, dtype=float).ravel()
    s = np.asarray(s).reshape(1, -1)
    value, moments = _state_terms(params, y[None, :], s[None])
    return float(value[0, 0]), SlabMoments(mean=moments.mean[0, 0], cov=moments.cov[0, 0])

def ss_estep(
    params: SSParams,
    Y: np.ndarray,
    states: np.ndarray,
    notes: Optional[List[str]] = None,
) -> tuple[TruncatedPosterior, np.ndarray, np.ndarray, SSStats]:
    """Exact truncated posterior with slab moments mixed over states.

    Returns q, <s> (N x H), <s*z> (N x H) and the accumulated statistics.
    """
    Y, states = as_batch(Y, states)
    n, n_states, h = states.shape
    d = Y.shape[1]

    probs = np.empty((n, n_states))
    log_norm = np.empty(n)
    exp_s = np.empty((n, h))
    exp_sz = np.empty((n, h))
    sum_szsz = np.zeros((h, h))
    for sl in chunk_slices(n, n_states * (3 * h * h + d)):
        lj, moments = _state_terms(params, Y[sl], states[sl])
        q, ln = normalize_log(lj, notes)
        probs[sl], log_norm[sl] = q, ln
        exp_s[sl] = np.einsum("ns,nsh->nh", q, states[sl].astype(float))
        exp_sz[sl] = np.einsum("ns,nsh->nh", q, moments.mean)
        weighted_mean = moments.mean * q[..., None]
        sum_szsz += np.einsum("ns,nsij->ij", q, moments.cov)
        sum_szsz += weighted_mean.reshape(-1, h).T @ moments.mean.reshape(-1, h)

    stats = SSStats(
        n_points=n,
        n_dims=d,
        sum_s=exp_s.sum(axis=0),
        sum_ysz=Y.T @ exp_sz,
        sum_szsz=sum_szsz,
        sum_sz=exp_sz.sum(axis=0),
        sum_sz2=np.diag(sum_szsz).copy(),
        sum_yy=float(np.einsum("nd,nd->", Y, Y)),
    )
    return TruncatedPosterior(states=states, probs=probs, log_norm=log_norm), exp_s, exp_sz, stats

def slab_updates(
    sum_s: np.ndarray,
    sum_sz: np.ndarray,
    sum_sz2: np.ndarray,
    previous: Optional[SSParams],
) -> tuple[np.ndarray, np.ndarray]:
    """mu_h = <s z>/<s>, psi_h = <s z^2>/<s> - mu_h^2; latents without support keep their values."""
    h = sum_s.shape[0]
    mu = np.asarray(previous.mu, dtype=float).copy() if previous is not None else np.zeros(h)
    psi = np.asarray(previous.psi, dtype=float).copy() if previous is not None else np.ones(h)
    ok = sum_s >= _SUPPORT_EPS
    mu[ok] = sum_sz[ok] / sum_s[ok]
    psi[ok] = np.maximum(sum_sz2[ok] / sum_s[ok] - mu[ok] ** 2, PSI_FLOOR)
    return mu, psi

def ss_mstep(stats: SSStats, previous: Optional[SSParams] = None, notes: Optional[List[str]] = None) -> SSParams:
    n, d = stats.n_points, stats.n_dims
    h = stats.sum_s.shape[0]
    W = solve_moments(stats.sum_ysz, stats.sum_szsz, notes, what="W")
    expected_resid = stats.sum_yy - 2.0 * np.sum(W * stats.sum_ysz) + np.sum((W.T @ W) * stats.sum_szsz)
    sigma2 = max(float(expected_resid) / (n * d), SIGMA2_FLOOR)
    pi = float(np.clip(stats.sum_s.sum() / (n * h), *PI_BOUNDS))
    mu, psi = slab_updates(stats.sum_s, stats.sum_sz, stats.sum_sz2, previous)
    cls = type(previous) if previous is not None else SSParams
    return cls(W=W, sigma2=sigma2, pi=pi, mu=mu, psi=psi)
