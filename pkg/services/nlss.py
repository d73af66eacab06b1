# services/nlss.py
"""
Nonlinear spike-and-slab sparse coding. The observation mean combines latents by a
per-dimension maximum,

    mean_d = max_h s_h z_h W_dh ,

which breaks conjugacy; the truncated E-step therefore runs a Gibbs chain over
(s in K_n, z): binary states by enumeration of K_n given z, active slabs by
Metropolis-within-Gibbs with a Gaussian random-walk proposal, inactive slabs
from the prior. The M-step credits each observed dimension to the latent that
attains the maximum there.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from errors import InvalidArgumentError
from services.bsc import PI_BOUNDS, SIGMA2_FLOOR
from services.params import NLSSParams
from services.posterior import as_batch, chunk_slices, log_bernoulli_prior, normalize_log
from services.spike_slab import slab_updates

log = logging.getLogger("models")

_LOG_2PI = float(np.log(2.0 * np.pi))
_SUPPORT_EPS = 1e-8
_SCALE_BOUNDS = (1e-6, 1e3)
_SLAB_VAR_FLOOR = 1e-12

@dataclass
class GibbsChain:
    """Chain state carried across EM iterations."""
    s: np.ndarray           # N x H uint8
    z: np.ndarray           # N x H
    scale: np.ndarray       # H proposal standard deviations

@dataclass
class NLSSStats:
    n_points: int
    n_dims: int
    Y: np.ndarray
    s_samples: np.ndarray   # K x N x H uint8
    sz_samples: np.ndarray  # K x N x H
    sum_s: np.ndarray
    sum_sz: np.ndarray
    sum_sz2: np.ndarray
    acceptance: float
    free_energy: float
    free_energy_stderr: float
    chain: GibbsChain
    diagnostics: Dict[str, float] = field(default_factory=dict)

def init_chain(params: NLSSParams, n_points: int, rng: np.random.Generator, initial_scale: float = 0.3) -> GibbsChain:
    h = params.n_latents
    psi = np.asarray(params.psi, dtype=float)
    z = params.mu + np.sqrt(psi) * rng.standard_normal((n_points, h))
    return GibbsChain(s=np.zeros((n_points, h), dtype=np.uint8), z=z, scale=initial_scale * np.sqrt(psi))

def nlss_means(W: np.ndarray, sz: np.ndarray) -> np.ndarray:
    """Observation means for slab-times-state values sz (N x H): max_h sz_h W_dh, N x D."""
    contrib = np.asarray(sz, dtype=float)[:, :, None] * np.asarray(W, dtype=float).T[None, :, :]
    return contrib.max(axis=1)

def _log_lik(Y: np.ndarray, means: np.ndarray, sigma2: float) -> np.ndarray:
    resid = Y - means
    return -0.5 * (Y.shape[-1] * (_LOG_2PI + np.log(sigma2)) + np.einsum("...d,...d->...", resid, resid) / sigma2)

def _slab_log_prior(z: np.ndarray, mu: np.ndarray, psi: np.ndarray) -> np.ndarray:
    return -0.5 * (_LOG_2PI + np.log(psi) + (z - mu) ** 2 / psi)

def nlss_log_joint(params: NLSSParams, y: np.ndarray, s: np.ndarray, z: np.ndarray) -> float:
    """log p(y, s, z_active) with inactive slabs integrated out."""
    y = np.asarray(y, dtype=float).reshape(1, -1)
    s = np.asarray(s).reshape(1, -1)
    z = np.asarray(z, dtype=float).reshape(1, -1)
    sz = s * z
    value = _log_lik(y, nlss_means(params.W, sz), params.sigma2) + log_bernoulli_prior(s, params.pi)
    value += np.sum(np.where(s > 0, _slab_log_prior(z, params.mu, params.psi), 0.0), axis=-1)
    return float(value[0])

def _resample_states(params: NLSSParams, Y: np.ndarray, states: np.ndarray, z: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    n, n_states, h = states.shape
    W = np.asarray(params.W, dtype=float)
    u = rng.random(n)
    chosen = np.empty(n, dtype=int)
    for sl in chunk_slices(n, n_states * (Y.shape[1] + h)):
        st = states[sl]
        scaled = z[sl][:, :, None] * W.T[None]                    # n x H x D
        means = np.zeros((st.shape[0], n_states, Y.shape[1]))
        for k in range(h):
            np.maximum(means, st[:, :, k, None] * scaled[:, None, k, :], out=means)
        lj = _log_lik(Y[sl][:, None, :], means, params.sigma2) + log_bernoulli_prior(st, params.pi)
        q, _ = normalize_log(lj)
        cdf = np.cumsum(q, axis=1)
        chosen[sl] = np.minimum((cdf < u[sl, None] * cdf[:, -1:]).sum(axis=1), n_states - 1)
    return states[np.arange(n), chosen].copy()

def _resample_slabs(params: NLSSParams, Y: np.ndarray, s: np.ndarray, z: np.ndarray, scale: np.ndarray,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One Metropolis-within-Gibbs sweep over h; returns z, accepted and proposed counts per latent."""
    n, h = s.shape
    W = np.asarray(params.W, dtype=float)
    mu = np.asarray(params.mu, dtype=float)
    psi = np.asarray(params.psi, dtype=float)
    z = z.copy()
    accepted = np.zeros(h)
    proposed = np.zeros(h)
    contrib = (s * z)[:, :, None] * W.T[None]                        # n x H x D
    loglik = _log_lik(Y, contrib.max(axis=1), params.sigma2)
    for k in range(h):
        active = s[:, k] > 0
        eps = rng.standard_normal(n)
        u = rng.random(n)
        prior_draw = mu[k] + np.sqrt(psi[k]) * rng.standard_normal(n)
        z[~active, k] = prior_draw[~active]
        if not np.any(active):
            continue
        others = contrib.copy()
        others[:, k, :] = -np.inf
        rest = others.max(axis=1)                                     # n x D
        cand = z[:, k] + scale[k] * eps
        cand_means = np.maximum(rest, cand[:, None] * W[None, :, k])
        cand_loglik = _log_lik(Y, cand_means, params.sigma2)
        log_ratio = (cand_loglik - loglik
                     + _slab_log_prior(cand, mu[k], psi[k]) - _slab_log_prior(z[:, k], mu[k], psi[k]))
        take = active & (np.log(u) < log_ratio)
        z[take, k] = cand[take]
        contrib[take, k, :] = cand[take, None] * W[None, :, k]
        loglik = np.where(take, cand_loglik, loglik)
        accepted[k] += take.sum()
        proposed[k] += active.sum()
    return z, accepted, proposed

def _slab_entropy(s_samples: np.ndarray, sz_samples: np.ndarray) -> np.ndarray:
    """Gaussian moment estimate of E_s[H(z_active | s)] per point.

    Each latent contributes p(s_h = 1) * 0.5 * log(2 pi e Var[z_h | s_h = 1]) from its active
    samples; latents active in fewer than two samples contribute nothing.
    """
    k = s_samples.shape[0]
    active = s_samples > 0
    count = active.sum(axis=0)                                             # N x H
    mean = np.where(active, sz_samples, 0.0).sum(axis=0) / np.maximum(count, 1)
    sq = np.where(active, (sz_samples - mean[None]) ** 2, 0.0).sum(axis=0)
    var = np.maximum(sq / np.maximum(count - 1, 1), _SLAB_VAR_FLOOR)
    per_latent = 0.5 * (_LOG_2PI + 1.0 + np.log(var))
    return np.where(count >= 2, count / k * per_latent, 0.0).sum(axis=1)

def _state_entropy(s_samples: np.ndarray) -> np.ndarray:
    """Entropy of the empirical binary-state distribution per point."""
    k, n, h = s_samples.shape
    codes = (s_samples.astype(np.int64) << np.arange(h, dtype=np.int64)).sum(axis=2).T     # N x K
    out = np.empty(n)
    for i in range(n):
        _, counts = np.unique(codes[i], return_counts=True)
        p = counts / k
        out[i] = -float(np.sum(p * np.log(p)))
    return out

def nlss_gibbs_estep(
    params: NLSSParams,
    Y: np.ndarray,
    states: np.ndarray,
    n_samples: int,
    burn_in: int,
    rng: np.random.Generator,
    *,
    chain: Optional[GibbsChain] = None,
    target_acceptance: float = 0.44,
    initial_scale: float = 0.3,
) -> NLSSStats:
    """Sampled truncated E-step; the chain is warm-started when given and adapted during burn-in."""
    if n_samples < 1:
        raise InvalidArgumentError(f"n_samples must be >= 1, got {n_samples}")
    if burn_in < 0:
        raise InvalidArgumentError(f"burn_in must be >= 0, got {burn_in}")
    Y, states = as_batch(Y, states)
    n, _, h = states.shape
    if chain is None or chain.z.shape != (n, h):
        chain = init_chain(params, n, rng, initial_scale)
    z, scale = chain.z.copy(), chain.scale.copy()
    s = chain.s

    for _ in range(burn_in):
        s = _resample_states(params, Y, states, z, rng)
        z, acc, prop = _resample_slabs(params, Y, s, z, scale, rng)
        seen = prop > 0
        scale[seen] = np.clip(scale[seen] * np.exp(acc[seen] / prop[seen] - target_acceptance), *_SCALE_BOUNDS)

    s_samples = np.empty((n_samples, n, h), dtype=np.uint8)
    sz_samples = np.empty((n_samples, n, h))
    log_joint = np.empty((n_samples, n))
    mu = np.asarray(params.mu, dtype=float)
    psi = np.asarray(params.psi, dtype=float)
    total_acc = total_prop = 0.0
    for i in range(n_samples):
        s = _resample_states(params, Y, states, z, rng)
        z, acc, prop = _resample_slabs(params, Y, s, z, scale, rng)
        total_acc += acc.sum()
        total_prop += prop.sum()
        sz = s * z
        s_samples[i], sz_samples[i] = s, sz
        log_joint[i] = (_log_lik(Y, nlss_means(params.W, sz), params.sigma2)
                        + log_bernoulli_prior(s, params.pi)
                        + np.where(s > 0, _slab_log_prior(z, mu, psi), 0.0).sum(axis=1))

    per_point = log_joint.mean(axis=0) + _state_entropy(s_samples) + _slab_entropy(s_samples, sz_samples)
    variance = log_joint.var(axis=0, ddof=1) if n_samples > 1 else np.zeros(n)
    acceptance = float(total_acc / total_prop) if total_prop else float("nan")
    s_float = s_samples.astype(float)
    stats = NLSSStats(
        n_points=n,
        n_dims=Y.shape[1],
        Y=Y,
        s_samples=s_samples,
        sz_samples=sz_samples,
        sum_s=s_float.mean(axis=0).sum(axis=0),
        sum_sz=sz_samples.mean(axis=0).sum(axis=0),
        sum_sz2=(sz_samples ** 2).mean(axis=0).sum(axis=0),
        acceptance=acceptance,
        free_energy=float(per_point.sum()),
        free_energy_stderr=float(np.sqrt(variance.sum() / n_samples)),
        chain=GibbsChain(s=s.copy(), z=z, scale=scale),
    )
    stats.diagnostics = {"gibbs_acceptance": acceptance, "gibbs_scale_mean": float(scale.mean())}
    log.debug("Gibbs E-step done", extra={"acceptance": acceptance, "samples": n_samples, "burn_in": burn_in})
    return stats

def nlss_expectations(stats: NLSSStats) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo <s> and <s*z>, N x H each."""
    return stats.s_samples.astype(float).mean(axis=0), stats.sz_samples.mean(axis=0)

def nlss_mstep(stats: NLSSStats, previous: NLSSParams, notes: Optional[List[str]] = None) -> NLSSParams:
    """Winner-take-all dictionary update; slab, sparsity and noise from the sampled moments."""
    W_old = np.asarray(previous.W, dtype=float)
    d, h = W_old.shape
    Y = stats.Y
    num = np.zeros((d, h))
    den = np.zeros((d, h))
    for s, sz in zip(stats.s_samples, stats.sz_samples):
        contrib = sz[:, :, None] * W_old.T[None]                     # N x H x D
        winner = contrib.argmax(axis=1)                             # N x D
        credited = np.take_along_axis(s, winner, axis=1) > 0
        onehot = ((winner[:, :, None] == np.arange(h)) & credited[:, :, None]).astype(float)
        num += np.einsum("nd,nh,ndh->dh", Y, sz, onehot)
        den += np.einsum("nh,ndh->dh", sz ** 2, onehot)

    supported = den > _SUPPORT_EPS
    W = np.where(supported, num / np.where(supported, den, 1.0), W_old)
    if not np.all(supported):
        log.debug("Dictionary entries without winner support kept", extra={"pairs": int((~supported).sum())})

    k = stats.s_samples.shape[0]
    resid = sum(float(np.sum((Y - nlss_means(W, sz)) ** 2)) for sz in stats.sz_samples)
    sigma2 = max(resid / (k * stats.n_points * stats.n_dims), SIGMA2_FLOOR)
    pi = float(np.clip(stats.sum_s.sum() / (stats.n_points * h), *PI_BOUNDS))
    mu, psi = slab_updates(stats.sum_s, stats.sum_sz, stats.sum_sz2, previous)
    return NLSSParams(W=W, sigma2=sigma2, pi=pi, mu=mu, psi=psi)
