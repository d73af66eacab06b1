# services/selection.py
"""
Affinity-based selection: rank latent variables per data point, keep the H'
most relevant (with a random exploration share), and expand the kept indices
into the truncated state set K_n.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, TextIO

import numpy as np

from errors import InvalidArgumentError
from services.gp_regression import GPFit, loo_means
from services.params import SSParams

log = logging.getLogger("selection")

# Stream tags for per-row generators derived from (seed, iteration, n).
SELECTION_STREAM = 1

@dataclass(frozen=True)
class StateSet:
    """Per-point truncated state sets, N x S x H binary (uint8)."""
    states: np.ndarray
    selected: Optional[np.ndarray] = None     # N x H' indices the states were built from

    @property
    def n_points(self) -> int:
        return self.states.shape[0]

    @property
    def n_states(self) -> int:
        return self.states.shape[1]

    @property
    def n_latents(self) -> int:
        return self.states.shape[2]

    def row(self, n: int) -> np.ndarray:
        return self.states[n]

# ----------------------------
# Ranking
# ----------------------------

def exploration_count(h_prime: int, random_fraction: float) -> int:
    """R = ceil(random_fraction * H'); at least 1 whenever random_fraction > 0."""
    if random_fraction <= 0:
        return 0
    return min(h_prime, int(math.ceil(random_fraction * h_prime - 1e-12)))

def _top_order(values: np.ndarray) -> np.ndarray:
    # stable sort on the negated values: descending, ties keep the lower index first
    return np.argsort(-values, kind="stable")

def rank_and_truncate(
    affinity_row: np.ndarray,
    h_prime: int,
    random_fraction: float,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Indices of the H'-R highest affinities followed by R uniform draws from the rest."""
    row = np.asarray(affinity_row, dtype=float).ravel()
    h = row.shape[0]
    if not 1 <= h_prime <= h:
        raise InvalidArgumentError(f"H'={h_prime} must lie in [1, H={h}]")
    if not 0 <= random_fraction < 1:
        raise InvalidArgumentError(f"random_fraction must lie in [0, 1), got {random_fraction}")
    if np.any(np.isnan(row)):
        raise InvalidArgumentError("affinities contain NaN")

    order = _top_order(row)
    n_random = exploration_count(h_prime, random_fraction)
    keep = order[: h_prime - n_random]
    if n_random == 0:
        return keep
    if rng is None:
        raise InvalidArgumentError("a random generator is required when random_fraction > 0")
    remaining = np.sort(order[h_prime - n_random:])
    drawn = rng.choice(remaining, size=n_random, replace=False)
    return np.concatenate([keep, drawn])

def row_generator(seed: int, iteration: int, n: int, stream: int = SELECTION_STREAM) -> np.random.Generator:
    """Independent per-row stream so rows can be processed in any order."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, iteration, n]))

def select_indices(
    affinity: np.ndarray,
    h_prime: int,
    random_fraction: float,
    *,
    seed: int = 0,
    iteration: int = 0,
) -> np.ndarray:
    """Apply rank_and_truncate to every row; returns an N x H' integer matrix."""
    affinity = np.asarray(affinity, dtype=float)
    n, h = affinity.shape
    if not 1 <= h_prime <= h:
        raise InvalidArgumentError(f"H'={h_prime} must lie in [1, H={h}]")
    if exploration_count(h_prime, random_fraction) == 0:
        return np.argsort(-affinity, axis=1, kind="stable")[:, :h_prime]
    return np.stack([
        rank_and_truncate(affinity[i], h_prime, random_fraction, row_generator(seed, iteration, i))
        for i in range(n)
    ])

# ----------------------------
# State sets
# ----------------------------

def _patterns(h_prime: int) -> np.ndarray:
    """All 2^H' binary patterns, binary counting with bit b <-> b-th smallest selected index."""
    codes = np.arange(2 ** h_prime)[:, None]
    return ((codes >> np.arange(h_prime)[None, :]) & 1).astype(np.uint8)

def build_state_set(selected: np.ndarray, n_latents: int) -> np.ndarray:
    """K_n for one data point: 2^H' states embedded in H dimensions, zeros outside I_n."""
    idx = np.sort(np.asarray(selected, dtype=int).ravel())
    if idx.size and (idx[0] < 0 or idx[-1] >= n_latents):
        raise InvalidArgumentError(f"selected indices out of range for H={n_latents}")
    if np.unique(idx).size != idx.size:
        raise InvalidArgumentError("selected indices contain duplicates")
    states = np.zeros((2 ** idx.size, n_latents), dtype=np.uint8)
    states[:, idx] = _patterns(idx.size)
    return states

def build_state_sets(selected: np.ndarray, n_latents: int, include_singletons: bool = False) -> StateSet:
    """Vectorized build_state_set over all rows of an N x H' selection."""
    selected = np.asarray(selected, dtype=int)
    n, h_prime = selected.shape
    idx = np.sort(selected, axis=1)
    patterns = _patterns(h_prime)
    n_states = patterns.shape[0]
    states = np.zeros((n, n_states, n_latents), dtype=np.uint8)
    states[np.arange(n)[:, None, None], np.arange(n_states)[None, :, None], idx[:, None, :]] = patterns[None]
    if include_singletons and h_prime < n_latents:
        outside = np.ones((n, n_latents), dtype=bool)
        outside[np.arange(n)[:, None], idx] = False
        others = np.nonzero(outside)[1].reshape(n, n_latents - h_prime)
        extra = np.zeros((n, n_latents - h_prime, n_latents), dtype=np.uint8)
        extra[np.arange(n)[:, None], np.arange(n_latents - h_prime)[None, :], others] = 1
        states = np.concatenate([states, extra], axis=1)
    return StateSet(states=states, selected=selected)

def full_selection(n_points: int, n_latents: int) -> np.ndarray:
    return np.tile(np.arange(n_latents), (n_points, 1))

# ----------------------------
# Affinities
# ----------------------------

def gp_affinity(fit: GPFit) -> np.ndarray:
    return loo_means(fit)

def cosine_affinity(W: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """<W_h, y> / ||W_h||; zero-norm columns get -inf so they rank last."""
    W = np.asarray(W, dtype=float)
    Y = np.asarray(Y, dtype=float)
    norms = np.linalg.norm(W, axis=0)
    projections = Y @ W
    out = np.full(projections.shape, -np.inf)
    ok = norms > 0
    out[:, ok] = projections[:, ok] / norms[ok]
    return out

def singleton_affinity(params: SSParams, Y: np.ndarray) -> np.ndarray:
    """log N(y; mu_h W_h, sigma2 I + psi_h W_h W_h^T) for each singleton state s = e_h.

    Rank-one covariance: determinant lemma and Sherman-Morrison, no D x D solves.
    """
    W = np.asarray(params.W, dtype=float)
    Y = np.asarray(Y, dtype=float)
    d = W.shape[0]
    s2 = params.sigma2
    wnorm2 = np.einsum("dh,dh->h", W, W)                       # H
    denom = s2 + params.psi * wnorm2                            # H
    # r = y - mu_h W_h ;  ||r||^2 and W_h^T r per (n, h)
    yw = Y @ W                                                  # N x H
    y2 = np.einsum("nd,nd->n", Y, Y)[:, None]
    r2 = y2 - 2.0 * params.mu * yw + params.mu ** 2 * wnorm2
    wr = yw - params.mu * wnorm2
    quad = (r2 - params.psi * wr ** 2 / denom) / s2
    log_det = (d - 1) * np.log(s2) + np.log(denom)
    return -0.5 * (d * np.log(2.0 * np.pi) + log_det + quad)

# ----------------------------
# Diagnostics
# ----------------------------

def selection_hit_rate(
    selected: np.ndarray,
    true_states: np.ndarray,
    alignment: Optional[np.ndarray] = None,
) -> float:
    """Fraction of truly active latents that fall inside I_n, pooled over the dataset.

    alignment[j] is the learned index standing for true latent j (-1: no counterpart, always a miss);
    the identity when omitted.
    """
    selected = np.asarray(selected, dtype=int)
    active = np.asarray(true_states) > 0
    n, h_true = active.shape
    if selected.shape[0] != n:
        raise InvalidArgumentError(f"{selected.shape[0]} selections for {n} ground-truth rows")
    mapped = np.arange(h_true) if alignment is None else np.asarray(alignment, dtype=int)
    width = int(max(selected.max(initial=0), mapped.max(initial=0))) + 1
    inside = np.zeros((n, width), dtype=bool)
    inside[np.arange(n)[:, None], selected] = True
    total = int(active.sum())
    if total == 0:
        return 1.0
    known = mapped >= 0
    hits = active[:, known] & inside[:, mapped[known]]
    return float(hits.sum() / total)

SELECTIONS_HEADER = ("iteration", "n", "indices")

def write_selections(handle: TextIO, iteration: int, selected: np.ndarray, header: bool = False) -> None:
    writer = csv.writer(handle)
    if header:
        writer.writerow(SELECTIONS_HEADER)
    for n, row in enumerate(np.asarray(selected, dtype=int)):
        writer.writerow((iteration, n, " ".join(str(int(i)) for i in row)))

def read_selections(lines: Iterable[str]) -> dict[int, np.ndarray]:
    """Parse a selections CSV back into {iteration: N x H' matrix}."""
    by_iteration: dict[int, list] = {}
    reader = csv.DictReader(lines)
    for rec in reader:
        it = int(rec["iteration"])
        by_iteration.setdefault(it, []).append([int(i) for i in rec["indices"].split()])
    return {it: np.asarray(rows, dtype=int) for it, rows in by_iteration.items()}
