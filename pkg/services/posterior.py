# services/posterior.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from config import settings
from errors import InvalidArgumentError, NumericalError

log = logging.getLogger("models")

_MAX_CONDITION = 1e12
_RIDGE = 1e-8

@dataclass(frozen=True)
class TruncatedPosterior:
    """q_n over K_n: states N x S x H, probabilities N x S, log normalizers N."""
    states: np.ndarray
    probs: np.ndarray
    log_norm: np.ndarray

    def row(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        return self.states[n], self.probs[n]

def as_batch(Y: np.ndarray, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Accept one point (y, K_n) or a batch (Y, N x S x H); always return the batch form."""
    Y = np.asarray(Y, dtype=float)
    states = np.asarray(states)
    if Y.ndim == 1:
        Y = Y[None, :]
    if states.ndim == 2:
        states = states[None]
    if states.ndim != 3 or states.shape[0] != Y.shape[0]:
        raise InvalidArgumentError(f"state sets of shape {states.shape} do not match {Y.shape[0]} data points")
    if states.shape[1] == 0:
        raise InvalidArgumentError("empty truncated state set")
    return Y, states

def chunk_slices(n_points: int, elements_per_point: int, budget: Optional[int] = None) -> Iterator[slice]:
    """Contiguous slices over points, in order, each within the element budget."""
    budget = budget or settings.CHUNK_ELEMENTS
    size = max(1, budget // max(1, elements_per_point))
    for start in range(0, n_points, size):
        yield slice(start, min(start + size, n_points))

def log_bernoulli_prior(states: np.ndarray, pi: float) -> np.ndarray:
    active = states.sum(axis=-1, dtype=float)
    h = states.shape[-1]
    return active * np.log(pi) + (h - active) * np.log1p(-pi)

def normalize_log(log_joint: np.ndarray, notes: Optional[List[str]] = None) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and log normalizers over the last axis via log-sum-exp.

    Rows without a finite normalizer fall back to uniform weights and add a warning note.
    """
    log_norm = logsumexp(log_joint, axis=-1)
    bad = ~np.isfinite(log_norm)
    with np.errstate(invalid="ignore"):
        probs = np.exp(log_joint - log_norm[..., None])
    if np.any(bad):
        probs[bad] = 1.0 / log_joint.shape[-1]
        log.warning("Truncated posterior underflowed; using uniform weights", extra={"points": int(bad.sum())})
        if notes is not None:
            notes.append("posterior_underflow")
    return probs, log_norm

def entropy(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)

def solve_moments(B: np.ndarray, A: np.ndarray, notes: Optional[List[str]] = None, what: str = "W") -> np.ndarray:
    """B A^-1 for a symmetric PSD moment matrix A, ridge-regularized when ill-conditioned."""
    A = 0.5 * (A + A.T)
    try:
        if not np.all(np.isfinite(A)) or np.linalg.cond(A) > _MAX_CONDITION:
            raise LinAlgError("ill-conditioned moment matrix")
        factor = cho_factor(A, lower=True)
    except LinAlgError:
        log.warning("Moment matrix singular; regularizing the solve", extra={"update": what, "ridge": _RIDGE})
        if notes is not None:
            notes.append(f"regularized_{what}")
        try:
            factor = cho_factor(A + _RIDGE * np.eye(A.shape[0]), lower=True)
        except LinAlgError as exc:
            raise NumericalError(f"regularized solve for {what} failed") from exc
    return cho_solve(factor, B.T).T
