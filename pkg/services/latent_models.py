# services/latent_models.py
"""Uniform E-step / M-step interface over the four generative models."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol

import numpy as np

from errors import InvalidArgumentError
from models import GibbsConfig
from services.bsc import bsc_estep, bsc_log_joints, bsc_mstep
from services.gmm import gmm_estep, gmm_free_energy, gmm_mstep
from services.nlss import GibbsChain, nlss_expectations, nlss_gibbs_estep, nlss_mstep
from services.params import BSCParams, GMMParams, ModelParams, NLSSParams, SSParams, kind_of
from services.posterior import TruncatedPosterior, chunk_slices, entropy
from services.selection import StateSet
from services.spike_slab import ss_estep, ss_log_joints, ss_mstep

# ----------------------------
# Domain objects
# ----------------------------

@dataclass
class EStepResult:
    kind: str
    targets: np.ndarray                      # N x H: <s> (or responsibilities), the next GP targets
    free_energy: float
    stats: Any
    posterior: Optional[TruncatedPosterior] = None
    responsibilities: Optional[np.ndarray] = None
    free_energy_stderr: Optional[float] = None
    chain: Optional[GibbsChain] = None
    diagnostics: Dict[str, float] = field(default_factory=dict)

# ----------------------------
# Model interface
# ----------------------------

class LatentModel(Protocol):
    kind: str

    def e_step(self, params: ModelParams, Y: np.ndarray, states: StateSet, rng: np.random.Generator,
               chain: Optional[GibbsChain] = None, notes: Optional[List[str]] = None) -> EStepResult: ...

    def m_step(self, result: EStepResult, params: ModelParams, Y: np.ndarray, rng: np.random.Generator,
               notes: Optional[List[str]] = None) -> ModelParams: ...

class BinarySparseCoding:
    kind = "bsc"

    def e_step(self, params, Y, states, rng, chain=None, notes=None) -> EStepResult:
        posterior, exp_s, stats = bsc_estep(params, Y, states.states, notes)
        return EStepResult(kind=self.kind, targets=exp_s, free_energy=float(posterior.log_norm.sum()),
                           stats=stats, posterior=posterior)

    def m_step(self, result, params, Y, rng, notes=None) -> BSCParams:
        return bsc_mstep(result.stats, notes)

class SpikeAndSlab:
    kind = "ss"

    def e_step(self, params, Y, states, rng, chain=None, notes=None) -> EStepResult:
        posterior, exp_s, _, stats = ss_estep(params, Y, states.states, notes)
        return EStepResult(kind=self.kind, targets=exp_s, free_energy=float(posterior.log_norm.sum()),
                           stats=stats, posterior=posterior)

    def m_step(self, result, params, Y, rng, notes=None) -> SSParams:
        return ss_mstep(result.stats, params, notes)

class NonlinearSpikeAndSlab:
    kind = "nlss"

    def __init__(self, gibbs: Optional[GibbsConfig] = None) -> None:
        self.gibbs = gibbs or GibbsConfig()

    def e_step(self, params, Y, states, rng, chain=None, notes=None) -> EStepResult:
        stats = nlss_gibbs_estep(
            params, Y, states.states, self.gibbs.n_samples, self.gibbs.burn_in, rng,
            chain=chain,
            target_acceptance=self.gibbs.target_acceptance,
            initial_scale=self.gibbs.initial_scale,
        )
        exp_s, _ = nlss_expectations(stats)
        return EStepResult(kind=self.kind, targets=exp_s, free_energy=stats.free_energy, stats=stats,
                           free_energy_stderr=stats.free_energy_stderr, chain=stats.chain,
                           diagnostics=dict(stats.diagnostics))

    def m_step(self, result, params, Y, rng, notes=None) -> NLSSParams:
        return nlss_mstep(result.stats, params, notes)

class GaussianMixture:
    kind = "gmm"

    def e_step(self, params, Y, states, rng, chain=None, notes=None) -> EStepResult:
        if states.selected is None:
            raise InvalidArgumentError("the mixture needs the selected cluster indices")
        resp, _ = gmm_estep(params, Y, states.selected, notes)
        return EStepResult(kind=self.kind, targets=resp, free_energy=gmm_free_energy(params, Y, resp),
                           stats=resp, responsibilities=resp)

    def m_step(self, result, params, Y, rng, notes=None) -> GMMParams:
        return gmm_mstep(result.responsibilities, Y, rng, notes)

def get_model(kind: str, gibbs: Optional[GibbsConfig] = None) -> LatentModel:
    if kind == "bsc":
        return BinarySparseCoding()
    if kind == "ss":
        return SpikeAndSlab()
    if kind == "nlss":
        return NonlinearSpikeAndSlab(gibbs)
    if kind == "gmm":
        return GaussianMixture()
    raise InvalidArgumentError(f"unknown model kind: {kind!r}")

# ----------------------------
# Free energy
# ----------------------------

def free_energy(params: ModelParams, Y: np.ndarray, result: EStepResult) -> tuple[float, Optional[float]]:
    """sum_n E_q[log p(y_n, s)] + H(q_n) for the E-step's posteriors under `params`.

    Exact for BSC, SS and the mixture. For NLSS the sampled estimate and its standard error are
    returned; they refer to the parameters the chain ran with.
    """
    kind = kind_of(params)
    if kind != result.kind:
        raise InvalidArgumentError(f"posteriors from a {result.kind!r} E-step do not fit {kind!r} parameters")
    if kind == "nlss":
        return result.free_energy, result.free_energy_stderr
    if kind == "gmm":
        return gmm_free_energy(params, Y, result.responsibilities), None
    log_joints = bsc_log_joints if kind == "bsc" else ss_log_joints
    posterior = result.posterior
    Y = np.asarray(Y, dtype=float)
    n, n_states, h = posterior.states.shape
    total = 0.0
    for sl in chunk_slices(n, n_states * (3 * h * h + Y.shape[1])):
        lj = log_joints(params, Y[sl], posterior.states[sl])
        q = posterior.probs[sl]
        total += float(np.where(q > 0, q * lj, 0.0).sum() + entropy(q).sum())
    return total, None
