# services/params.py
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Union

import numpy as np

from errors import InvalidArgumentError
from models import ParamsRecord

# ----------------------------
# Parameter sets
# ----------------------------

@dataclass(frozen=True)
class BSCParams:
    W: np.ndarray          # D x H
    sigma2: float
    pi: float

    def __post_init__(self) -> None:
        if not self.sigma2 > 0:
            raise InvalidArgumentError(f"sigma2 must be positive, got {self.sigma2}")
        if not 0 < self.pi < 1:
            raise InvalidArgumentError(f"pi must lie in (0, 1), got {self.pi}")

    @property
    def n_latents(self) -> int:
        return self.W.shape[1]

@dataclass(frozen=True)
class SSParams:
    W: np.ndarray          # D x H
    sigma2: float
    pi: float
    mu: np.ndarray         # H slab means
    psi: np.ndarray        # H slab variances (diagonal)

    def __post_init__(self) -> None:
        if not self.sigma2 > 0:
            raise InvalidArgumentError(f"sigma2 must be positive, got {self.sigma2}")
        if not 0 < self.pi < 1:
            raise InvalidArgumentError(f"pi must lie in (0, 1), got {self.pi}")
        if np.any(np.asarray(self.psi) <= 0):
            raise InvalidArgumentError("slab variances psi must be positive")

    @property
    def n_latents(self) -> int:
        return self.W.shape[1]

@dataclass(frozen=True)
class NLSSParams(SSParams):
    """Same parameters as SSParams; the observation mean is max_h s_h z_h W_dh per dimension."""

@dataclass(frozen=True)
class GMMParams:
    means: np.ndarray      # C x D
    variances: np.ndarray  # C isotropic variances
    weights: np.ndarray    # C mixing proportions

    def __post_init__(self) -> None:
        w = np.asarray(self.weights)
        if np.any(w <= 0) or abs(float(w.sum()) - 1.0) > 1e-10:
            raise InvalidArgumentError("mixture weights must be positive and sum to 1")
        if np.any(np.asarray(self.variances) <= 0):
            raise InvalidArgumentError("cluster variances must be positive")

    @property
    def n_latents(self) -> int:
        return self.means.shape[0]

ModelParams = Union[BSCParams, SSParams, NLSSParams, GMMParams]

_KIND_BY_TYPE = {BSCParams: "bsc", SSParams: "ss", NLSSParams: "nlss", GMMParams: "gmm"}
_TYPE_BY_KIND = {v: k for k, v in _KIND_BY_TYPE.items()}

def kind_of(params: ModelParams) -> str:
    return _KIND_BY_TYPE[type(params)]

# ----------------------------
# JSON records
# ----------------------------

def params_to_record(params: ModelParams) -> ParamsRecord:
    """Flatten to row-major arrays; scalars become length-1 arrays."""
    arrays: Dict[str, list] = {}
    dims: Dict[str, int] = {}
    for f in fields(params):
        value = np.asarray(getattr(params, f.name), dtype=float)
        arrays[f.name] = value.ravel(order="C").tolist()
    if isinstance(params, GMMParams):
        dims["C"], dims["D"] = params.means.shape
    else:
        dims["D"], dims["H"] = params.W.shape
    return ParamsRecord(kind=kind_of(params), dims=dims, arrays=arrays)

def params_from_record(record: ParamsRecord) -> ModelParams:
    cls = _TYPE_BY_KIND[record.kind]
    a = {k: np.asarray(v, dtype=float) for k, v in record.arrays.items()}
    if cls is GMMParams:
        c, d = record.dims["C"], record.dims["D"]
        return GMMParams(means=a["means"].reshape(c, d), variances=a["variances"], weights=a["weights"])
    d, h = record.dims["D"], record.dims["H"]
    common = dict(W=a["W"].reshape(d, h), sigma2=float(a["sigma2"][0]), pi=float(a["pi"][0]))
    if cls is BSCParams:
        return BSCParams(**common)
    return cls(**common, mu=a["mu"], psi=a["psi"])

def params_to_arrays(params: ModelParams) -> Dict[str, np.ndarray]:
    """Exact binary form for checkpoints."""
    return {f.name: np.asarray(getattr(params, f.name), dtype=float) for f in fields(params)}

def params_from_arrays(kind: str, arrays: Dict[str, np.ndarray]) -> ModelParams:
    cls = _TYPE_BY_KIND[kind]
    values = {}
    for f in fields(cls):
        value = np.asarray(arrays[f.name], dtype=float)
        values[f.name] = float(value) if value.ndim == 0 else value
    return cls(**values)
