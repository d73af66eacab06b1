from __future__ import annotations

import math
from datetime import datetime, timezone
from typing import Annotated, ClassVar, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_validator,
    model_validator,
    conint,
    confloat,
)

ModelKind = Literal["bsc", "ss", "nlss", "gmm"]
SelectionMode = Literal["gp_select", "cosine", "singleton_likelihood", "full_exact"]

NOISE_FLOOR = 1e-8

# -----------------------------
# Kernel hyperparameters
# -----------------------------

class KernelHyperparams(BaseModel):
    """Composition kernel parameters: RBF + linear + bias, plus white noise on the Gram diagonal.

    A variance of exactly 0 switches that component off; switched-off components
    stay off during hyperparameter optimization.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    NAMES: ClassVar[Tuple[str, ...]] = (
        "rbf_variance",
        "rbf_lengthscale",
        "linear_variance",
        "bias_variance",
        "noise_variance",
    )

    rbf_variance: confloat(ge=0) = 1.0
    rbf_lengthscale: confloat(gt=0) = 3.0
    linear_variance: confloat(ge=0) = 0.1
    bias_variance: confloat(ge=0) = 0.1
    noise_variance: confloat(ge=0) = 0.1

    @field_validator("*")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("kernel hyperparameters must be finite")
        return float(v)

    @field_validator("noise_variance")
    @classmethod
    def _noise_floor(cls, v: float) -> float:
        return max(v, NOISE_FLOOR)

    @classmethod
    def linear(cls, linear_variance: float = 0.1, noise_variance: float = 0.1) -> "KernelHyperparams":
        return cls(rbf_variance=0.0, linear_variance=linear_variance, bias_variance=0.0,
                   noise_variance=noise_variance)

    @classmethod
    def rbf(cls, rbf_variance: float = 1.0, rbf_lengthscale: float = 3.0,
            noise_variance: float = 0.1) -> "KernelHyperparams":
        return cls(rbf_variance=rbf_variance, rbf_lengthscale=rbf_lengthscale, linear_variance=0.0,
                   bias_variance=0.0, noise_variance=noise_variance)

    @classmethod
    def composition(cls, **overrides: float) -> "KernelHyperparams":
        return cls(**overrides)

    def to_record(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in self.NAMES}

    def active_mask(self) -> np.ndarray:
        """Which parameters are free in log space. The lengthscale is free only while the RBF part is on."""
        return np.array([
            self.rbf_variance > 0,
            self.rbf_variance > 0,
            self.linear_variance > 0,
            self.bias_variance > 0,
            True,
        ])

    def log_vector(self) -> np.ndarray:
        values = np.array([getattr(self, name) for name in self.NAMES], dtype=float)
        with np.errstate(divide="ignore"):
            return np.log(values)

    def with_log_vector(self, log_values: np.ndarray) -> "KernelHyperparams":
        """New hyperparameters from log values; switched-off components keep their value."""
        mask = self.active_mask()
        current = self.to_record()
        record = {
            name: float(np.exp(log_values[i])) if mask[i] else current[name]
            for i, name in enumerate(self.NAMES)
        }
        return KernelHyperparams(**record)


class GibbsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    n_samples: conint(ge=1) = 50
    burn_in: conint(ge=0) = 20
    target_acceptance: confloat(gt=0, lt=1) = 0.44
    initial_scale: confloat(gt=0) = 0.3


# -----------------------------
# EM configuration
# -----------------------------

class EMConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model_kind: ModelKind = "bsc"
    selection_mode: SelectionMode = "gp_select"
    n_latents: conint(ge=1) = 10
    n_iterations: conint(ge=1) = 100
    hyper_update_every: conint(ge=1) = 10
    optimize_hyperparams: bool = True
    h_prime: conint(ge=1) = 5
    random_fraction: confloat(ge=0, lt=1) = 0.1
    kernel: KernelHyperparams = Field(default_factory=KernelHyperparams)
    ichol_rank: Optional[conint(ge=1)] = None
    ichol_tol: confloat(ge=0) = 1e-10
    gibbs: GibbsConfig = Field(default_factory=GibbsConfig)
    seed: conint(ge=0, lt=2**64) = 0
    max_grad_steps: conint(ge=1) = 20
    include_singletons: bool = False
    standardize_inputs: bool = False
    checkpoint_every: conint(ge=1) = 10

    @model_validator(mode="after")
    def _validate_combination(self) -> "EMConfig":
        if self.h_prime > self.n_latents:
            raise ValueError(f"h_prime={self.h_prime} exceeds n_latents={self.n_latents}")
        if self.selection_mode == "singleton_likelihood" and self.model_kind != "ss":
            raise ValueError("selection_mode 'singleton_likelihood' requires model_kind 'ss'")
        if self.selection_mode == "cosine" and self.model_kind == "gmm":
            raise ValueError("selection_mode 'cosine' is defined for the sparse coding models only")
        if self.include_singletons and self.model_kind == "gmm":
            raise ValueError("include_singletons has no meaning for the mixture model")
        return self

    @property
    def uses_gp(self) -> bool:
        return self.selection_mode == "gp_select"


# -----------------------------
# Dataset generation specs
# -----------------------------

class BarsSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["bars"] = "bars"
    model_kind: Literal["bsc", "ss", "nlss"] = "bsc"
    n_points: conint(ge=1) = 2000
    grid_side: conint(ge=1) = 5
    pi: confloat(gt=0, lt=1) = 0.2
    sigma2: confloat(ge=0) = 2.0
    slab_mu: float = 2.0
    slab_psi: confloat(gt=0) = 1.0
    seed: conint(ge=0, lt=2**64) = 0

    @model_validator(mode="after")
    def _enough_points(self) -> "BarsSpec":
        if 2 * self.grid_side > self.n_points:
            raise ValueError(f"n_points={self.n_points} is smaller than H={2 * self.grid_side}")
        return self


class GMMSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["gmm"] = "gmm"
    n_points: conint(ge=1) = 600
    n_clusters: conint(ge=1) = 3
    layout: Literal["random", "collinear"] = "random"
    separation: confloat(gt=0) = 8.0
    seed: conint(ge=0, lt=2**64) = 0


GeneratorSpec = Annotated[Union[BarsSpec, GMMSpec], Field(discriminator="kind")]


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    path: Optional[str] = None
    generator: Optional[GeneratorSpec] = None

    @model_validator(mode="after")
    def _exactly_one(self) -> "DatasetConfig":
        if (self.path is None) == (self.generator is None):
            raise ValueError("dataset needs exactly one of 'path' or 'generator'")
        return self


class GenerateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    generator: GeneratorSpec
    output_dir: Optional[str] = None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    name: str = "experiment"
    em: EMConfig = Field(default_factory=EMConfig)
    dataset: DatasetConfig
    repetitions: conint(ge=1) = 1
    init: Literal["random", "ground_truth"] = "random"
    output_dir: Optional[str] = None


# -----------------------------
# Persisted records
# -----------------------------

class Meta(BaseModel):
    model_config = ConfigDict(extra="forbid")
    schema_version: str = "1.0.0"
    generated_at_iso: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    generator: str = "gpselect@1.0"


class ParamsRecord(BaseModel):
    """Model parameters as flat row-major arrays with explicit dims."""
    model_config = ConfigDict(extra="forbid")
    kind: ModelKind
    dims: Dict[str, int]
    arrays: Dict[str, List[float]]
    schema_version: str = "1.0.0"


class GroundTruthRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["bars", "gmm"]
    spec: Dict[str, object]
    params: ParamsRecord
    mean_active: Optional[float] = None


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["bars", "gmm"]
    seed: int
    n_points: int
    n_dims: int
    n_latents: int
    files: List[str]
    spec: Dict[str, object]
    meta: Meta = Field(default_factory=Meta)


class RecoveryReport(BaseModel):
    model_config = ConfigDict(extra="forbid")
    threshold: float = 0.95
    best_cosines: List[float]
    matches: List[Tuple[int, int]] = Field(default_factory=list, description="(true column, learned column)")
    unmatched: List[int] = Field(default_factory=list)
    success: bool


class RunSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")
    repetition: conint(ge=0)
    seed: int
    run_dir: str = Field(description="relative to the experiment directory")
    iterations: conint(ge=0)
    final_free_energy: Optional[float] = None
    success: Optional[bool] = None
    score: Optional[float] = None
    kernel_dominance: Optional[float] = None
    elapsed_s: Optional[float] = None
    error: Optional[str] = None


class ExperimentSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")
    name: str
    model_kind: ModelKind
    selection_mode: SelectionMode
    dataset: str = Field(description="sha256 prefix of the data matrix")
    dataset_dir: Optional[str] = None
    runs: List[RunSummary] = Field(default_factory=list)
    success_count: conint(ge=0) = 0
    meta: Meta = Field(default_factory=Meta)

    @field_validator("runs", mode="before")
    @classmethod
    def _none_to_list(cls, v):
        return [] if v is None else v


class EvaluationReport(BaseModel):
    model_config = ConfigDict(extra="forbid")
    run_dir: str
    dataset_dir: str
    recovery: Optional[RecoveryReport] = None
    label_accuracy: Optional[float] = None
    hit_rate_per_iteration: List[float] = Field(default_factory=list)
    final_free_energy: Optional[float] = None
    meta: Meta = Field(default_factory=Meta)


class ComparisonEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")
    name: str
    source: str
    selection_mode: SelectionMode
    n_runs: conint(ge=0)
    success_count: conint(ge=0)
    iterations: List[int]
    mean_free_energy: List[Optional[float]] = Field(description="mean over repetitions, aligned by iteration")
    final_free_energy: Optional[float] = None
    phase_seconds: Dict[str, float] = Field(default_factory=dict, description="mean per-run total per phase")
    max_abs_difference: float = Field(0.0, description="max |mean curve - reference curve| over shared iterations")


class ComparisonReport(BaseModel):
    model_config = ConfigDict(extra="forbid")
    model_kind: ModelKind
    dataset: str
    reference: str
    entries: List[ComparisonEntry]
    meta: Meta = Field(default_factory=Meta)
