# services/synthdata.py
"""
Seeded ground-truth generators: the bars dictionary-recovery benchmark (BSC, SS and
NLSS variants) and 2-D Gaussian mixtures with random or roughly collinear means.

A dataset directory holds data.csv (N x D), ground_truth.json, states.csv (true
binary states, or one label column for mixtures) and manifest.json.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from errors import ConfigError, InvalidArgumentError
from models import BarsSpec, DatasetManifest, GMMSpec, GroundTruthRecord
from services.bsc import SIGMA2_FLOOR
from services.em_engine import GroundTruth
from services.nlss import nlss_means
from services.params import BSCParams, GMMParams, ModelParams, NLSSParams, SSParams, params_from_record, params_to_record

log = logging.getLogger("synthdata")

DATA_FILE = "data.csv"
GROUND_TRUTH_FILE = "ground_truth.json"
STATES_FILE = "states.csv"
MANIFEST_FILE = "manifest.json"

_MAX_REJECTIONS = 10_000

# ----------------------------
# Ground truth objects
# ----------------------------

@dataclass(frozen=True)
class BarsGroundTruth:
    model_kind: str
    W: np.ndarray                  # D x H, unit-amplitude bars
    pi: float
    sigma2: float
    states: np.ndarray             # N x H
    mu: Optional[float] = None
    psi: Optional[float] = None
    slabs: Optional[np.ndarray] = None

    def params(self) -> ModelParams:
        """Generating parameters; a noiseless generator is reported with the noise floor."""
        sigma2 = max(self.sigma2, SIGMA2_FLOOR)
        h = self.W.shape[1]
        if self.model_kind == "bsc":
            return BSCParams(W=self.W, sigma2=sigma2, pi=self.pi)
        cls = NLSSParams if self.model_kind == "nlss" else SSParams
        return cls(W=self.W, sigma2=sigma2, pi=self.pi, mu=np.full(h, self.mu), psi=np.full(h, self.psi))

@dataclass(frozen=True)
class GMMGroundTruth:
    params: GMMParams
    labels: np.ndarray             # N

@dataclass(frozen=True)
class Dataset:
    Y: np.ndarray
    manifest: Optional[DatasetManifest] = None
    ground_truth: Optional[GroundTruth] = None
    record: Optional[GroundTruthRecord] = None

# ----------------------------
# Bars
# ----------------------------

def bars_dictionary(grid_side: int) -> np.ndarray:
    """All horizontal bars, then all vertical bars, on a grid_side x grid_side image (row-major pixels)."""
    if grid_side < 1:
        raise InvalidArgumentError(f"grid_side must be >= 1, got {grid_side}")
    d = grid_side * grid_side
    W = np.zeros((d, 2 * grid_side))
    pixels = np.arange(d).reshape(grid_side, grid_side)
    for r in range(grid_side):
        W[pixels[r, :], r] = 1.0
        W[pixels[:, r], grid_side + r] = 1.0
    return W

def gen_bars(
    model_kind: str,
    n_points: int,
    grid_side: int,
    pi: float,
    sigma2: float,
    slab_mu: float,
    slab_psi: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, BarsGroundTruth]:
    if model_kind not in ("bsc", "ss", "nlss"):
        raise InvalidArgumentError(f"bars data is defined for bsc, ss and nlss, got {model_kind!r}")
    W = bars_dictionary(grid_side)
    d, h = W.shape
    if h > n_points:
        raise InvalidArgumentError(f"n_points={n_points} is smaller than H={h}")
    if sigma2 < 0:
        raise InvalidArgumentError(f"sigma2 must be >= 0, got {sigma2}")

    states = (rng.random((n_points, h)) < pi).astype(np.uint8)
    slabs = None
    if model_kind == "bsc":
        means = states @ W.T
    else:
        slabs = slab_mu + np.sqrt(slab_psi) * rng.standard_normal((n_points, h))
        sz = states * slabs
        means = sz @ W.T if model_kind == "ss" else nlss_means(W, sz)
    Y = means + np.sqrt(sigma2) * rng.standard_normal((n_points, d))

    truth = BarsGroundTruth(
        model_kind=model_kind,
        W=W,
        pi=pi,
        sigma2=sigma2,
        states=states,
        mu=None if model_kind == "bsc" else slab_mu,
        psi=None if model_kind == "bsc" else slab_psi,
        slabs=slabs,
    )
    log.info("Bars data generated", extra={
        "model_kind": model_kind, "n_points": n_points, "D": d, "H": h,
        "mean_active": float(states.sum(axis=1).mean()),
    })
    return Y, truth

# ----------------------------
# Gaussian mixtures
# ----------------------------

def _random_means(n_clusters: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    box = separation * n_clusters
    means = []
    attempts = 0
    while len(means) < n_clusters:
        candidate = rng.uniform(0.0, box, size=2)
        attempts += 1
        if all(np.linalg.norm(candidate - m) >= separation for m in means):
            means.append(candidate)
        elif attempts > _MAX_REJECTIONS:
            raise InvalidArgumentError(f"could not place {n_clusters} means {separation} apart")
    return np.array(means)

def _collinear_means(n_clusters: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(0.0, np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])
    normal = np.array([-direction[1], direction[0]])
    origin = rng.uniform(0.0, separation * n_clusters, size=2)
    jitter = np.clip(rng.normal(0.0, 0.1 * separation, size=n_clusters), -0.05 * separation, 0.05 * separation)
    steps = np.arange(n_clusters) * separation
    return origin + steps[:, None] * direction + jitter[:, None] * normal

def gen_gmm(
    n_points: int,
    n_clusters: int,
    layout: str,
    separation: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, GMMGroundTruth]:
    """2-D mixture, equal weights, unit isotropic variances."""
    if n_clusters < 1:
        raise InvalidArgumentError(f"n_clusters must be >= 1, got {n_clusters}")
    if separation <= 0:
        raise InvalidArgumentError(f"separation must be positive, got {separation}")
    if layout == "random":
        means = _random_means(n_clusters, separation, rng)
    elif layout == "collinear":
        means = _collinear_means(n_clusters, separation, rng)
    else:
        raise InvalidArgumentError(f"unknown layout {layout!r}")
    labels = rng.integers(n_clusters, size=n_points)
    Y = means[labels] + rng.standard_normal((n_points, 2))
    params = GMMParams(means=means, variances=np.ones(n_clusters), weights=np.full(n_clusters, 1.0 / n_clusters))
    log.info("Mixture data generated", extra={"layout": layout, "n_points": n_points, "C": n_clusters})
    return Y, GMMGroundTruth(params=params, labels=labels)

# ----------------------------
# Dataset directories
# ----------------------------

def generate(spec: Union[BarsSpec, GMMSpec]) -> tuple[np.ndarray, Union[BarsGroundTruth, GMMGroundTruth]]:
    rng = np.random.default_rng(spec.seed)
    if isinstance(spec, BarsSpec):
        return gen_bars(spec.model_kind, spec.n_points, spec.grid_side, spec.pi, spec.sigma2,
                        spec.slab_mu, spec.slab_psi, rng)
    return gen_gmm(spec.n_points, spec.n_clusters, spec.layout, spec.separation, rng)

def to_engine_truth(truth: Union[BarsGroundTruth, GMMGroundTruth]) -> GroundTruth:
    if isinstance(truth, GMMGroundTruth):
        c = truth.params.n_latents
        return GroundTruth(params=truth.params, states=np.eye(c, dtype=np.uint8)[truth.labels], labels=truth.labels)
    return GroundTruth(params=truth.params(), states=truth.states)

def write_dataset(
    out_dir: Path,
    spec: Union[BarsSpec, GMMSpec],
    Y: np.ndarray,
    truth: Union[BarsGroundTruth, GMMGroundTruth],
) -> DatasetManifest:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    np.savetxt(out_dir / DATA_FILE, Y, delimiter=",", fmt="%.17g")
    if isinstance(truth, GMMGroundTruth):
        params = truth.params
        np.savetxt(out_dir / STATES_FILE, truth.labels[:, None], delimiter=",", fmt="%d")
        mean_active = None
        n_latents = params.n_latents
    else:
        params = truth.params()
        np.savetxt(out_dir / STATES_FILE, truth.states, delimiter=",", fmt="%d")
        mean_active = float(truth.states.sum(axis=1).mean())
        n_latents = truth.W.shape[1]

    spec_dict = spec.model_dump(mode="json")
    record = GroundTruthRecord(kind=spec.kind, spec=spec_dict, params=params_to_record(params), mean_active=mean_active)
    (out_dir / GROUND_TRUTH_FILE).write_text(record.model_dump_json(indent=2), encoding="utf-8")

    manifest = DatasetManifest(
        kind=spec.kind,
        seed=spec.seed,
        n_points=int(Y.shape[0]),
        n_dims=int(Y.shape[1]),
        n_latents=n_latents,
        files=[DATA_FILE, GROUND_TRUTH_FILE, STATES_FILE, MANIFEST_FILE],
        spec=spec_dict,
    )
    (out_dir / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    log.info("Dataset written", extra={"path": str(out_dir), "n_points": manifest.n_points})
    return manifest

def load_dataset(path: Path) -> Dataset:
    """Read a dataset directory (or a bare CSV file without ground truth)."""
    path = Path(path)
    data_path = path / DATA_FILE if path.is_dir() else path
    if not data_path.exists():
        raise FileNotFoundError(f"dataset file not found: {data_path}")
    Y = np.loadtxt(data_path, delimiter=",", ndmin=2)
    if not path.is_dir():
        return Dataset(Y=Y)

    manifest = None
    if (path / MANIFEST_FILE).exists():
        manifest = DatasetManifest.model_validate_json((path / MANIFEST_FILE).read_text(encoding="utf-8"))
    if not (path / GROUND_TRUTH_FILE).exists():
        return Dataset(Y=Y, manifest=manifest)

    record = GroundTruthRecord.model_validate_json((path / GROUND_TRUTH_FILE).read_text(encoding="utf-8"))
    params = params_from_record(record.params)
    states = np.loadtxt(path / STATES_FILE, delimiter=",", ndmin=2).astype(int)
    if states.shape[0] != Y.shape[0]:
        raise ConfigError(f"{path / STATES_FILE} has {states.shape[0]} rows, data has {Y.shape[0]}")
    if record.kind == "gmm":
        labels = states[:, 0]
        truth = GroundTruth(params=params, states=np.eye(params.n_latents, dtype=np.uint8)[labels], labels=labels)
    else:
        truth = GroundTruth(params=params, states=states.astype(np.uint8))
    return Dataset(Y=Y, manifest=manifest, ground_truth=truth, record=record)
