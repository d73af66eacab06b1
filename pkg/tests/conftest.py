from __future__ import annotations

import numpy as np
import pytest

from config import settings
from models import BarsSpec, GMMSpec
from services.synthdata import generate, to_engine_truth


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setattr(settings, "OUTPUT_ROOT", str(root))
    return root


@pytest.fixture
def bars_data():
    """Factory: (Y, engine ground truth) for small bars problems."""
    def make(model_kind="bsc", n_points=200, grid_side=2, pi=0.25, sigma2=0.25, seed=0):
        spec = BarsSpec(model_kind=model_kind, n_points=n_points, grid_side=grid_side, pi=pi,
                        sigma2=sigma2, seed=seed)
        Y, truth = generate(spec)
        return Y, to_engine_truth(truth)
    return make


@pytest.fixture
def gmm_data():
    def make(n_points=300, n_clusters=3, layout="random", separation=8.0, seed=0):
        Y, truth = generate(GMMSpec(n_points=n_points, n_clusters=n_clusters, layout=layout,
                                    separation=separation, seed=seed))
        return Y, to_engine_truth(truth)
    return make
