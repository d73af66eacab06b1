import numpy as np
import pytest

from errors import InvalidArgumentError
from models import BarsSpec, EMConfig, GMMSpec
from services.em_engine import label_accuracy, run_em
from services.gmm import hard_labels
from services.params import BSCParams, GMMParams, SSParams
from services.synthdata import (
    DATA_FILE,
    GROUND_TRUTH_FILE,
    MANIFEST_FILE,
    STATES_FILE,
    bars_dictionary,
    gen_bars,
    gen_gmm,
    generate,
    load_dataset,
    write_dataset,
)


class TestBars:
    def test_dictionary_layout(self):
        W = bars_dictionary(3)
        assert W.shape == (9, 6)
        np.testing.assert_array_equal(W.sum(axis=0), 3)
        np.testing.assert_array_equal(W[:, 0].reshape(3, 3), [[1, 1, 1], [0, 0, 0], [0, 0, 0]])
        np.testing.assert_array_equal(W[:, 4].reshape(3, 3), [[0, 1, 0], [0, 1, 0], [0, 1, 0]])

    def test_noiseless_bsc_is_a_sum_of_bars(self, rng):
        Y, truth = gen_bars("bsc", 100, 4, 0.3, 0.0, 2.0, 1.0, rng)
        np.testing.assert_array_equal(Y, truth.states @ truth.W.T)
        assert isinstance(truth.params(), BSCParams)
        assert truth.params().sigma2 > 0

    def test_spike_and_slab_truth(self, rng):
        Y, truth = gen_bars("ss", 50, 3, 0.2, 0.0, 2.0, 0.5, rng)
        np.testing.assert_allclose(Y, (truth.states * truth.slabs) @ truth.W.T)
        params = truth.params()
        assert isinstance(params, SSParams)
        np.testing.assert_array_equal(params.mu, 2.0)

    def test_nonlinear_bars_take_the_maximum(self, rng):
        Y, truth = gen_bars("nlss", 50, 3, 0.4, 0.0, 2.0, 0.1, rng)
        sz = truth.states * truth.slabs
        expected = np.max(sz[:, :, None] * truth.W.T[None], axis=1)
        np.testing.assert_allclose(Y, expected)

    def test_sparsity_matches_the_prior(self, rng):
        _, truth = gen_bars("bsc", 2000, 5, 0.2, 2.0, 2.0, 1.0, rng)
        assert truth.states.shape == (2000, 10)
        assert abs(truth.states.sum(axis=1).mean() - 2.0) < 0.15

    def test_invalid_arguments(self, rng):
        with pytest.raises(InvalidArgumentError):
            gen_bars("gmm", 50, 3, 0.2, 1.0, 2.0, 1.0, rng)
        with pytest.raises(InvalidArgumentError):
            gen_bars("bsc", 5, 3, 0.2, 1.0, 2.0, 1.0, rng)


class TestMixtures:
    def test_random_layout_respects_separation(self, rng):
        Y, truth = gen_gmm(400, 4, "random", 6.0, rng)
        assert Y.shape == (400, 2)
        means = truth.params.means
        dists = np.linalg.norm(means[:, None] - means[None], axis=2)
        assert dists[np.triu_indices(4, 1)].min() >= 6.0
        assert set(np.unique(truth.labels)) <= set(range(4))
        assert isinstance(truth.params, GMMParams)

    def test_collinear_layout_is_nearly_on_a_line(self, rng):
        _, truth = gen_gmm(100, 5, "collinear", 8.0, rng)
        centered = truth.params.means - truth.params.means.mean(axis=0)
        singular = np.linalg.svd(centered, compute_uv=False)
        assert singular[1] < 0.1 * singular[0]

    def test_separated_clusters_are_learnable_by_exact_em(self):
        Y, truth = gen_gmm(600, 3, "random", 8.0, np.random.default_rng(4))
        runs = [
            run_em(EMConfig(model_kind="gmm", selection_mode="full_exact", n_latents=3, h_prime=3,
                            n_iterations=40, random_fraction=0.0, optimize_hyperparams=False, seed=seed), Y)
            for seed in (1, 2, 3)
        ]
        best = max(runs, key=lambda r: r.final_free_energy)
        assert label_accuracy(hard_labels(best.params, Y), truth.labels) >= 0.98

    def test_unknown_layout(self, rng):
        with pytest.raises(InvalidArgumentError):
            gen_gmm(10, 2, "spiral", 1.0, rng)


class TestDatasetFiles:
    def test_same_seed_gives_identical_files(self, tmp_path):
        spec = BarsSpec(n_points=60, grid_side=3, seed=9)
        for name in ("a", "b"):
            Y, truth = generate(spec)
            write_dataset(tmp_path / name, spec, Y, truth)
        for filename in (DATA_FILE, STATES_FILE, GROUND_TRUTH_FILE):
            assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()

    def test_write_then_load_bars(self, tmp_path):
        spec = BarsSpec(model_kind="ss", n_points=40, grid_side=2, seed=1)
        Y, truth = generate(spec)
        manifest = write_dataset(tmp_path, spec, Y, truth)
        assert manifest.n_latents == 4
        assert (tmp_path / MANIFEST_FILE).exists()

        dataset = load_dataset(tmp_path)
        np.testing.assert_array_equal(dataset.Y, Y)
        np.testing.assert_array_equal(dataset.ground_truth.states, truth.states)
        np.testing.assert_array_equal(dataset.ground_truth.params.W, truth.W)
        assert dataset.manifest.n_dims == 4

    def test_write_then_load_mixture(self, tmp_path):
        spec = GMMSpec(n_points=30, n_clusters=3, seed=2)
        Y, truth = generate(spec)
        write_dataset(tmp_path, spec, Y, truth)
        dataset = load_dataset(tmp_path)
        np.testing.assert_array_equal(dataset.ground_truth.labels, truth.labels)
        np.testing.assert_array_equal(dataset.ground_truth.states.argmax(axis=1), truth.labels)
        np.testing.assert_allclose(dataset.ground_truth.params.means, truth.params.means)

    def test_bare_csv_has_no_ground_truth(self, tmp_path):
        path = tmp_path / "points.csv"
        np.savetxt(path, np.arange(6.0).reshape(3, 2), delimiter=",")
        dataset = load_dataset(path)
        assert dataset.Y.shape == (3, 2)
        assert dataset.ground_truth is None

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nothing.csv")
