import numpy as np
import pytest

from errors import InvalidArgumentError
from models import GibbsConfig
from services.latent_models import free_energy, get_model
from services.selection import build_state_sets, full_selection


def _states(n_points, n_latents, h_prime=None):
    h_prime = n_latents if h_prime is None else h_prime
    return build_state_sets(full_selection(n_points, n_latents)[:, :h_prime], n_latents)


class TestGetModel:
    @pytest.mark.parametrize("kind", ["bsc", "ss", "nlss", "gmm"])
    def test_dispatch(self, kind):
        assert get_model(kind).kind == kind

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            get_model("pca")


class TestFreeEnergy:
    @pytest.mark.parametrize("kind,h_prime", [("bsc", 4), ("bsc", 2), ("ss", 4), ("ss", 3)])
    def test_equals_the_log_normalizer_under_the_estep_params(self, bars_data, rng, kind, h_prime):
        Y, truth = bars_data(model_kind=kind, n_points=80)
        model = get_model(kind)
        result = model.e_step(truth.params, Y, _states(len(Y), 4, h_prime), rng)
        value, stderr = free_energy(truth.params, Y, result)
        assert stderr is None
        np.testing.assert_allclose(value, result.free_energy, rtol=1e-10)

    def test_mstep_does_not_decrease_it(self, bars_data, rng):
        Y, truth = bars_data(n_points=150)
        model = get_model("bsc")
        result = model.e_step(truth.params, Y, _states(len(Y), 4), rng)
        updated = model.m_step(result, truth.params, Y, rng)
        before, _ = free_energy(truth.params, Y, result)
        after, _ = free_energy(updated, Y, result)
        assert after >= before - 1e-9 * abs(before)

    def test_mixture(self, gmm_data, rng):
        Y, truth = gmm_data(n_points=90)
        model = get_model("gmm")
        result = model.e_step(truth.params, Y, _states(len(Y), 3), rng)
        value, stderr = free_energy(truth.params, Y, result)
        assert stderr is None
        np.testing.assert_allclose(value, result.free_energy, rtol=1e-10)

    def test_underflowed_mixture_points_still_count(self, gmm_data, rng):
        Y, truth = gmm_data(n_points=30)
        Y = np.vstack([Y, [[1e200, 1e200]]])
        notes = []
        result = get_model("gmm").e_step(truth.params, Y, _states(len(Y), 3, 2), rng, notes=notes)
        assert "responsibility_underflow" in notes
        assert result.free_energy == free_energy(truth.params, Y, result)[0]
        assert result.free_energy == -np.inf

    def test_sampled_estimate_is_passed_through(self, bars_data, rng):
        Y, truth = bars_data(model_kind="nlss", n_points=30)
        model = get_model("nlss", GibbsConfig(n_samples=20, burn_in=5))
        result = model.e_step(truth.params, Y, _states(len(Y), 4, 2), rng)
        value, stderr = free_energy(truth.params, Y, result)
        assert value == result.free_energy
        assert stderr == result.free_energy_stderr
        assert np.isfinite(value)

    def test_kind_mismatch(self, bars_data, gmm_data, rng):
        Y, truth = bars_data(n_points=40)
        result = get_model("bsc").e_step(truth.params, Y, _states(len(Y), 4), rng)
        _, mixture = gmm_data(n_points=40)
        with pytest.raises(InvalidArgumentError):
            free_energy(mixture.params, Y, result)
