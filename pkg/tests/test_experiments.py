import csv
import json

import numpy as np
import pytest
import yaml

import main as cli
from errors import ConfigError, NumericalError
from models import ExperimentConfig, GenerateConfig
from services.em_engine import PARAMS_FILE, TRACE_FILE, read_trace
from services.experiments import (
    COMPARISON_CSV,
    COMPARISON_JSON,
    DATASET_SUBDIR,
    REPORT_FILE,
    RESOLVED_CONFIG_FILE,
    SUMMARY_FILE,
    apply_overrides,
    cmd_compare,
    cmd_evaluate,
    cmd_generate,
    cmd_run,
    load_config,
    load_yaml,
    validate_config,
)
from services.synthdata import DATA_FILE, load_dataset


def _bars_generator(**overrides):
    spec = {"kind": "bars", "model_kind": "bsc", "n_points": 120, "grid_side": 2, "pi": 0.25,
            "sigma2": 0.25, "seed": 3}
    spec.update(overrides)
    return spec


def _experiment(**em_overrides):
    em = {"model_kind": "bsc", "selection_mode": "cosine", "n_latents": 4, "h_prime": 2,
          "n_iterations": 3, "random_fraction": 0.0, "seed": 5}
    em.update(em_overrides)
    return {"name": "tiny", "repetitions": 2, "em": em, "dataset": {"generator": _bars_generator()}}


def _write_yaml(path, raw):
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    return path


def _free_energies(run_dir):
    return [rec["free_energy"] for rec in read_trace(run_dir / TRACE_FILE)]


class TestConfigLoading:
    def test_overrides_are_applied_to_a_copy(self):
        raw = {"em": {"h_prime": 5}}
        out = apply_overrides(raw, ["em.h_prime=3", "em.kernel.rbf_variance=0.5", "name=x", "em.optimize_hyperparams=false"])
        assert out == {"em": {"h_prime": 3, "kernel": {"rbf_variance": 0.5}, "optimize_hyperparams": False}, "name": "x"}
        assert raw == {"em": {"h_prime": 5}}

    @pytest.mark.parametrize("item", ["no_equals_sign", "=3", "em.h_prime.deeper=1"])
    def test_malformed_overrides(self, item):
        with pytest.raises(ConfigError):
            apply_overrides({"em": {"h_prime": 5}}, [item])

    @pytest.mark.parametrize("override,field", [
        ("em.n_iterations=0", "em.n_iterations"),
        ("em.bogus=1", "em.bogus"),
        ("em.random_fraction=1.5", "em.random_fraction"),
        ("em.model_kind=pca", "em.model_kind"),
    ])
    def test_validation_errors_name_the_field(self, override, field):
        with pytest.raises(ConfigError) as info:
            validate_config(ExperimentConfig, apply_overrides(_experiment(), [override]))
        assert f"'{field}'" in info.value.detail

    def test_inconsistent_combination_is_rejected(self):
        with pytest.raises(ConfigError):
            validate_config(ExperimentConfig, apply_overrides(_experiment(), ["em.h_prime=9"]))

    def test_yaml_file_errors(self, tmp_path):
        with pytest.raises(OSError):
            load_yaml(tmp_path / "missing.yml")
        (tmp_path / "list.yml").write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_yaml(tmp_path / "list.yml")
        (tmp_path / "broken.yml").write_text("em: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_yaml(tmp_path / "broken.yml")

    def test_shipped_configs_validate(self):
        from pathlib import Path
        root = Path(__file__).resolve().parent.parent / "data"
        for path in sorted((root / "experiments").glob("*.yml")):
            load_config(ExperimentConfig, path)
        for path in sorted((root / "datasets").glob("*.yml")):
            load_config(GenerateConfig, path)


class TestGenerate:
    def test_writes_a_dataset_directory(self, tmp_path):
        config = GenerateConfig.model_validate({"generator": _bars_generator()})
        out = cmd_generate(config, output=tmp_path / "ds")
        assert (out / DATA_FILE).exists()
        assert (out / RESOLVED_CONFIG_FILE).exists()
        assert load_dataset(out).Y.shape == (120, 4)

    def test_refuses_a_non_empty_directory_without_force(self, tmp_path):
        config = GenerateConfig.model_validate({"generator": _bars_generator()})
        cmd_generate(config, output=tmp_path / "ds")
        with pytest.raises(ConfigError):
            cmd_generate(config, output=tmp_path / "ds")
        cmd_generate(config, output=tmp_path / "ds", force=True)

    def test_default_location_under_the_output_root(self, output_root):
        config = GenerateConfig.model_validate({"generator": _bars_generator(seed=8)})
        assert cmd_generate(config) == output_root / "datasets" / "bars-8"


class TestRun:
    def test_two_repetitions(self, tmp_path):
        config = validate_config(ExperimentConfig, _experiment())
        out = tmp_path / "exp"
        summary = cmd_run(config, output=out, jobs=2)

        assert [r.repetition for r in summary.runs] == [0, 1]
        assert [r.seed for r in summary.runs] == [5, 6]
        for run in summary.runs:
            assert (out / run.run_dir / PARAMS_FILE).exists()
            assert len(read_trace(out / run.run_dir / TRACE_FILE)) == 3
            assert run.iterations == 3
            assert run.error is None
        assert (out / DATASET_SUBDIR / DATA_FILE).exists()
        assert summary.dataset.startswith("sha256:")

        stored = json.loads((out / SUMMARY_FILE).read_text(encoding="utf-8"))
        assert stored["name"] == "tiny"
        resolved = yaml.safe_load((out / RESOLVED_CONFIG_FILE).read_text(encoding="utf-8"))
        assert resolved["em"]["h_prime"] == 2

        with pytest.raises(ConfigError):
            cmd_run(config, output=out)

    def test_mixture_data_for_a_sparse_coding_model(self, tmp_path):
        raw = _experiment()
        raw["dataset"] = {"generator": {"kind": "gmm", "n_points": 60, "n_clusters": 3, "seed": 1}}
        with pytest.raises(ConfigError):
            cmd_run(validate_config(ExperimentConfig, raw), output=tmp_path / "exp")

    def test_data_columns_must_match_the_ground_truth(self, tmp_path):
        config = GenerateConfig.model_validate({"generator": _bars_generator()})
        ds = cmd_generate(config, output=tmp_path / "ds")
        Y = np.loadtxt(ds / DATA_FILE, delimiter=",")
        np.savetxt(ds / DATA_FILE, Y[:, :3], delimiter=",")
        raw = _experiment()
        raw["dataset"] = {"path": str(ds)}
        with pytest.raises(ConfigError):
            cmd_run(validate_config(ExperimentConfig, raw), output=tmp_path / "exp")

    def test_resume_matches_an_uninterrupted_experiment(self, tmp_path):
        short = validate_config(ExperimentConfig, _experiment(selection_mode="gp_select", random_fraction=0.5,
                                                              checkpoint_every=1))
        cmd_run(short, output=tmp_path / "a")
        longer = short.model_copy(update={"em": short.em.model_copy(update={"n_iterations": 6})})
        resumed = cmd_run(longer, output=tmp_path / "a", resume=True)
        fresh = cmd_run(longer, output=tmp_path / "b")
        for rep in range(2):
            name = f"rep-{rep:02d}"
            assert _free_energies(tmp_path / "a" / name) == _free_energies(tmp_path / "b" / name)
        assert [r.final_free_energy for r in resumed.runs] == [r.final_free_energy for r in fresh.runs]


class TestEvaluate:
    def test_exact_run_from_the_truth(self, tmp_path):
        raw = _experiment(selection_mode="full_exact", n_latents=6, h_prime=6, n_iterations=4)
        raw["repetitions"] = 1
        raw["init"] = "ground_truth"
        raw["dataset"] = {"generator": _bars_generator(grid_side=3, n_points=300)}
        out = tmp_path / "exp"
        cmd_run(validate_config(ExperimentConfig, raw), output=out)

        report = cmd_evaluate(out / "rep-00", out / DATASET_SUBDIR)
        assert report.recovery.success
        assert report.hit_rate_per_iteration == [1.0] * 4
        assert report.final_free_energy is not None
        assert (out / "rep-00" / REPORT_FILE).exists()

    def test_missing_run_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            cmd_evaluate(tmp_path, tmp_path)


class TestCompare:
    def test_an_experiment_against_itself(self, tmp_path):
        out = tmp_path / "exp"
        cmd_run(validate_config(ExperimentConfig, _experiment()), output=out)
        report = cmd_compare([out, out], output=tmp_path / "cmp")

        assert [e.max_abs_difference for e in report.entries] == [0.0, 0.0]
        assert report.entries[0].iterations == [1, 2, 3]
        assert (tmp_path / "cmp" / COMPARISON_JSON).exists()
        with open(tmp_path / "cmp" / COMPARISON_CSV, encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2 * 2 * 3
        assert all(float(row["free_energy_diff"]) == 0.0 for row in rows)

    def test_different_models_are_rejected(self, tmp_path):
        cmd_run(validate_config(ExperimentConfig, _experiment()), output=tmp_path / "bsc")
        raw = _experiment(model_kind="gmm", selection_mode="gp_select", n_latents=3, h_prime=2)
        raw["dataset"] = {"generator": {"kind": "gmm", "n_points": 60, "n_clusters": 3, "seed": 1}}
        cmd_run(validate_config(ExperimentConfig, raw), output=tmp_path / "gmm")
        with pytest.raises(ConfigError):
            cmd_compare([tmp_path / "bsc", tmp_path / "gmm"], output=tmp_path / "cmp")


class TestCommandLine:
    def test_generate_succeeds(self, tmp_path, capsys):
        path = _write_yaml(tmp_path / "gen.yml", {"generator": _bars_generator()})
        assert cli.main(["generate", "--config", str(path), "--output", str(tmp_path / "ds"), "--seed", "4"]) == 0
        resolved = yaml.safe_load((tmp_path / "ds" / RESOLVED_CONFIG_FILE).read_text(encoding="utf-8"))
        assert resolved["generator"]["seed"] == 4

    def test_invalid_config_exits_2_naming_the_field(self, tmp_path, capsys):
        raw = _experiment()
        raw["em"]["n_iterations"] = 0
        path = _write_yaml(tmp_path / "bad.yml", raw)
        assert cli.main(["run", "--config", str(path), "--output", str(tmp_path / "out")]) == 2
        assert "em.n_iterations" in capsys.readouterr().err

    def test_set_flag_reaches_the_config(self, tmp_path, capsys):
        path = _write_yaml(tmp_path / "exp.yml", _experiment())
        code = cli.main(["run", "--config", str(path), "--output", str(tmp_path / "out"),
                         "--set", "em.n_iterations=2", "--repetitions", "1"])
        assert code == 0
        assert len(read_trace(tmp_path / "out" / "rep-00" / TRACE_FILE)) == 2

    def test_missing_files_exit_1(self, tmp_path, capsys):
        assert cli.main(["run", "--config", str(tmp_path / "nope.yml")]) == 1
        assert cli.main(["compare", str(tmp_path / "nothing")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_numerical_failure_exits_3(self, tmp_path, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise NumericalError("Cholesky failed")
        monkeypatch.setattr(cli, "cmd_run", boom)
        path = _write_yaml(tmp_path / "exp.yml", _experiment())
        assert cli.main(["run", "--config", str(path)]) == 3
        assert "Cholesky failed" in capsys.readouterr().err
