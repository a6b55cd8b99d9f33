"""Tests for configuration, reports, ensembles, the CLI and small experiment runs."""

import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gibbswave.cli import main
from gibbswave.config import (
    EXPERIMENTS,
    OPTION_DEFAULTS,
    ConfigError,
    ExperimentConfig,
    alpha_coefficients,
    schema_json,
)
from gibbswave.ensemble import BlockNoise, chunk_ranges, gather, mean_and_error, ordered_map, stream
from gibbswave.experiments import (
    cubature_points,
    cutoff_discrepancies,
    gauss_hermite_grid,
    run_experiment,
)
from gibbswave.linear_system import sobolev_weight_vector
from gibbswave.measures import sample_nu0_vectors
from gibbswave.report import EnsembleReport, ObservableSummary, z_threshold
from gibbswave.spectral_field import field_from_function


def base(experiment="invariance", **physics):
    phys = {"temperatures": [1.0], "alphas": [{"cos": [1.0]}]}
    phys.update(physics)
    return {"experiment": experiment, "physics": phys}


def write_config(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


class TestConfig:
    """Schema and physics validation."""

    def test_defaults_resolved(self):
        cfg = ExperimentConfig.from_dict(base())
        assert cfg.physics["mu"] == 1.0
        assert cfg.options == OPTION_DEFAULTS["invariance"]

    def test_missing_temperatures(self):
        raw = base()
        del raw["physics"]["temperatures"]
        with pytest.raises(ConfigError, match="temperatures"):
            ExperimentConfig.from_dict(raw)

    def test_field_path_in_message(self):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig.from_dict(base(dt=-1.0))
        assert any(m.startswith("physics.dt") for m in err.value.messages)

    def test_unequal_temperatures_for_invariance(self):
        raw = base(temperatures=[1.0, 2.0], alphas=[{"cos": [1.0]}, {"cos": [0.0, 1.0]}])
        with pytest.raises(ConfigError, match="equal temperatures"):
            ExperimentConfig.from_dict(raw)

    def test_unequal_temperatures_allowed_for_flux(self):
        raw = base("flux_exploratory", temperatures=[1.0, 2.0], alphas=[{"cos": [1.0]}, {"sin": [1.0]}])
        assert ExperimentConfig.from_dict(raw).coupling().n_reservoirs == 2

    def test_flux_needs_two_reservoirs(self):
        with pytest.raises(ConfigError, match="at least two"):
            ExperimentConfig.from_dict(base("flux_exploratory"))

    def test_length_mismatch(self):
        with pytest.raises(ConfigError, match="has 2 entries"):
            ExperimentConfig.from_dict(base("tail_bound", temperatures=[1.0, 1.0]))

    def test_unknown_option(self):
        raw = base()
        raw["options"] = {"bogus": 1}
        with pytest.raises(ConfigError, match="unknown keys"):
            ExperimentConfig.from_dict(raw)

    def test_cutoffs_below_reference(self):
        with pytest.raises(ConfigError, match="reference_cutoff"):
            ExperimentConfig.from_dict(base("cutoff_convergence", cutoffs=[8, 64], reference_cutoff=64))

    def test_unknown_experiment(self):
        with pytest.raises(ConfigError, match="experiment"):
            ExperimentConfig.from_dict(base("nope"))

    def test_overrides(self):
        cfg = ExperimentConfig.from_dict(base(), {("sampling", "seed"): 7, ("physics", "dt"): None})
        assert cfg.seed == 7
        assert cfg.physics["dt"] == 1e-3

    def test_workers_not_hashed(self):
        a = ExperimentConfig.from_dict(base(), {("sampling", "workers"): 1})
        b = ExperimentConfig.from_dict(base(), {("sampling", "workers"): 4, ("output", "directory"): "x"})
        c = ExperimentConfig.from_dict(base(), {("sampling", "seed"): 1})
        assert a.digest() == b.digest() != c.digest()

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            ExperimentConfig.load(tmp_path / "none.json")

    def test_load_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        with pytest.raises(ConfigError, match="valid JSON"):
            ExperimentConfig.load(p)

    def test_alpha_cos_coefficients(self):
        np.testing.assert_allclose(alpha_coefficients({"cos": [1.0]}, 3), field_from_function(np.cos, 3),
                                   atol=1e-14)

    def test_alpha_sin_and_const(self):
        expected = field_from_function(lambda x: 0.5 + 2 * np.sin(2 * x), 3)
        np.testing.assert_allclose(alpha_coefficients({"const": 0.5, "sin": [0.0, 2.0]}, 3), expected,
                                   atol=1e-14)

    def test_schema_is_json(self):
        doc = json.loads(schema_json())
        assert doc["properties"]["experiment"]["enum"] == list(EXPERIMENTS)


class TestReport:
    """Report contents and serialization."""

    def make(self):
        rep = EnsembleReport("demo", metadata={"config_hash": "abc"})
        rep.observables.append(ObservableSummary.from_samples("x", [0.0, 1.0], np.array([[1.0, 2.0], [3.0, 5.0]])))
        rep.check("ratio", 0.4, 0.5, "<")
        return rep

    def test_half_width(self):
        o = self.make().observables[0]
        assert o.mean == [2.0, 3.5]
        assert o.half_width[0] == pytest.approx(1.959963984540054 * np.sqrt(2.0 / 2))

    def test_pass_fail(self):
        rep = self.make()
        assert rep.passed
        rep.check("bad", 2.0, 1.0)
        assert not rep.passed
        assert rep.failures() == ["bad"]

    def test_nan_becomes_null(self):
        rep = EnsembleReport("demo", tables={"v": float("nan")})
        assert json.loads(rep.to_json())["tables"]["v"] is None

    def test_csv_layout(self):
        lines = self.make().to_csv().splitlines()
        assert lines[0].startswith("section,name,time,value")
        assert lines[-1].startswith("assertion,ratio")

    def test_write(self, tmp_path):
        paths = self.make().write(tmp_path, ["json"])
        assert [p.name for p in paths] == ["report.json"]

    def test_bonferroni_threshold(self):
        assert z_threshold(1) == 3.0
        assert z_threshold(7, bonferroni=False) == 3.0
        assert 3.5 < z_threshold(7) < 4.0


class TestEnsemble:
    """Random streams and ordered maps."""

    def test_streams_reproducible_and_distinct(self):
        a = stream(1, "noise", 3).standard_normal(4)
        np.testing.assert_array_equal(a, stream(1, "noise", 3).standard_normal(4))
        assert not np.array_equal(a, stream(1, "noise", 4).standard_normal(4))
        assert not np.array_equal(a, stream(1, "init", 3).standard_normal(4))
        assert not np.array_equal(a, stream(1, "noise", 3, tag=1).standard_normal(4))

    def test_chunks(self):
        assert [list(r) for r in chunk_ranges(5, 2)] == [[0, 1], [2, 3], [4]]
        with pytest.raises(ValueError, match="chunk_size"):
            chunk_ranges(5, 0)

    def test_ordered_map_independent_of_workers(self):
        def task(idx):
            return np.array([stream(0, "t", i).random() for i in idx])

        one = gather(ordered_map(task, 37, 5, 1))
        four = gather(ordered_map(task, 37, 5, 4))
        np.testing.assert_array_equal(one, four)

    def test_block_noise_matches_stream(self):
        rngs = [stream(0, "n", i) for i in range(3)]
        bn = BlockNoise(rngs, (2,), block=4)
        draws = np.stack([bn() for _ in range(6)])
        ref = stream(0, "n", 1)
        expect = np.concatenate([ref.standard_normal((4, 2)), ref.standard_normal((4, 2))[:2]])
        np.testing.assert_array_equal(draws[:, 1], expect)

    def test_mean_and_error(self):
        m, v, se = mean_and_error(np.array([1.0, 3.0]))
        assert (m, v, se) == (2.0, 2.0, 1.0)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 40), chunk=st.integers(1, 12))
    def test_gather_preserves_order(self, n, chunk):
        out = gather(ordered_map(lambda idx: np.array(list(idx)), n, chunk, 1))
        np.testing.assert_array_equal(out, np.arange(n))


class TestQuadratureRules:
    """Cubature and Gauss-Hermite grids used by the weak-generator estimator."""

    def test_cubature_third_moments(self):
        pts = cubature_points(4)
        np.testing.assert_allclose(pts.mean(axis=0), 0, atol=1e-15)
        np.testing.assert_allclose(pts.T @ pts / len(pts), np.eye(4), atol=1e-14)
        np.testing.assert_allclose(np.mean(pts[:, 0] ** 3), 0, atol=1e-15)

    def test_gauss_hermite_moments(self):
        nodes, w = gauss_hermite_grid([2.0], 6)
        assert w.sum() == pytest.approx(1.0)
        assert np.sum(w * nodes[:, 0] ** 2) == pytest.approx(2.0)
        assert np.sum(w * nodes[:, 0] ** 4) == pytest.approx(3 * 4.0)


class TestExperimentsSmall:
    """Reduced runs of the experiment drivers."""

    def test_invariance_time_zero_is_exact(self):
        raw = base(cutoffs=[4], t_final=0.0)
        raw["sampling"] = {"ensemble": 20, "burn_in": 5}
        raw["options"] = {"weak_generator": False, "richardson": False}
        rep = run_experiment(ExperimentConfig.from_dict(raw))
        deltas = [o for o in rep.observables if " delta " in o.name]
        assert len(deltas) == 7
        assert all(o.mean == [0.0] and o.variance == [0.0] for o in deltas)

    def test_invariance_report_metadata(self):
        raw = base(cutoffs=[4], dt=1e-2, t_final=0.1)
        raw["sampling"] = {"ensemble": 30, "burn_in": 5}
        raw["options"] = {"weak_generator": False}
        cfg = ExperimentConfig.from_dict(raw)
        d = run_experiment(cfg).to_dict()
        assert d["metadata"]["config_hash"] == cfg.digest()
        assert d["metadata"]["code_version"]
        assert "M=4" in d["tolerances"]

    def test_zero_time_discrepancy_is_projection_gap(self):
        raw = base("cutoff_convergence", cutoffs=[2, 4], reference_cutoff=8, t_final=0.0)
        raw["sampling"] = {"ensemble": 5, "seed": 3}
        cfg = ExperimentConfig.from_dict(raw)
        sup = cutoff_discrepancies(cfg, cfg.coupling(), [2, 4], 8)
        w = sobolev_weight_vector(8, 1, cfg.options["s"])
        k = np.concatenate([[0], np.arange(1, 9), np.arange(1, 9)])
        kk = np.concatenate([k, k, [0]])
        for i in range(5):
            u0 = sample_nu0_vectors(1.0, 8, 1, stream(3, "init", i, 0), (), cfg.coupling().temperatures)
            for j, M in enumerate([2, 4]):
                gap = np.sqrt(np.sum((w * u0**2)[kk > M]))
                assert sup[i, j] == pytest.approx(gap, rel=1e-12)

    def test_cutoff_control_exact(self):
        raw = base("cutoff_convergence", cutoffs=[4, 6], reference_cutoff=8, dt=1e-2, t_final=0.2)
        raw["sampling"] = {"ensemble": 8}
        rep = run_experiment(ExperimentConfig.from_dict(raw))
        assert rep.assertion("linear control supported in |k|<=4 is exact").passed

    def test_flux_equilibrium_linear(self):
        raw = base("flux_exploratory", temperatures=[1.0, 1.0], alphas=[{"cos": [1.0]}, {"sin": [1.0]}],
                   mu=0.0, m_grid=4, dt=1e-2)
        raw["sampling"] = {"ensemble": 40}
        raw["options"] = {"t_burn": 5.0, "t_average": 20.0}
        rep = run_experiment(ExperimentConfig.from_dict(raw))
        assert rep.metadata.get("label") == "exploratory"
        assert rep.passed, rep.summary()


class TestCli:
    """Exit codes and determinism of the command line."""

    def test_missing_temperatures_exit_2(self, tmp_path, capsys):
        raw = base()
        del raw["physics"]["temperatures"]
        assert main(["validate", "--config", str(write_config(tmp_path, raw))]) == 2
        assert "temperatures" in capsys.readouterr().err

    def test_unequal_temperatures_exit_2(self, tmp_path, capsys):
        raw = base(temperatures=[1.0, 2.0], alphas=[{"cos": [1.0]}, {"cos": [0.0, 1.0]}])
        code = main(["run", "invariance", "--config", str(write_config(tmp_path, raw))])
        assert code == 2
        assert "equal temperatures" in capsys.readouterr().err

    def test_experiment_mismatch_exit_2(self, tmp_path):
        assert main(["run", "tail_bound", "--config", str(write_config(tmp_path, base()))]) == 2

    def test_validate_ok(self, tmp_path, capsys):
        assert main(["validate", "--config", str(write_config(tmp_path, base()))]) == 0
        assert capsys.readouterr().out.startswith("ok: invariance")

    def test_failed_assertion_exit_1(self, tmp_path, capsys):
        raw = base("semigroup_bound")
        raw["options"] = {"rel_tol": -1.0, "n_configs": 1, "s_values": [0.5], "t_max": [5.0, 10.0]}
        assert main(["run", "semigroup_bound", "--config", str(write_config(tmp_path, raw)),
                     "--out", str(tmp_path / "o")]) == 1
        assert "FAILED" in capsys.readouterr().out

    def test_rerun_byte_identical_across_workers(self, tmp_path):
        raw = base(cutoffs=[4], dt=1e-2, t_final=0.05)
        raw["sampling"] = {"ensemble": 24, "burn_in": 5, "chunk_size": 5}
        raw["options"] = {"weak_ensemble": 10, "weak_deltas": [1e-2, 5e-3]}
        cfg = write_config(tmp_path, raw)
        outs = []
        for i, workers in enumerate(["1", "1", "3"]):
            out = tmp_path / f"run{i}"
            main(["run", "invariance", "--config", str(cfg), "--seed", "42", "--workers", workers,
                  "--out", str(out)])
            outs.append(((out / "report.csv").read_bytes(), (out / "report.json").read_bytes()))
        assert outs[0] == outs[1] == outs[2]

    def test_seed_override_changes_report(self, tmp_path):
        raw = base(cutoffs=[4], dt=1e-2, t_final=0.05)
        raw["sampling"] = {"ensemble": 10, "burn_in": 5}
        raw["options"] = {"weak_generator": False}
        cfg = write_config(tmp_path, raw)
        main(["run", "invariance", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "a")])
        main(["run", "invariance", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a/report.json").read_bytes() != (tmp_path / "b/report.json").read_bytes()

    def test_schema_command(self, capsys):
        assert main(["schema"]) == 0
        assert json.loads(capsys.readouterr().out)["title"]

    def test_console_script(self, tmp_path):
        out = subprocess.run([sys.executable, "-m", "gibbswave.cli", "validate", "--config",
                              str(write_config(tmp_path, base()))], capture_output=True, text=True)
        assert out.returncode == 0
