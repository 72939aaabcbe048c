import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from proxyprod.config import build_experiment_config
from proxyprod.harness import (
    markup_truth,
    replication_seed,
    run_experiment,
    summarize,
)


def tiny_config(**kw):
    raw = {
        "process": "ar1",
        "n_firms": 150,
        "n_periods": 6,
        "burn_in": 150,
        "replications": 3,
        "cases": "1",
        "moments": "original",
        "run_lm": "true",
        "seed": 11,
    }
    raw.update({k: str(v) for k, v in kw.items()})
    return build_experiment_config(raw)


class TestTruths:
    def test_baseline_markup_moments(self):
        mean, var = markup_truth(-1.3543, 0.25)
        assert abs(mean - 0.25) < 5e-4
        assert abs(var - 0.0126) < 2e-4

    def test_modified_markup_moments(self):
        mean, var = markup_truth(-2.5425, 4.0)
        assert abs(mean - 0.25) < 5e-4
        assert abs(var - 0.1986) < 5e-4


class TestSummarize:
    def make_frames(self, values):
        rows = []
        for i, v in enumerate(values):
            rows.append(
                dict(replication=i, case=1, moment_kind="original",
                     avg_log_markup=v, persistence=0.7 + 0.01 * i,
                     objective=0.0, converged=True)
            )
        return pd.DataFrame(rows), pd.DataFrame(
            dict(replication=[0], case=[1], moment_kind=["original"],
                 variant=["plugin_corrected"], p_value=[0.01], statistic=[1.0],
                 dof=[70])
        )

    def test_mse_identity(self):
        est, pv = self.make_frames([0.2, 0.3, 0.25, 0.28])
        table = summarize(est, pv, {"avg_log_markup": 0.25, "persistence": 0.7}, 4, 0)
        row = table.rows.iloc[0]
        npt.assert_allclose(
            row["avg_log_markup_mse"],
            row["avg_log_markup_bias"] ** 2 + row["avg_log_markup_variance"],
            atol=1e-10,
        )
        assert table.n_failures == 0
        assert not table.unreliable

    def test_single_replication_zero_variance(self):
        est, pv = self.make_frames([0.3])
        table = summarize(est, pv, {"avg_log_markup": 0.25, "persistence": 0.7}, 1, 0)
        row = table.rows.iloc[0]
        assert row["avg_log_markup_variance"] == 0.0
        npt.assert_allclose(row["avg_log_markup_mse"], row["avg_log_markup_bias"] ** 2)

    def test_identical_estimates_zero_variance(self):
        est, pv = self.make_frames([0.3, 0.3, 0.3])
        est["persistence"] = 0.7
        table = summarize(est, pv, {"avg_log_markup": 0.25, "persistence": 0.7}, 3, 0)
        assert table.rows.iloc[0]["avg_log_markup_variance"] == 0.0

    def test_failure_budget(self):
        est, pv = self.make_frames([0.3] * 10)
        table = summarize(est, pv, {"avg_log_markup": 0.25, "persistence": 0.7}, 500, 11)
        assert table.unreliable


class TestSeeds:
    def test_deterministic_and_distinct(self):
        s = [replication_seed(5, r) for r in range(10)]
        assert s == [replication_seed(5, r) for r in range(10)]
        assert len(set(s)) == 10
        assert replication_seed(6, 0) != replication_seed(5, 0)


class TestRunExperiment:
    def test_smoke_and_outputs(self, tmp_path):
        exp = tiny_config()
        result = run_experiment(exp, threads=1, out_dir=tmp_path / "out")
        assert len(result.estimates) == 3
        assert (tmp_path / "out" / "summary.csv").exists()
        assert (tmp_path / "out" / "pvalues.csv").exists()
        assert (tmp_path / "out" / "manifest.json").exists()
        table = result.summary.rows
        assert set(table["case"]) == {1}
        row = table.iloc[0]
        npt.assert_allclose(
            row["avg_log_markup_mse"],
            row["avg_log_markup_bias"] ** 2 + row["avg_log_markup_variance"],
            atol=1e-10,
        )

    def test_rerun_is_identical(self, tmp_path):
        exp = tiny_config()
        a = run_experiment(exp, threads=1, out_dir=tmp_path / "a")
        b = run_experiment(exp, threads=1, out_dir=tmp_path / "b")
        pd.testing.assert_frame_equal(a.estimates, b.estimates)
        bytes_a = (tmp_path / "a" / "summary.csv").read_bytes()
        bytes_b = (tmp_path / "b" / "summary.csv").read_bytes()
        assert bytes_a == bytes_b

    def test_serial_equals_parallel(self, tmp_path):
        exp = tiny_config(replications=4)
        a = run_experiment(exp, threads=1, out_dir=tmp_path / "serial")
        b = run_experiment(exp, threads=2, out_dir=tmp_path / "parallel")
        pd.testing.assert_frame_equal(a.estimates, b.estimates)
        pd.testing.assert_frame_equal(a.summary.rows, b.summary.rows)
        assert (tmp_path / "serial" / "summary.csv").read_bytes() == (
            tmp_path / "parallel" / "summary.csv"
        ).read_bytes()

    def test_single_replication_smoke(self, tmp_path):
        exp = tiny_config(replications=1)
        result = run_experiment(exp, threads=1, out_dir=tmp_path / "one")
        row = result.summary.rows.iloc[0]
        assert row["avg_log_markup_variance"] == 0.0
        assert row["avg_log_markup_mse"] == row["avg_log_markup_bias"] ** 2
        assert row["persistence_mse"] == row["persistence_bias"] ** 2

    def test_both_moment_kinds_and_sensitivity(self, tmp_path):
        exp = tiny_config(replications=2, moments="original,modified",
                          run_sensitivity="true", run_invertibility="true")
        result = run_experiment(exp, threads=1, out_dir=tmp_path / "out")
        assert set(result.estimates["moment_kind"]) == {"original", "modified"}
        assert len(result.diagnostics) == 2
        variants = set(result.pvalues["variant"])
        assert variants == {"plugin_corrected", "standard"}
        assert (tmp_path / "out" / "invertibility.csv").exists()
        assert (tmp_path / "out" / "diagnostics.csv").exists()
