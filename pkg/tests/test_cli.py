import json
import os
import subprocess
import sys

import pandas as pd
import pytest

from proxyprod.cli import main

SMOKE = """
process = ar1
n_firms = 150
n_periods = 6
burn_in = 150
replications = 2
cases = 1
moments = original
run_lm = true
seed = 7
threads = 1
"""


@pytest.fixture()
def smoke_cfg(tmp_path):
    path = tmp_path / "smoke.cfg"
    path.write_text(SMOKE)
    return str(path)


def run_main(args):
    return main(args)


class TestExperimentCommand:
    def test_byte_identical_reruns(self, smoke_cfg, tmp_path, capsys):
        out1 = tmp_path / "run1"
        out2 = tmp_path / "run2"
        assert run_main(["experiment", "--config", smoke_cfg, "--seed", "7",
                         "--out", str(out1)]) == 0
        assert run_main(["experiment", "--config", smoke_cfg, "--seed", "7",
                         "--out", str(out2)]) == 0
        assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()
        assert (out1 / "pvalues.csv").read_bytes() == (out2 / "pvalues.csv").read_bytes()
        manifest = json.loads((out1 / "manifest.json").read_text())
        assert manifest["master_seed"] == 7
        assert "config_hash" in manifest

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("n_frms = 2")
        assert run_main(["experiment", "--config", str(bad)]) == 2

    def test_missing_config_exit_code(self):
        assert run_main(["experiment", "--config", "nope.cfg"]) == 2


class TestSimulateCommand:
    def test_latent_flag(self, smoke_cfg, tmp_path, capsys):
        plain = tmp_path / "plain.csv"
        latent = tmp_path / "latent.csv"
        assert run_main(["simulate", "--config", smoke_cfg, "--out", str(plain)]) == 0
        assert run_main(["simulate", "--config", smoke_cfg, "--out", str(latent),
                         "--include-latent"]) == 0
        cols_plain = set(pd.read_csv(plain, nrows=1).columns)
        cols_latent = set(pd.read_csv(latent, nrows=1).columns)
        assert "omega" not in cols_plain
        assert {"omega", "epsilon", "q_star", "delta1", "delta2"} <= cols_latent
        assert json.loads((tmp_path / "plain.csv.json").read_text())["seed"] == 7


class TestCalibrateCommand:
    def test_ar1_closed_form(self, smoke_cfg, tmp_path):
        out = tmp_path / "law.json"
        assert run_main(["calibrate", "--config", smoke_cfg, "--out", str(out)]) == 0
        law = json.loads(out.read_text())
        assert law["rho_omega"] == pytest.approx(0.7)
        assert law["sigma2_omega"] == pytest.approx(0.1275)


class TestEstimateAndTests:
    def test_estimate_then_lm_then_sensitivity(self, tmp_path, capsys):
        cfg = tmp_path / "est.cfg"
        cfg.write_text(
            "process = ar1\nn_firms = 300\nn_periods = 6\nburn_in = 200\nseed = 3\n"
        )
        panel = tmp_path / "panel.csv"
        assert run_main(["simulate", "--config", str(cfg), "--out", str(panel),
                         "--include-latent"]) == 0

        est_out = tmp_path / "est.json"
        assert run_main(["estimate", "--config", str(cfg), "--panel", str(panel),
                         "--case", "2", "--out", str(est_out)]) == 0
        est = json.loads(est_out.read_text())
        assert len(est["theta_hat"]) == 6
        assert est["convergence"]["converged"]

        lm_out = tmp_path / "lm.json"
        assert run_main(["lm-test", "--config", str(cfg), "--panel", str(panel),
                         "--case", "2", "--moment", "original",
                         "--out", str(lm_out)]) == 0
        lm = json.loads(lm_out.read_text())
        assert 0.0 <= lm["p_value"] <= 1.0
        assert lm["variant"] == "plugin_corrected"

        sens_out = tmp_path / "sens.json"
        assert run_main(["sensitivity", "--config", str(cfg), "--panel", str(panel),
                         "--case", "2", "--out", str(sens_out)]) == 0
        sens = json.loads(sens_out.read_text())
        assert set(sens["dtheta_dscale"]) == {
            "alpha", "rho", "nu", "mu_omega", "rho_omega", "alpha_omega"
        }


class TestInvertibilityCommand:
    def test_on_simulated_panel(self, tmp_path, capsys):
        cfg = tmp_path / "inv.cfg"
        cfg.write_text(
            "process = ar1\nn_firms = 1500\nn_periods = 10\nburn_in = 400\nseed = 5\n"
        )
        panel = tmp_path / "panel.csv"
        assert run_main(["simulate", "--config", str(cfg), "--out", str(panel)]) == 0
        out = tmp_path / "verdict.json"
        assert run_main(["test-invertibility", "--panel", str(panel),
                         "--degrees", "2,3", "--out", str(out)]) == 0
        rows = json.loads(out.read_text())
        assert len(rows) == 2
        assert rows[0]["p_value_f"] < 0.01

    def test_column_mapping(self, tmp_path):
        cfg = tmp_path / "inv.cfg"
        cfg.write_text(
            "process = ar1\nn_firms = 400\nn_periods = 6\nburn_in = 200\nseed = 6\n"
        )
        panel = tmp_path / "panel.csv"
        run_main(["simulate", "--config", str(cfg), "--out", str(panel)])
        df = pd.read_csv(panel).rename(columns={"q": "output", "k": "capital"})
        renamed = tmp_path / "renamed.csv"
        df.to_csv(renamed, index=False)
        assert run_main(["test-invertibility", "--panel", str(renamed),
                         "--map", "q=output,k=capital"]) == 0


class TestConsoleEntryPoint:
    def test_help_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "proxyprod.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "experiment" in proc.stdout
