"""Monte Carlo experiment orchestration.

Runs seeded replications of simulate -> first step -> second step, computes
the two headline functionals (average log markup and the persistence slope at
zero), optionally runs the LM tests, the sensitivity diagnostic, and the
invertibility test on every replication, and aggregates bias/variance/MSE
against analytically computed truths. The whole experiment is a pure function
of (config, master seed): replication seeds are pre-assigned, and a parallel
run reduces results in replication order so it matches the serial run.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import __version__
from .config import ExperimentConfig
from .dgp import CalibratedLaw, DgpConfig, calibrate_law_cached, simulate_panel
from .firststep import fit_mlp, fit_ols
from .gmm import MomentSpec, estimate, weighting_matrix, _MomentData
from .inference import lm_test_plugin, lm_test_standard
from .invertibility import test_mean_independence
from .model import ModelParams, log_markup_plus_disturbance, persistence_at_zero, production_dv
from ._mlp import MlpHyper
from .sensitivity import diagnostic

__all__ = [
    "SummaryTable",
    "ExperimentResult",
    "run_experiment",
    "summarize",
    "markup_truth",
    "average_log_markup",
    "replication_seed",
]

logger = logging.getLogger(__name__)

FAILURE_BUDGET = 0.02
PARAM_NAMES = ("alpha", "rho", "nu", "mu_omega", "rho_omega", "alpha_omega")


def markup_truth(mu_d2: float, var_d2: float, n_nodes: int = 200) -> tuple[float, float]:
    """Mean and variance of the log markup ln(1+e^{delta2}) under the demand draw,
    by Gauss-Hermite quadrature."""
    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    d2 = mu_d2 + np.sqrt(2.0 * var_d2) * nodes
    vals = np.logaddexp(0.0, d2)
    w = weights / np.sqrt(np.pi)
    m1 = float(w @ vals)
    m2 = float(w @ vals**2)
    return m1, m2 - m1 * m1


def average_log_markup(panel, theta: ModelParams) -> float:
    """Panel average of the log markup implied by the fitted production side."""
    T = panel.n_periods
    dfdv = production_dv(panel.k[:, :T], panel.v, theta)
    lm = log_markup_plus_disturbance(panel.p, panel.q, panel.pV[:, None], panel.v, dfdv)
    return float(lm.mean())


def replication_seed(master_seed: int, rep: int) -> int:
    """Deterministic 63-bit seed for one replication."""
    return int(np.random.SeedSequence((master_seed, rep)).generate_state(1)[0] >> 1)


@dataclass
class SummaryTable:
    """Aggregated experiment output, one row per (case, moment kind)."""

    rows: pd.DataFrame
    truths: dict
    n_failures: int
    n_replications: int
    unreliable: bool
    runtime_seconds: float = 0.0

    def to_csv(self, path) -> None:
        self.rows.to_csv(path, index=False)


@dataclass
class ExperimentResult:
    summary: SummaryTable
    estimates: pd.DataFrame
    pvalues: pd.DataFrame
    diagnostics: pd.DataFrame
    failures: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


def _replication(exp: ExperimentConfig, law: CalibratedLaw, rep: int) -> dict:
    """One full replication; returns plain records so it pickles cheaply."""
    t0 = time.perf_counter()
    dgp_dict = exp.dgp.to_dict()
    dgp_dict["seed"] = replication_seed(exp.seed, rep)
    cfg = DgpConfig.from_dict(dgp_dict)
    panel = simulate_panel(cfg, law=law)
    theta0 = cfg.model(law)

    estimates, pvals, diags = [], [], []
    for case in exp.cases:
        if exp.step1 == "ols":
            fit = fit_ols(panel, case, degree=exp.step1_degree,
                          orientation=exp.step1_orientation)
        else:
            fit = fit_mlp(panel, case, hyper=MlpHyper(seed=replication_seed(exp.seed, rep) ^ case))
        spec0 = MomentSpec("original", case, exp.instrument_degree)
        data = _MomentData(panel, fit, spec0)
        m0, _, _ = data.residual(theta0, "original")
        W = weighting_matrix(data.h * m0[:, None])

        result_original = None
        for kind in exp.moments:
            spec = MomentSpec(kind, case, exp.instrument_degree)
            res = estimate(spec, panel, fit, start=theta0, W=W,
                           restart_seed=replication_seed(exp.seed, rep) ^ (case * 7 + 1))
            if kind == "original":
                result_original = res
            estimates.append({
                "replication": rep, "case": case, "moment_kind": kind,
                "avg_log_markup": average_log_markup(panel, res.theta_hat),
                "persistence": persistence_at_zero(res.theta_hat),
                "objective": res.objective,
                "converged": res.converged,
                **{f"theta_{n}": v for n, v in
                   zip(PARAM_NAMES, res.theta_hat.as_array())},
            })
            if exp.run_lm and exp.step1 == "ols":
                if kind == "original":
                    lm = lm_test_plugin(theta0, panel, fit, spec)
                else:
                    lm = lm_test_standard(theta0, panel, fit, spec)
                pvals.append({"replication": rep, "case": case, "moment_kind": kind,
                              "variant": lm.variant, "p_value": lm.p_value,
                              "statistic": lm.statistic, "dof": lm.dof})
        if exp.run_sensitivity and result_original is not None:
            sens = diagnostic(result_original.theta_hat, panel, fit, W,
                              exp.instrument_degree)
            diags.append({"replication": rep, "case": case,
                          **{f"dtheta_{n}": v for n, v in
                             zip(PARAM_NAMES, sens.dtheta_dscale)},
                          "reliable": sens.reliable})

    inv_row = None
    if exp.run_invertibility:
        inv = test_mean_independence(panel, degree=exp.invertibility_degree)
        inv_row = {"replication": rep, "p_value_chi2": inv.p_value_chi2,
                   "p_value_f": inv.p_value_f, "r_squared": inv.r_squared}
    return {"rep": rep, "estimates": estimates, "pvalues": pvals,
            "diagnostics": diags, "invertibility": inv_row,
            "seconds": time.perf_counter() - t0}


def _replication_guarded(args):
    exp, law, rep = args
    try:
        return _replication(exp, law, rep)
    except Exception as err:  # recorded and excluded, never fatal for the batch
        return {"rep": rep, "error": f"{type(err).__name__}: {err}"}


def summarize(estimates: pd.DataFrame, pvalues: pd.DataFrame, truths: dict,
              n_replications: int, n_failures: int) -> SummaryTable:
    """Bias / variance / MSE per (case, moment kind) plus LM rejection rates.

    bias is mean(estimate) - truth, variance the across-replication sample
    variance, and MSE = bias^2 + variance by construction.
    """
    rows = []
    for (case, kind), grp in estimates.groupby(["case", "moment_kind"], sort=True):
        rec = {"case": case, "moment_kind": kind,
               "n_replications": int(len(grp)),
               "n_converged": int(grp["converged"].sum())}
        for stat, truth_key in (("avg_log_markup", "avg_log_markup"),
                                ("persistence", "persistence")):
            vals = grp[stat].to_numpy()
            bias = float(vals.mean() - truths[truth_key])
            var = float(vals.var(ddof=1)) if len(vals) > 1 else 0.0
            rec[f"{stat}_bias"] = bias
            rec[f"{stat}_variance"] = var
            rec[f"{stat}_mse"] = bias * bias + var
        if len(pvalues):
            sel = pvalues[(pvalues["case"] == case) & (pvalues["moment_kind"] == kind)]
            rec["lm_rejection_rate_5pct"] = (
                float((sel["p_value"] < 0.05).mean()) if len(sel) else np.nan
            )
        else:
            rec["lm_rejection_rate_5pct"] = np.nan
        rows.append(rec)
    table = pd.DataFrame(rows)
    unreliable = n_failures > FAILURE_BUDGET * n_replications
    return SummaryTable(rows=table, truths=truths, n_failures=n_failures,
                        n_replications=n_replications, unreliable=unreliable)


def run_experiment(exp: ExperimentConfig, threads: int | None = None,
                   out_dir=None) -> ExperimentResult:
    """Run all replications (optionally in a process pool) and aggregate.

    With ``out_dir`` set, writes summary.csv, estimates.csv, pvalues.csv,
    diagnostics.csv (and invertibility.csv when enabled) plus a manifest.json
    carrying the config hash, truths, versions, and runtime. Files are staged
    with a .tmp suffix and moved into place only when complete.
    """
    t_start = time.perf_counter()
    threads = exp.threads if threads is None else threads
    law = calibrate_law_cached(exp.dgp.targets, exp.dgp.alpha_omega, exp.oracle_length)
    theta0 = exp.dgp.model(law)
    mk_mean, mk_var = markup_truth(exp.dgp.demand.mu_d2, exp.dgp.demand.var_d2)
    truths = {
        "avg_log_markup": mk_mean,
        "log_markup_variance": mk_var,
        "persistence": persistence_at_zero(theta0),
        "theta0": theta0.as_array().tolist(),
        "law": {"mu_omega": law.mu_omega, "rho_omega": law.rho_omega,
                "sigma2_omega": law.sigma2_omega, "alpha_omega": law.alpha_omega},
    }

    jobs = [(exp, law, rep) for rep in range(exp.replications)]
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(_replication_guarded, jobs))
    else:
        raw = [_replication_guarded(j) for j in jobs]
    raw.sort(key=lambda r: r["rep"])

    failures = [(r["rep"], r["error"]) for r in raw if "error" in r]
    ok = [r for r in raw if "error" not in r]
    for rep, err in failures:
        logger.warning("replication %d failed: %s", rep, err)

    estimates = pd.DataFrame([row for r in ok for row in r["estimates"]])
    pvalues = pd.DataFrame([row for r in ok for row in r["pvalues"]])
    diagnostics = pd.DataFrame([row for r in ok for row in r["diagnostics"]])
    inv_rows = pd.DataFrame([r["invertibility"] for r in ok if r["invertibility"]])
    if not ok:
        raise RuntimeError(f"all {exp.replications} replications failed; first: {failures[0][1]}")

    summary = summarize(estimates, pvalues, truths, exp.replications, len(failures))
    summary.runtime_seconds = time.perf_counter() - t_start
    manifest = {
        "config": exp.to_dict(),
        "config_hash": exp.content_hash(),
        "master_seed": exp.seed,
        "versions": {"proxyprod": __version__, "numpy": np.__version__,
                     "pandas": pd.__version__},
        "truths": truths,
        "n_failures": len(failures),
        "failures": [{"replication": r, "error": e} for r, e in failures],
        "unreliable": summary.unreliable,
        "runtime_seconds": summary.runtime_seconds,
        "replication_seconds": [r["seconds"] for r in ok],
    }
    result = ExperimentResult(summary=summary, estimates=estimates, pvalues=pvalues,
                              diagnostics=diagnostics, failures=failures,
                              manifest=manifest)
    if out_dir is not None:
        _write_outputs(result, inv_rows, out_dir)
    result.manifest["invertibility"] = inv_rows.to_dict("records") if len(inv_rows) else []
    return result


def _write_outputs(result: ExperimentResult, inv_rows: pd.DataFrame, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)

    def stage(df: pd.DataFrame, name: str):
        final = os.path.join(out_dir, name)
        tmp = final + ".tmp"
        df.to_csv(tmp, index=False)
        os.replace(tmp, final)

    stage(result.summary.rows, "summary.csv")
    stage(result.estimates, "estimates.csv")
    stage(result.pvalues, "pvalues.csv")
    stage(result.diagnostics, "diagnostics.csv")
    if len(inv_rows):
        stage(inv_rows, "invertibility.csv")
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(result.manifest, fh, indent=1)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
