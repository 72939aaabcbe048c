"""Acceptance suite: desk-scale Monte Carlo reproduction of the headline results.

Every criterion below runs at desk scale (50 replications of 2000 firms over
20 periods unless stated otherwise) with pinned tolerances and prints one
PASS/FAIL line. The heavy Monte Carlo families are session fixtures shared
across criteria; expect the full module to take tens of minutes on two cores.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy import stats

from proxyprod.config import build_experiment_config
from proxyprod.dgp import DgpConfig, MomentTargets, calibrate_law_cached, simulate_panel
from proxyprod.firststep import fit_ols
from proxyprod.gmm import (
    MomentSpec,
    _MomentData,
    estimate,
    instrument_matrix,
    moment_modified,
    moment_original,
    weighting_matrix,
)
from proxyprod.harness import replication_seed, run_experiment
from proxyprod.inference import _psd_inverse_quadratic, lm_test_plugin
from proxyprod.invertibility import test_mean_independence as mean_independence
from proxyprod.model import law_g, law_g_prime, production_f
import proxyprod.gmm as gmm_mod

MASTER_SEED = 20260809
DESK = dict(n_firms=2000, n_periods=20, burn_in=2000, replications=50)
THREADS = 2

PARAM_NAMES = ("alpha", "rho", "nu", "mu_omega", "rho_omega", "alpha_omega")


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{criterion}: {detail}"


def _experiment(**raw):
    base = {
        "seed": MASTER_SEED,
        "threads": THREADS,
        **{k: str(v) for k, v in DESK.items()},
    }
    base.update({k: str(v) for k, v in raw.items()})
    return build_experiment_config(base)


@pytest.fixture(scope="session")
def family_ar1():
    exp = _experiment(process="ar1", cases="1,2,3", moments="original",
                      run_lm="true", run_invertibility="true",
                      invertibility_degree="2")
    return run_experiment(exp, threads=THREADS)


@pytest.fixture(scope="session")
def family_nonlinear():
    exp = _experiment(process="nonlinear", cases="1,2,3", moments="original",
                      run_lm="true", run_sensitivity="true")
    return run_experiment(exp, threads=THREADS)


@pytest.fixture(scope="session")
def family_modified():
    exp = _experiment(preset="modified", process="nonlinear", cases="2,3",
                      moments="original,modified", run_lm="true")
    return run_experiment(exp, threads=THREADS)


# ---------------------------------------------------------------------------
# 500-replication size study on an invertible process (no demand heterogeneity)
# ---------------------------------------------------------------------------

SIZE_REPS = 500


def _size_config(rep: int) -> DgpConfig:
    cfg = DgpConfig(seed=replication_seed(MASTER_SEED + 1, rep),
                    n_firms=2000, n_periods=10, burn_in=800)
    d = cfg.to_dict()
    d["demand"]["var_d1"] = 0.0
    d["demand"]["var_d2"] = 0.0
    return DgpConfig.from_dict(d)


def _size_rep(rep: int):
    from proxyprod.dgp import calibrate_law

    cfg = _size_config(rep)
    law = calibrate_law(cfg.targets, 0.0)
    panel = simulate_panel(cfg, law=law)
    theta0 = cfg.model(law)
    fit = fit_ols(panel, 2)
    p_plugin = lm_test_plugin(theta0, panel, fit).p_value

    # orthogonalized moment with the oracle conditional mean, straight from
    # the stored latents: residual = xi_t + eps_t - g'(omega_{t-1}) eps_{t-1}
    T = panel.n_periods
    t = np.arange(1, T)
    om_lag = panel.omega[:, t - 1].ravel()
    m = (
        panel.q[:, t].ravel()
        - production_f(panel.k[:, t].ravel(), panel.v[:, t].ravel(), theta0)
        - law_g(om_lag, theta0)
        - law_g_prime(om_lag, theta0) * panel.epsilon[:, t - 1].ravel()
    )
    h, _ = instrument_matrix(panel)
    n = m.size
    a = (h * m[:, None]).reshape(panel.n_firms, -1, h.shape[1]).sum(axis=1)
    omega11 = a.T @ a / n
    s = h.T @ m / n
    core, dof, _ = _psd_inverse_quadratic(omega11, s, h.shape[1])
    p_oracle = float(stats.chi2.sf(n * core, dof)) if dof > 0 else 1.0

    p_invert = mean_independence(panel, degree=2).p_value_f
    return p_plugin, p_oracle, p_invert


@pytest.fixture(scope="session")
def family_size():
    with ProcessPoolExecutor(max_workers=THREADS) as pool:
        rows = list(pool.map(_size_rep, range(SIZE_REPS), chunksize=10))
    arr = np.array(rows)
    return {"plugin": arr[:, 0], "oracle_standard": arr[:, 1], "invert": arr[:, 2]}


# ---------------------------------------------------------------------------
# parameter recovery on an invertible process with an interior law weight
# ---------------------------------------------------------------------------

RECOVERY_REPS = 20


def _recovery_rep(args):
    rep, law = args
    cfg = DgpConfig(alpha_omega=0.5, seed=replication_seed(MASTER_SEED + 2, rep),
                    n_firms=1500, n_periods=10, burn_in=800)
    d = cfg.to_dict()
    d["demand"]["var_d1"] = 0.0
    d["demand"]["var_d2"] = 0.0
    cfg = DgpConfig.from_dict(d)
    panel = simulate_panel(cfg, law=law)
    theta0 = cfg.model(law)
    fit = fit_ols(panel, 1)
    res = estimate(MomentSpec("original", 1), panel, fit, start=theta0)
    return res.theta_hat.as_array(), theta0.as_array(), res.converged


@pytest.fixture(scope="session")
def family_recovery():
    law = calibrate_law_cached(MomentTargets(0.0, 0.25, 0.7), 0.5)
    with ProcessPoolExecutor(max_workers=THREADS) as pool:
        rows = list(pool.map(_recovery_rep, [(r, law) for r in range(RECOVERY_REPS)]))
    thetas = np.array([r[0] for r in rows])
    theta0 = rows[0][1]
    converged = np.array([r[2] for r in rows])
    return thetas, theta0, converged


def _bias(result, case, kind, column):
    rows = result.summary.rows
    sel = rows[(rows["case"] == case) & (rows["moment_kind"] == kind)]
    assert len(sel) == 1
    return float(sel.iloc[0][f"{column}_bias"])


def _rejection(result, case, kind):
    pv = result.pvalues
    sel = pv[(pv["case"] == case) & (pv["moment_kind"] == kind)]
    return float((sel["p_value"] < 0.05).mean())


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

class TestCriterion1Ar1Biases:
    def test_markup_and_persistence(self, family_ar1):
        mk = {c: _bias(family_ar1, c, "original", "avg_log_markup") for c in (1, 2, 3)}
        ps = {c: _bias(family_ar1, c, "original", "persistence") for c in (1, 2, 3)}
        checks = [
            abs(mk[1] - (-0.4875)) <= 0.05,
            abs(mk[2] - 0.0023) <= 0.015,
            abs(mk[3] - 0.0012) <= 0.015,
            abs(ps[1] - (-0.1869)) <= 0.03,
            abs(ps[2]) < 0.02,
            abs(ps[3]) < 0.02,
        ]
        detail = (f"markup bias {mk[1]:+.4f}/{mk[2]:+.4f}/{mk[3]:+.4f} "
                  f"(targets -0.4875/0.0023/0.0012), persistence "
                  f"{ps[1]:+.4f}/{ps[2]:+.4f}/{ps[3]:+.4f} (target -0.1869/~0/~0)")
        report("criterion 1 (linear-process bias table)", all(checks), detail)


class TestCriterion2NonlinearBiases:
    def test_markup(self, family_nonlinear):
        mk = {c: _bias(family_nonlinear, c, "original", "avg_log_markup")
              for c in (1, 2, 3)}
        checks = [
            abs(mk[1] - (-0.3970)) <= 0.05,
            abs(mk[2] - 0.0511) <= 0.02,
            abs(mk[3] - 0.0030) <= 0.015,
        ]
        detail = (f"markup bias {mk[1]:+.4f}/{mk[2]:+.4f}/{mk[3]:+.4f} "
                  f"(targets -0.3970/0.0511/0.0030)")
        report("criterion 2 (nonlinear-process bias table)", all(checks), detail)


class TestCriterion3OrthogonalizedMoment:
    def test_bias_reduction_ordering(self, family_modified):
        orig2 = _bias(family_modified, 2, "original", "avg_log_markup")
        mod2 = _bias(family_modified, 2, "modified", "avg_log_markup")
        mod3 = _bias(family_modified, 3, "modified", "avg_log_markup")
        checks = [
            abs(orig2 - 0.5743) <= 0.08,
            abs(mod2 - (-0.1327)) <= 0.06,
            abs(mod3) < 0.03,
            abs(mod2) < abs(orig2),
        ]
        detail = (f"case-2 original {orig2:+.4f} (target +0.5743) vs modified "
                  f"{mod2:+.4f} (target -0.1327); case-3 modified {mod3:+.4f}")
        report("criterion 3 (orthogonalized moment reduces bias)", all(checks), detail)


# sign pattern of the sensitivity table: entries whose reported magnitude
# exceeds the reported Monte Carlo spread
TABLE_SIGNS = {
    1: {"alpha": 1, "nu": 1, "rho_omega": -1, "alpha_omega": -1},
    2: {"alpha": -1, "rho": 1, "nu": -1, "mu_omega": -1, "alpha_omega": -1},
    3: {"nu": -1},
}


class TestCriterion4SensitivityDiagnostic:
    def test_values_and_signs(self, family_nonlinear):
        diags = family_nonlinear.diagnostics
        means = {
            case: {n: diags[diags["case"] == case][f"dtheta_{n}"].mean()
                   for n in PARAM_NAMES}
            for case in (1, 2, 3)
        }
        alpha_ok = abs(means[1]["alpha"] - 0.1556) <= 0.03

        sign_ok = True
        for case, signs in TABLE_SIGNS.items():
            for name, s in signs.items():
                sign_ok &= np.sign(means[case][name]) == s

        # the diagnostic tracks the sign of the actual bias in the failing case
        est = family_nonlinear.estimates
        theta0 = np.array(family_nonlinear.manifest["truths"]["theta0"])
        case1 = est[(est["case"] == 1) & (est["moment_kind"] == "original")]
        bias = np.array([case1[f"theta_{n}"].mean() for n in PARAM_NAMES]) - theta0
        bias_sign_ok = all(
            np.sign(means[1][n]) == np.sign(bias[j])
            for j, n in enumerate(PARAM_NAMES)
            if n != "mu_omega"
        )
        detail = (f"case-1 alpha diagnostic {means[1]['alpha']:+.4f} "
                  f"(target +0.1556 +/- 0.03); table signs "
                  f"{'ok' if sign_ok else 'MISMATCH'}; case-1 bias-sign agreement "
                  f"{'ok' if bias_sign_ok else 'MISMATCH'}")
        report("criterion 4 (sensitivity diagnostic)", alpha_ok and sign_ok and bias_sign_ok,
               detail)


class TestCriterion5LmBehavior:
    def test_rejection_rates(self, family_ar1, family_nonlinear, family_size):
        r1_ar1 = _rejection(family_ar1, 1, "original")
        r1_nl = _rejection(family_nonlinear, 1, "original")
        r3_nl = _rejection(family_nonlinear, 3, "original")
        size = float((family_size["plugin"] < 0.05).mean())
        checks = [
            r1_ar1 > 0.95,
            r1_nl > 0.95,
            0.03 <= r3_nl <= 0.13,
            0.03 <= size <= 0.07,
        ]
        detail = (f"case-1 rejection {r1_ar1:.0%} (linear) / {r1_nl:.0%} (nonlinear); "
                  f"nonlinear case-3 rejection {r3_nl:.1%} (band 3-13%); "
                  f"invertible-process size {size:.1%} (band 3-7%)")
        report("criterion 5 (LM rejection behavior)", all(checks), detail)

    def test_oracle_statistic_distribution(self, family_size):
        # probability-integral transform of the oracle-prediction statistic is
        # uniform if the chi-square reference is correct
        pvals = family_size["oracle_standard"]
        ks = stats.kstest(pvals, "uniform")
        ok = ks.pvalue > 0.01
        report("criterion 5b (oracle LM distribution)", ok,
               f"KS p-value {ks.pvalue:.4f} over {pvals.size} replications")


class TestCriterion6NeymanOrthogonality:
    @pytest.fixture(scope="class")
    def desk_panels(self):
        panels = {}
        for name, alpha_omega, oracle in (("ar1", 0.0, 2_000_000),
                                          ("nonlinear", 1.0, 2_000_000)):
            cfg = DgpConfig(alpha_omega=alpha_omega, seed=MASTER_SEED + 9,
                            n_firms=2000, n_periods=20, burn_in=2000)
            law = calibrate_law_cached(cfg.targets, alpha_omega, oracle)
            panels[name] = (simulate_panel(cfg, law=law), cfg.model(law))
        return panels

    @staticmethod
    def slope_ratio(panel, theta0, case):
        fit = fit_ols(panel, case)
        data = _MomentData(panel, fit, MomentSpec("original", case))
        m0, _, _ = data.residual(theta0, "original")
        W = weighting_matrix(data.h * m0[:, None])
        h = data.h
        n = data.n
        base = gmm_mod.predict_lagged(fit, panel)
        T = panel.n_periods
        delta = (0.5 + 0.3 * np.tanh(panel.k[:, 1:T])).reshape(base.shape)
        orig_pl = gmm_mod.predict_lagged
        lams = np.array([-0.02, -0.01, 0.01, 0.02])

        def objective(kind, lam):
            gmm_mod.predict_lagged = lambda f, pan: base + lam * delta
            try:
                fn = moment_original if kind == "original" else moment_modified
                m = fn(theta0, panel, fit)
            finally:
                gmm_mod.predict_lagged = orig_pl
            g = h.T @ m / n
            return g @ W @ g

        slopes = {}
        for kind in ("original", "modified"):
            q0 = objective(kind, 0.0)
            vals = np.array([objective(kind, l) for l in lams])
            slopes[kind] = np.polyfit(lams, vals - q0, 1)[0]
        return abs(slopes["modified"]) / abs(slopes["original"])

    def test_orthogonality_slopes(self, desk_panels):
        ratio_ar1 = self.slope_ratio(*desk_panels["ar1"], case=1)
        ratio_nl = self.slope_ratio(*desk_panels["nonlinear"], case=2)
        ok = ratio_ar1 < 1e-2 and ratio_nl < 1e-2
        report("criterion 6a (orthogonality slope ratio)", ok,
               f"slope ratios: linear case-1 {ratio_ar1:.2e}, "
               f"nonlinear case-2 {ratio_nl:.2e} (bound 1e-2)")

    def test_correction_redundancy(self, desk_panels):
        panel, theta0 = desk_panels["ar1"]
        fit = fit_ols(panel, 2)
        h, _ = instrument_matrix(panel)
        m_o = moment_original(theta0, panel, fit)
        m_m = moment_modified(theta0, panel, fit)
        gap = np.max(np.abs(h.T @ (m_o - m_m) / m_o.size))
        ok = gap < 1e-8
        report("criterion 6b (finite-sample redundancy)", ok,
               f"max correction moment {gap:.2e} (bound 1e-8)")


class TestCriterion7OracleSuite:
    def test_recovery_within_monte_carlo_error(self, family_recovery):
        thetas, theta0, converged = family_recovery
        mean = thetas.mean(axis=0)
        se = thetas.std(axis=0, ddof=1) / np.sqrt(thetas.shape[0])
        err = np.abs(mean - theta0)
        ok = bool(np.all(err <= 3 * se + 2e-3) and converged.all())
        detail = ", ".join(
            f"{n}={m:+.4f} (truth {t:+.4f}, 3se {3*s:.4f})"
            for n, m, t, s in zip(PARAM_NAMES, mean, theta0, se)
        )
        report("criterion 7a (parameter recovery)", ok, detail)

    def test_invertibility_size_and_power(self, family_size, family_ar1):
        size = float((family_size["invert"] < 0.05).mean())
        inv = family_ar1.manifest["invertibility"]
        power = float(np.mean([row["p_value_f"] < 0.05 for row in inv]))
        ok = (0.02 <= size <= 0.08) and power >= 0.95
        report("criterion 7b (invertibility test size/power)", ok,
               f"size {size:.1%} (band 2-8%), power {power:.0%} (>=95%)")

    def test_numeric_identities(self, law_ar1):
        # compact re-run of the oracle identities at their stated tolerances
        cfg = DgpConfig(seed=MASTER_SEED + 3, n_firms=300, n_periods=8, burn_in=300)
        panel = simulate_panel(cfg, law=law_ar1)
        model = cfg.model(law_ar1)
        panel.validate(foc_tol=1e-9, model=model)

        from proxyprod.dgp import _input_foc_residual

        T = panel.n_periods
        res = _input_foc_residual(
            panel.v, panel.k[:, :T], panel.omega, panel.delta1[:, None],
            panel.delta2[:, None], panel.pK[:, None], panel.pV[:, None], model,
        )
        ok = np.max(np.abs(res)) < 1e-10
        report("criterion 7c (market-clearing residual)", ok,
               f"max first-order-condition residual {np.max(np.abs(res)):.2e}")


class TestCriterion8Determinism:
    def test_reruns_and_parallelism(self, tmp_path_factory):
        import pandas as pd

        exp = _experiment(process="ar1", cases="1", moments="original",
                          run_lm="true", n_firms=300, n_periods=6, burn_in=200,
                          replications=4)
        base = tmp_path_factory.mktemp("determinism")
        a = run_experiment(exp, threads=1, out_dir=base / "a")
        b = run_experiment(exp, threads=1, out_dir=base / "b")
        c = run_experiment(exp, threads=2, out_dir=base / "c")
        same_bytes = (base / "a" / "summary.csv").read_bytes() == (
            base / "b" / "summary.csv").read_bytes()
        same_parallel = (base / "a" / "summary.csv").read_bytes() == (
            base / "c" / "summary.csv").read_bytes()
        pd.testing.assert_frame_equal(a.estimates, c.estimates)
        report("criterion 8 (determinism)", same_bytes and same_parallel,
               f"byte-identical rerun: {same_bytes}; serial==parallel: {same_parallel}")
