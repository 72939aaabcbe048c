"""Lagrange-multiplier tests of a hypothesized structural parameter vector.

Both variants assess whether the instrumented sample moments are compatible
with zero at the hypothesized parameters, referencing a chi-square with one
degree of freedom per instrument and clustering all covariances at the firm
level (double time sums inside each firm).

For the plug-in moment the statistic must account for the first step having
been estimated: the variance combines the moment block, the first-step OLS
block, and their cross term through the analytic sensitivity of the moment to
the regression coefficients. The modified (orthogonalized) moment makes that
correction superfluous, so its statistic uses the moment block alone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .basis import build_design
from .dgp import FirmPanel
from .firststep import CASE_VARIABLES, Step1Fit, make_observables
from .gmm import MomentSpec, _MomentData
from .model import ModelParams, law_g_prime, production_f

__all__ = ["LmResult", "clustered_omega_blocks", "lm_test_plugin", "lm_test_standard"]


@dataclass
class LmResult:
    statistic: float
    dof: int
    p_value: float
    variant: str
    condition_number: float
    n_rows: int
    n_firms: int

    def to_json(self) -> str:
        import json

        return json.dumps(
            {
                "statistic": self.statistic,
                "dof": self.dof,
                "p_value": self.p_value,
                "variant": self.variant,
                "condition_number": self.condition_number,
                "n_rows": self.n_rows,
                "n_firms": self.n_firms,
            }
        )


def _firm_sums(rows: np.ndarray, n_firms: int) -> np.ndarray:
    """Sum row vectors within firm; rows are (firm-major, period-minor)."""
    n_per = rows.shape[0] // n_firms
    return rows.reshape(n_firms, n_per, -1).sum(axis=1)


def clustered_omega_blocks(m: np.ndarray, h: np.ndarray, step1_resid: np.ndarray,
                           r: np.ndarray, n_firms: int, n_rows: int | None = None):
    """Firm-clustered covariance blocks of the stacked (moment, first-step) scores.

    Each block is the sample analogue of a double time sum within firm,
    normalized by the number of estimation rows: the (1,1) block covers
    h*m against itself, the (2,2) block the first-step score r*residual, and
    the (1,2) block their cross-products. The double sums factor into outer
    products of within-firm sums.
    """
    n = m.size if n_rows is None else n_rows
    a = _firm_sums(h * m[:, None], n_firms)
    b = _firm_sums(r * step1_resid[:, None], n_firms)
    omega11 = a.T @ a / n
    omega12 = a.T @ b / n
    omega22 = b.T @ b / n
    return omega11, omega12, omega22


def _psd_inverse_quadratic(sigma: np.ndarray, s: np.ndarray, dof: int):
    """Quadratic form s' sigma^{-1} s with an eigenvalue-thresholded fallback.

    Near-singular sigma switches to a pseudo-inverse with rank-adjusted
    degrees of freedom and a prominent warning.
    """
    sigma = 0.5 * (sigma + sigma.T)
    vals, vecs = np.linalg.eigh(sigma)
    if vals[-1] <= 0.0:
        return 0.0, 0, np.inf
    thresh = 1e-10 * vals[-1]
    keep = vals > thresh
    cond = vals[-1] / vals[0] if vals[0] > 0 else np.inf
    if not keep.all():
        rank = int(keep.sum())
        warnings.warn(
            f"LM covariance numerically singular: rank {rank}/{vals.size}; "
            "using a thresholded pseudo-inverse with rank-adjusted dof",
            RuntimeWarning,
        )
        proj = vecs[:, keep].T @ s
        stat = float(proj @ (proj / vals[keep]))
        return stat, rank, cond
    sol = vecs.T @ s
    return float(sol @ (sol / vals)), dof, cond


def _moment_context(theta0: ModelParams, panel: FirmPanel, fit: Step1Fit, spec: MomentSpec):
    if fit.kind != "ols":
        raise ValueError("LM tests require an OLS first step")
    if fit.case != spec.case:
        raise ValueError("first-step fit and spec disagree on the observables case")
    data = _MomentData(panel, fit, spec)
    m, om_hat, _ = data.residual(theta0, spec.moment_kind)
    # first-step design evaluated at the lagged observables of the moment rows
    lag_obs = make_observables(panel, fit.case, data.periods - 1)
    r = build_design(lag_obs, fit.basis)
    step1_resid = data.u1
    return data, m, om_hat, r, step1_resid


def lm_test_plugin(theta0: ModelParams, panel: FirmPanel, fit: Step1Fit,
                   spec: MomentSpec | None = None) -> LmResult:
    """Plug-in-corrected clustered LM test for the plain moment condition.

    The covariance of the instrumented moments is propagated through the
    first-step OLS coefficients: the moment's coefficient sensitivity is
    -g'(.) times the lagged design row, and the OLS score enters through the
    within-firm cross blocks.
    """
    spec = spec or MomentSpec("original", fit.case)
    if spec.moment_kind != "original":
        raise ValueError("the plug-in-corrected test applies to the original moment")
    data, m, om_hat, r, e1 = _moment_context(theta0, panel, fit, spec)
    n = data.n
    gp = law_g_prime(om_hat, theta0)
    o11, o12, o22 = clustered_omega_blocks(m, data.h, e1, r, data.n_firms, n)
    # coefficient sensitivity: sum_rows h * dm/dtau' = -h' diag(g') r, against
    # the first-step Gram on the same rows
    gram = r.T @ r
    mzr = data.h.T @ (r * (-gp)[:, None])
    c = np.linalg.solve(gram, mzr.T).T
    sigma = o11 + c @ o12.T + o12 @ c.T + c @ o22 @ c.T
    s = data.h.T @ m / n
    stat_core, dof, cond = _psd_inverse_quadratic(sigma, s, data.h.shape[1])
    stat = n * stat_core
    p = float(stats.chi2.sf(stat, dof)) if dof > 0 else 1.0
    return LmResult(float(stat), int(dof), p, "plugin_corrected", float(cond), n, data.n_firms)


def lm_test_standard(theta0: ModelParams, panel: FirmPanel, fit: Step1Fit,
                     spec: MomentSpec | None = None) -> LmResult:
    """Standard clustered LM test for the orthogonalized moment condition."""
    spec = spec or MomentSpec("modified", fit.case)
    if spec.moment_kind != "modified":
        raise ValueError("the standard test applies to the modified moment")
    data = _MomentData(panel, fit, spec)
    m, _, _ = data.residual(theta0, spec.moment_kind)
    n = data.n
    a = _firm_sums(data.h * m[:, None], data.n_firms)
    omega11 = a.T @ a / n
    s = data.h.T @ m / n
    stat_core, dof, cond = _psd_inverse_quadratic(omega11, s, data.h.shape[1])
    stat = n * stat_core
    p = float(stats.chi2.sf(stat, dof)) if dof > 0 else 1.0
    return LmResult(float(stat), int(dof), p, "standard", float(cond), n, data.n_firms)
