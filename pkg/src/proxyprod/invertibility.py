"""Mean-independence test of the observables-to-productivity inversion.

If current observables pin down productivity, lagged observables carry no
information about output beyond a flexible function of the current ones. The
test runs the partially linear regression of output on the raw lagged
observables plus a complete polynomial block in the current observables, and
refers a firm-clustered Wald statistic on the lagged block to chi-square and
F distributions. Rejection is evidence against invertibility.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .basis import BasisSpec, build_design
from .dgp import FirmPanel

__all__ = ["InvertTestResult", "clustered_covariance", "test_mean_independence"]

DEFAULT_X_VARIABLES = ("k", "v", "pV")


@dataclass
class InvertTestResult:
    beta_hat: np.ndarray
    beta_cov: np.ndarray
    wald: float
    f_stat: float
    p_value_chi2: float
    p_value_f: float
    r_squared: float
    n_obs: int
    n_firms: int
    n_regressors: int
    dropped_lagged: int = 0
    dropped_flexible: int = 0

    def to_dict(self) -> dict:
        return {
            "wald": self.wald,
            "f_stat": self.f_stat,
            "p_value_chi2": self.p_value_chi2,
            "p_value_f": self.p_value_f,
            "r_squared": self.r_squared,
            "n_obs": self.n_obs,
            "n_firms": self.n_firms,
            "n_regressors": self.n_regressors,
            "dropped_lagged": self.dropped_lagged,
            "dropped_flexible": self.dropped_flexible,
        }


def clustered_covariance(X: np.ndarray, residuals: np.ndarray,
                         firm_ids: np.ndarray) -> np.ndarray:
    """Cluster-robust sandwich covariance (XtX)^-1 [sum_g s_g s_g'] (XtX)^-1
    with s_g the within-cluster score sum."""
    X = np.asarray(X, dtype=float)
    e = np.asarray(residuals, dtype=float).ravel()
    firm_ids = np.asarray(firm_ids)
    xtx = X.T @ X
    scores = X * e[:, None]
    order = np.argsort(firm_ids, kind="stable")
    sorted_ids = firm_ids[order]
    boundaries = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    cumulative = np.cumsum(scores[order], axis=0)
    block_ends = np.r_[boundaries[1:] - 1, len(e) - 1]
    firm_totals = cumulative[block_ends]
    firm_totals[1:] -= cumulative[block_ends[:-1]]
    meat = firm_totals.T @ firm_totals
    try:
        bread = np.linalg.inv(xtx)
    except np.linalg.LinAlgError:
        warnings.warn("X'X singular; using the pseudo-inverse", RuntimeWarning)
        bread = np.linalg.pinv(xtx)
    return bread @ meat @ bread


def _greedy_independent(base: np.ndarray | None, block: np.ndarray,
                        tol: float = 1e-8) -> list[int]:
    """Indices of block columns that are numerically independent of ``base``
    and of the already-kept block columns, scanning left to right."""
    n = block.shape[0]
    kept: list[int] = []
    if base is None or base.shape[1] == 0:
        basis = np.empty((n, 0))
    else:
        basis, _ = np.linalg.qr(base)
    for j in range(block.shape[1]):
        col = block[:, j]
        norm = np.linalg.norm(col)
        if norm == 0.0:
            continue
        u = col / norm
        resid = u - basis @ (basis.T @ u)
        resid -= basis @ (basis.T @ resid)  # second Gram-Schmidt pass
        rnorm = np.linalg.norm(resid)
        if rnorm > tol:
            kept.append(j)
            basis = np.column_stack([basis, resid / rnorm])
    return kept


def _resolve_collinearity(lagged: np.ndarray, flexible: np.ndarray):
    """Full-rank design with the flexible span intact.

    Redundancies inside the flexible block are dropped there first. A lagged
    column that lies inside the span of the flexible block (plus the lagged
    columns already kept) cannot separate lagged from current information, so
    it is removed from the tested block and reported rather than left to
    produce a spurious rejection.
    """
    keep_flex = _greedy_independent(None, flexible)
    flex = flexible[:, keep_flex]
    keep_lag = _greedy_independent(flex, lagged)
    n_drop_flex = flexible.shape[1] - len(keep_flex)
    n_drop_lag = lagged.shape[1] - len(keep_lag)
    if n_drop_flex:
        warnings.warn(
            f"dropping {n_drop_flex} redundant flexible-block column(s)", RuntimeWarning
        )
    if n_drop_lag:
        warnings.warn(
            f"dropping {n_drop_lag} lagged column(s) lying in the flexible span; "
            "they are excluded from the tested block",
            RuntimeWarning,
        )
    return lagged[:, keep_lag], flex, keep_lag, n_drop_flex, n_drop_lag


def _panel_to_frame(panel: FirmPanel | pd.DataFrame) -> pd.DataFrame:
    if isinstance(panel, pd.DataFrame):
        required = {"firm_id", "period", "q"}
        if not required.issubset(panel.columns):
            raise ValueError(f"panel frame must contain columns {sorted(required)}")
        return panel
    return panel.to_frame()


def test_mean_independence(panel: FirmPanel | pd.DataFrame,
                           x_variables=DEFAULT_X_VARIABLES,
                           degree: int = 2) -> InvertTestResult:
    """Firm-clustered Wald/F test that lagged observables do not predict output.

    ``x_variables`` selects the observable set; the flexible block is the
    complete Hermite polynomial design of the given total degree in the
    current observables, and the tested block holds the raw lagged values of
    the same variables.
    """
    df = _panel_to_frame(panel).sort_values(["firm_id", "period"])
    missing = [v for v in x_variables if v not in df.columns]
    if missing:
        raise KeyError(f"panel lacks observables {missing}")

    wide = {c: df.pivot_table(index="firm_id", columns="period", values=c, sort=True)
            for c in (*x_variables, "q")}
    arr = {c: w.to_numpy(dtype=float) for c, w in wide.items()}
    n_firms, T = arr["q"].shape
    if T < 2:
        raise ValueError("need at least two periods per firm")

    current = {v: arr[v][:, 1:].ravel() for v in x_variables}
    lagged = np.column_stack([arr[v][:, :-1].ravel() for v in x_variables])
    y = arr["q"][:, 1:].ravel()
    firm_ids = np.repeat(np.arange(n_firms), T - 1)
    ok = np.isfinite(y) & np.all(np.isfinite(lagged), axis=1)
    for v in current.values():
        ok &= np.isfinite(v)
    lagged, y, firm_ids = lagged[ok], y[ok], firm_ids[ok]
    current = {k: v[ok] for k, v in current.items()}

    spec = BasisSpec(tuple(x_variables), degree)
    flexible = build_design(current, spec)
    lagged, flexible, kept_lag, n_drop_flex, n_drop_lag = _resolve_collinearity(
        lagged, flexible
    )
    if lagged.shape[1] == 0:
        raise ValueError("every lagged column lies in the flexible span; nothing to test")

    X = np.column_stack([lagged, flexible])
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        warnings.warn("design rank-deficient after the drop pass; minimum-norm fit",
                      RuntimeWarning)
    resid = y - X @ coef
    tss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / tss if tss > 0 else 0.0

    vcov = clustered_covariance(X, resid, firm_ids)
    p_lag = lagged.shape[1]
    beta = coef[:p_lag]
    vbeta = vcov[:p_lag, :p_lag]
    wald = float(beta @ np.linalg.solve(vbeta, beta))
    n_clusters = np.unique(firm_ids).size
    f_stat = wald / p_lag
    p_chi2 = float(stats.chi2.sf(wald, p_lag))
    p_f = float(stats.f.sf(f_stat, p_lag, max(n_clusters - 1, 1)))
    return InvertTestResult(
        beta_hat=beta,
        beta_cov=vbeta,
        wald=wald,
        f_stat=f_stat,
        p_value_chi2=p_chi2,
        p_value_f=p_f,
        r_squared=float(r2),
        n_obs=int(y.size),
        n_firms=int(n_clusters),
        n_regressors=int(X.shape[1]),
        dropped_lagged=int(n_drop_lag),
        dropped_flexible=int(n_drop_flex),
    )
