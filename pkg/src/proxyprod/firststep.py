"""First-step estimation of the conditional mean of output given observables.

The observables come in three nested cases; case 2 adds the capital lead so
that the lagged observables span the second-step instruments, and case 3 adds
the output price. The default estimator is OLS on the complete Hermite design;
a small feed-forward network is available as an alternative.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._mlp import MlpHyper, MlpNet, train_mlp
from .basis import BasisSpec, build_design
from .dgp import FirmPanel

__all__ = [
    "CASE_VARIABLES",
    "Step1Fit",
    "make_observables",
    "fit_ols",
    "fit_mlp",
    "predict",
    "predict_lagged",
]

CASE_VARIABLES = {
    1: ("k", "v", "pV"),
    2: ("k_next", "k", "v", "pV"),
    3: ("k_next", "k", "v", "p", "pV"),
}


def _column(panel: FirmPanel, name: str, periods: np.ndarray) -> np.ndarray:
    """One observable stacked over (firm, period) rows, firms outer, periods inner."""
    T = panel.n_periods
    if np.any(periods < 0) or np.any(periods >= T):
        raise IndexError(f"period out of range 0..{T - 1}")
    if name == "k_next":
        return panel.k[:, periods + 1].ravel()
    if name == "k":
        return panel.k[:, periods].ravel()
    if name == "v":
        return panel.v[:, periods].ravel()
    if name == "p":
        return panel.p[:, periods].ravel()
    if name == "q":
        return panel.q[:, periods].ravel()
    if name == "pV":
        return np.repeat(panel.pV, periods.size)
    if name == "pK":
        return np.repeat(panel.pK, periods.size)
    raise KeyError(f"unknown observable {name!r}")


def make_observables(panel: FirmPanel, case: int, periods) -> dict[str, np.ndarray]:
    """Observable columns for the given case over the requested periods.

    Returns a dict of equal-length arrays ordered (firm-major, period-minor).
    Case 2 and 3 need the capital lead, which exists for every recorded period.
    """
    if case not in CASE_VARIABLES:
        raise ValueError(f"case must be 1, 2 or 3, got {case}")
    periods = np.atleast_1d(np.asarray(periods, dtype=int))
    return {name: _column(panel, name, periods) for name in CASE_VARIABLES[case]}


@dataclass
class Step1Fit:
    """Fitted first-step conditional-expectation model.

    For OLS fits, ``basis`` carries the frozen standardization and
    ``coefficients`` the regression weights; ``residuals``/``fitted`` are
    aligned with ``fit_periods`` (firm-major, period-minor). ``orientation``
    records which period block was pooled: 'lagged' fits on periods
    0..T-2 (the lagged positions of the estimation rows), 'current' on all
    periods with observables.
    """

    kind: str
    case: int
    basis: BasisSpec | None
    coefficients: np.ndarray | None
    residuals: np.ndarray
    fitted: np.ndarray
    fit_periods: np.ndarray
    orientation: str = "lagged"
    rank: int | None = None
    condition_number: float | None = None
    network: MlpNet | None = None
    training_report: dict = field(default_factory=dict)

    def to_json(self) -> str:
        if self.kind != "ols":
            raise ValueError("only OLS fits serialize to JSON")
        return json.dumps(
            {
                "kind": self.kind,
                "case": self.case,
                "orientation": self.orientation,
                "basis": self.basis.to_dict(),
                "coefficients": self.coefficients.tolist(),
            }
        )

    @classmethod
    def from_json(cls, payload: str) -> "Step1Fit":
        d = json.loads(payload)
        empty = np.empty(0)
        return cls(
            kind=d["kind"],
            case=int(d["case"]),
            basis=BasisSpec.from_dict(d["basis"]),
            coefficients=np.asarray(d["coefficients"], dtype=float),
            residuals=empty,
            fitted=empty,
            fit_periods=np.empty(0, dtype=int),
            orientation=d["orientation"],
        )


def _fit_periods(panel: FirmPanel, orientation: str) -> np.ndarray:
    T = panel.n_periods
    if orientation == "lagged":
        return np.arange(T - 1)
    if orientation == "current":
        return np.arange(T)
    raise ValueError("orientation must be 'lagged' or 'current'")


def fit_ols(panel: FirmPanel, case: int, degree: int = 4,
            orientation: str = "lagged") -> Step1Fit:
    """Pooled OLS of output on the complete Hermite design of the case observables.

    Solved by a rank-revealing SVD; a rank-deficient design falls back to the
    minimum-norm solution with a condition-number warning instead of aborting.
    """
    periods = _fit_periods(panel, orientation)
    obs = make_observables(panel, case, periods)
    spec = BasisSpec(CASE_VARIABLES[case], degree)
    design = build_design(obs, spec)
    y = panel.q[:, periods].ravel()
    coef, _, rank, svals = np.linalg.lstsq(design, y, rcond=None)
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
    if rank < design.shape[1]:
        warnings.warn(
            f"first-step design is rank deficient ({rank}/{design.shape[1]}, "
            f"condition number {cond:.2e}); using the minimum-norm solution",
            RuntimeWarning,
        )
    fitted = design @ coef
    return Step1Fit(
        kind="ols",
        case=case,
        basis=spec,
        coefficients=coef,
        residuals=y - fitted,
        fitted=fitted,
        fit_periods=periods,
        orientation=orientation,
        rank=int(rank),
        condition_number=cond,
    )


def fit_mlp(panel: FirmPanel, case: int, hyper: MlpHyper | None = None) -> Step1Fit:
    """Train the feed-forward alternative on the same pooled rows as fit_ols.

    Two hidden layers of 128 ReLU units, SGD with learning rate 0.01 and
    mini-batches of 500, an 80/20 firm-level train/validation split, and early
    stopping after 10 non-improving epochs.
    """
    hyper = hyper or MlpHyper()
    periods = _fit_periods(panel, "lagged")
    obs = make_observables(panel, case, periods)
    x = np.column_stack([obs[name] for name in CASE_VARIABLES[case]])
    y = panel.q[:, periods].ravel()
    groups = np.repeat(np.arange(panel.n_firms), periods.size)
    net, report = train_mlp(x, y, groups, hyper)
    fitted = net.forward(x)
    return Step1Fit(
        kind="mlp",
        case=case,
        basis=None,
        coefficients=None,
        residuals=y - fitted,
        fitted=fitted,
        fit_periods=periods,
        orientation="lagged",
        network=net,
        training_report={**report, "hyper": hyper},
    )


def predict(fit: Step1Fit, x_rows: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate the fitted conditional mean on new observable rows.

    Rows must carry exactly the case variables the fit was built on; the
    frozen standardization from fit time is reused.
    """
    names = CASE_VARIABLES[fit.case]
    missing = [v for v in names if v not in x_rows]
    if missing:
        raise KeyError(f"prediction rows missing variables {missing}")
    if fit.kind == "ols":
        design = build_design(x_rows, fit.basis)
        return design @ fit.coefficients
    if fit.kind == "mlp":
        x = np.column_stack([np.asarray(x_rows[n], dtype=float).ravel() for n in names])
        return fit.network.forward(x)
    raise ValueError(f"unknown fit kind {fit.kind!r}")


def predict_lagged(fit: Step1Fit, panel: FirmPanel) -> np.ndarray:
    """Conditional-mean prediction at the lagged observables of each estimation row.

    Estimation rows are periods 1..T-1; their lagged observables sit at
    periods 0..T-2. Returns an (n_firms, T-1) array.
    """
    periods = np.arange(panel.n_periods - 1)
    values = predict(fit, make_observables(panel, fit.case, periods))
    return values.reshape(panel.n_firms, periods.size)
