"""Sensitivity of the estimated parameters to the first-step prediction error.

The estimator's probability limit can be viewed as a function of a scale
placed on the prediction error that invertibility failure injects into the
plug-in moment. Differentiating the GMM first-order condition in that scale
at the estimated model gives a per-parameter derivative, obtained by solving
a 6x6 linear system built from analytic moment derivatives and two feasible
score substitutes that replace the unobservable prediction error with the
observable first-step residual.

A small derivative says small changes in the prediction error barely move the
estimates; a large one warns that the estimates are fragile to invertibility
failure. The diagnostic is evaluated at the plain plug-in estimate with the
same instruments and weighting used in estimation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dgp import FirmPanel
from .firststep import Step1Fit
from .gmm import MomentSpec, _MomentData
from .model import (
    ModelParams,
    law_g_dprime,
    law_g_dtheta,
    law_g_dtheta_cross,
    law_g_prime,
    production_dtheta,
    production_f,
)

__all__ = [
    "SensitivityResult",
    "foc_jacobian",
    "prediction_error_gradient",
    "diagnostic",
]

_FD_STEP = 1e-5


@dataclass
class SensitivityResult:
    """Solution of the sensitivity system foc_jacobian @ x + scale_gradient = 0."""

    foc_jacobian: np.ndarray      # 6x6
    scale_gradient: np.ndarray    # 6-vector
    dtheta_dscale: np.ndarray     # 6-vector, the diagnostic
    solve_residual: float
    condition_number: float
    reliable: bool

    def to_dict(self) -> dict:
        names = ["alpha", "rho", "nu", "mu_omega", "rho_omega", "alpha_omega"]
        return {
            "dtheta_dscale": dict(zip(names, self.dtheta_dscale.tolist())),
            "condition_number": self.condition_number,
            "solve_residual": self.solve_residual,
            "reliable": self.reliable,
        }


_PARAM_BOUNDS = {
    "alpha": (1e-9, 1.0 - 1e-9),
    "rho": (-np.inf, -1e-3),
    "nu": (1e-9, np.inf),
    "mu_omega": (-np.inf, np.inf),
    "rho_omega": (1e-9, 1.0 - 1e-9),
    "alpha_omega": (0.0, 1.0),
}


def _fd_stencil(p: ModelParams, name: str):
    """Clipped central-difference stencil (p_up, p_dn, denominator) for one parameter."""
    value = getattr(p, name)
    step = _FD_STEP * max(1.0, abs(value))
    lo, hi = _PARAM_BOUNDS[name]
    up = min(value + step, hi)
    dn = max(value - step, lo)
    return p.replace(**{name: up}), p.replace(**{name: dn}), up - dn


def _symmetrized(out: np.ndarray, label: str) -> np.ndarray:
    asym = np.max(np.abs(out - np.transpose(out, (0, 2, 1))))
    if asym > 1e-6:
        warnings.warn(f"{label} Hessian asymmetry {asym:.2e}", RuntimeWarning)
    return 0.5 * (out + np.transpose(out, (0, 2, 1)))


def _production_hessian(k, v, p: ModelParams) -> np.ndarray:
    """d^2 f / d(alpha,rho,nu)^2 per row, by central differences of the analytic gradient."""
    out = np.empty((k.size, 3, 3))
    for j, name in enumerate(("alpha", "rho", "nu")):
        pu, pd, denom = _fd_stencil(p, name)
        out[:, :, j] = (production_dtheta(k, v, pu) - production_dtheta(k, v, pd)) / denom
    return _symmetrized(out, "production")


def _law_hessian(om, p: ModelParams) -> np.ndarray:
    """d^2 g / d(mu,rho,alpha)_omega^2 per row, by central differences of the analytic gradient."""
    out = np.empty((om.size, 3, 3))
    for j, name in enumerate(("mu_omega", "rho_omega", "alpha_omega")):
        pu, pd, denom = _fd_stencil(p, name)
        out[:, :, j] = (law_g_dtheta(om, pu) - law_g_dtheta(om, pd)) / denom
    return _symmetrized(out, "law-of-motion")


def moment_hessian(theta_hat: ModelParams, data: _MomentData) -> np.ndarray:
    """Per-row Hessian of the plug-in moment residual in all six parameters."""
    p = theta_hat
    df_tm1 = production_dtheta(data.k_tm1, data.v_tm1, p)
    om = data.e_tm1 - production_f(data.k_tm1, data.v_tm1, p)
    gp = law_g_prime(om, p)
    gpp = law_g_dprime(om, p)
    hess = np.zeros((data.n, 6, 6))
    hf_t = _production_hessian(data.k_t, data.v_t, p)
    hf_tm1 = _production_hessian(data.k_tm1, data.v_tm1, p)
    hess[:, :3, :3] = (
        -hf_t
        + gp[:, None, None] * hf_tm1
        - gpp[:, None, None] * (df_tm1[:, :, None] * df_tm1[:, None, :])
    )
    cross = df_tm1[:, :, None] * law_g_dtheta_cross(om, p)[:, None, :]
    hess[:, :3, 3:] = cross
    hess[:, 3:, :3] = np.transpose(cross, (0, 2, 1))
    hess[:, 3:, 3:] = -_law_hessian(om, p)
    return hess


def _context(theta_hat: ModelParams, panel: FirmPanel, fit: Step1Fit,
             W: np.ndarray, instrument_degree: int):
    spec = MomentSpec("original", fit.case, instrument_degree)
    data = _MomentData(panel, fit, spec)
    m, dm = data.residual_and_grad(theta_hat, "original")
    gbar = data.h.T @ m / data.n
    gmat = data.h.T @ dm / data.n
    h_w_g = data.h @ (W @ gbar)
    return data, m, dm, gbar, gmat, h_w_g


def foc_jacobian(theta_hat: ModelParams, panel: FirmPanel, fit: Step1Fit,
                 W: np.ndarray, instrument_degree: int = 4) -> np.ndarray:
    """Jacobian of the GMM first-order condition with respect to the parameters.

    Column l stacks the Hessian contraction E[(d^2 m e_l) h'] W E[h m] on top
    of the Gauss-Newton term E[dm h'] W E[h dm'].
    """
    data, m, dm, gbar, gmat, h_w_g = _context(theta_hat, panel, fit, W, instrument_degree)
    hess = moment_hessian(theta_hat, data)
    first = np.einsum("ijl,i->jl", hess, h_w_g) / data.n
    return first + gmat.T @ W @ gmat


def prediction_error_gradient(theta_hat: ModelParams, panel: FirmPanel, fit: Step1Fit,
                              W: np.ndarray, instrument_degree: int = 4) -> np.ndarray:
    """Gradient of the first-order condition in the prediction-error scale.

    Uses the feasible substitutes: the first-step residual stands in for the
    prediction error inside both the moment's scale derivative
    (g'(.) * residual) and its parameter cross-derivative.
    """
    data, m, dm, gbar, gmat, h_w_g = _context(theta_hat, panel, fit, W, instrument_degree)
    p = theta_hat
    om = data.e_tm1 - production_f(data.k_tm1, data.v_tm1, p)
    df_tm1 = production_dtheta(data.k_tm1, data.v_tm1, p)
    gp = law_g_prime(om, p)
    gpp = law_g_dprime(om, p)
    psi = gp * data.u1
    phi = np.empty((data.n, 6))
    phi[:, :3] = -(gpp * data.u1)[:, None] * df_tm1
    phi[:, 3:] = law_g_dtheta_cross(om, p) * data.u1[:, None]
    term1 = phi.T @ h_w_g / data.n
    term2 = gmat.T @ (W @ (data.h.T @ psi / data.n))
    return term1 + term2


def diagnostic(theta_hat: ModelParams, panel: FirmPanel, fit: Step1Fit,
               W: np.ndarray, instrument_degree: int = 4) -> SensitivityResult:
    """Per-parameter derivative of the estimate in the prediction-error scale.

    Solves the 6x6 system; if the Jacobian is numerically singular the
    pseudo-inverse solution is returned flagged unreliable.
    """
    jac = foc_jacobian(theta_hat, panel, fit, W, instrument_degree)
    grad = prediction_error_gradient(theta_hat, panel, fit, W, instrument_degree)
    cond = float(np.linalg.cond(jac))
    reliable = np.isfinite(cond) and cond < 1e12
    if reliable:
        x = np.linalg.solve(jac, -grad)
    else:
        warnings.warn(
            f"sensitivity system ill-conditioned (cond {cond:.2e}); "
            "reporting the pseudo-inverse solution",
            RuntimeWarning,
        )
        x = -np.linalg.pinv(jac) @ grad
    residual = float(np.linalg.norm(jac @ x + grad))
    return SensitivityResult(
        foc_jacobian=jac,
        scale_gradient=grad,
        dtheta_dscale=x,
        solve_residual=residual,
        condition_number=cond,
        reliable=reliable,
    )
