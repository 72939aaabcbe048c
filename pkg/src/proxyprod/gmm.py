"""Second-step GMM: moment functions, analytic gradients, weighting, estimation.

Two moment conditions are supported. The plain plug-in moment inserts the
first-step prediction into the law of motion; the modified moment subtracts an
explicit first-order correction, g'(.)*(lagged output minus its prediction),
which makes the condition insensitive to small first-step perturbations.

The estimator minimizes the quadratic form in the instrumented sample moments
over an unconstrained reparameterization of the structural parameters. The
quadratic form is whitened through a Cholesky factor of the weighting matrix
so the search can run as damped Gauss-Newton on explicit residuals, with a
short simplex warm-up before and a quasi-Newton polish after.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit, logit

from .basis import BasisSpec, build_design
from .dgp import FirmPanel
from .firststep import Step1Fit, predict_lagged
from .model import (
    ModelParams,
    law_g,
    law_g_dprime,
    law_g_dtheta,
    law_g_dtheta_cross,
    law_g_prime,
    production_dtheta,
    production_f,
)

__all__ = [
    "INSTRUMENT_VARIABLES",
    "MomentSpec",
    "GmmResult",
    "MomentError",
    "instrument_matrix",
    "moment_original",
    "moment_modified",
    "moment_dtheta",
    "weighting_matrix",
    "estimate",
    "transform_params",
    "untransform_params",
]

INSTRUMENT_VARIABLES = ("k", "k_lag", "v_lag", "pV")


class MomentError(RuntimeError):
    pass


@dataclass(frozen=True)
class MomentSpec:
    """What to estimate: which moment condition, which observables case, and
    the instrument construction."""

    moment_kind: str = "original"
    case: int = 2
    instrument_degree: int = 4

    def __post_init__(self):
        if self.moment_kind not in ("original", "modified"):
            raise ValueError("moment_kind must be 'original' or 'modified'")
        if self.case not in (1, 2, 3):
            raise ValueError("case must be 1, 2 or 3")
        if self.instrument_degree < 0:
            raise ValueError("instrument_degree must be nonnegative")

    def content_hash(self) -> str:
        payload = json.dumps(
            {"moment_kind": self.moment_kind, "case": self.case,
             "instrument_degree": self.instrument_degree},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class GmmResult:
    theta_hat: ModelParams
    objective: float
    moment_vector: np.ndarray
    convergence: dict
    spec: MomentSpec
    weighting: np.ndarray = field(repr=False, default=None)

    @property
    def converged(self) -> bool:
        return bool(self.convergence.get("converged", False))

    def to_json(self) -> str:
        return json.dumps(
            {
                "theta_hat": self.theta_hat.as_array().tolist(),
                "objective": self.objective,
                "convergence": {k: v for k, v in self.convergence.items()},
                "spec_hash": self.spec.content_hash(),
                "moment_kind": self.spec.moment_kind,
                "case": self.spec.case,
            }
        )


# ----------------------------------------------------------------------------
# Rows, instruments, and the per-row moment machinery
# ----------------------------------------------------------------------------

def estimation_periods(panel: FirmPanel, periods=None) -> np.ndarray:
    """Periods usable in step 2: both the period and its lag must be recorded."""
    t = np.arange(1, panel.n_periods) if periods is None else np.atleast_1d(np.asarray(periods))
    if np.any(t < 1) or np.any(t >= panel.n_periods):
        raise IndexError("estimation periods must lie in 1..T-1")
    return t


def instrument_matrix(panel: FirmPanel, degree: int = 4, periods=None,
                      spec: BasisSpec | None = None) -> tuple[np.ndarray, BasisSpec]:
    """Complete Hermite design over (k_t, k_{t-1}, v_{t-1}, pV) on the estimation rows."""
    t = estimation_periods(panel, periods)
    data = {
        "k": panel.k[:, t].ravel(),
        "k_lag": panel.k[:, t - 1].ravel(),
        "v_lag": panel.v[:, t - 1].ravel(),
        "pV": np.repeat(panel.pV, t.size),
    }
    if spec is None:
        spec = BasisSpec(INSTRUMENT_VARIABLES, degree)
    return build_design(data, spec), spec


class _MomentData:
    """Precomputed estimation-row arrays shared across optimizer iterations."""

    def __init__(self, panel: FirmPanel, fit: Step1Fit, spec: MomentSpec, periods=None):
        t = estimation_periods(panel, periods)
        self.periods = t
        self.q_t = panel.q[:, t].ravel()
        self.k_t = panel.k[:, t].ravel()
        self.v_t = panel.v[:, t].ravel()
        self.q_tm1 = panel.q[:, t - 1].ravel()
        self.k_tm1 = panel.k[:, t - 1].ravel()
        self.v_tm1 = panel.v[:, t - 1].ravel()
        ehat = predict_lagged(fit, panel)  # (N, T-1), columns are periods 1..T-1
        self.e_tm1 = ehat[:, t - 1].ravel()
        self.u1 = self.q_tm1 - self.e_tm1
        self.n = self.q_t.size
        self.h, self.h_spec = instrument_matrix(panel, spec.instrument_degree, t)
        self.n_firms = panel.n_firms

    def residual(self, p: ModelParams, kind: str):
        f_t = production_f(self.k_t, self.v_t, p)
        f_tm1 = production_f(self.k_tm1, self.v_tm1, p)
        om = self.e_tm1 - f_tm1
        m = self.q_t - f_t - law_g(om, p)
        if kind == "modified":
            m = m - law_g_prime(om, p) * self.u1
        return m, om, f_tm1

    def residual_and_grad(self, p: ModelParams, kind: str):
        f_t = production_f(self.k_t, self.v_t, p)
        df_t = production_dtheta(self.k_t, self.v_t, p)
        f_tm1 = production_f(self.k_tm1, self.v_tm1, p)
        df_tm1 = production_dtheta(self.k_tm1, self.v_tm1, p)
        om = self.e_tm1 - f_tm1
        gp = law_g_prime(om, p)
        m = self.q_t - f_t - law_g(om, p)
        dm = np.empty((self.n, 6))
        dm[:, :3] = -df_t + gp[:, None] * df_tm1
        dm[:, 3:] = -law_g_dtheta(om, p)
        if kind == "modified":
            gpp = law_g_dprime(om, p)
            m = m - gp * self.u1
            dm[:, :3] += (self.u1 * gpp)[:, None] * df_tm1
            dm[:, 3:] -= self.u1[:, None] * law_g_dtheta_cross(om, p)
        return m, dm


def _as_params(theta) -> ModelParams:
    return theta if isinstance(theta, ModelParams) else ModelParams.from_array(theta)


def _checked(m: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        bad = np.flatnonzero(~np.isfinite(m))[:10]
        raise MomentError(f"non-finite moment residual at rows {bad.tolist()}")
    return m


def moment_original(theta, panel: FirmPanel, fit: Step1Fit, periods=None,
                    instrument_degree: int = 4) -> np.ndarray:
    """Per-observation plug-in residual q_t - f_t - g(e(x_{t-1}) - f_{t-1})."""
    spec = MomentSpec("original", fit.case, instrument_degree)
    data = _MomentData(panel, fit, spec, periods)
    return _checked(data.residual(_as_params(theta), "original")[0])


def moment_modified(theta, panel: FirmPanel, fit: Step1Fit, periods=None,
                    instrument_degree: int = 4) -> np.ndarray:
    """Plug-in residual minus the first-order correction g'(.) * (q_{t-1} - e(x_{t-1}))."""
    spec = MomentSpec("modified", fit.case, instrument_degree)
    data = _MomentData(panel, fit, spec, periods)
    return _checked(data.residual(_as_params(theta), "modified")[0])


def moment_dtheta(theta, panel: FirmPanel, fit: Step1Fit, kind: str = "original",
                  periods=None, instrument_degree: int = 4) -> np.ndarray:
    """Analytic per-observation gradient of the moment residual in theta (n x 6)."""
    spec = MomentSpec(kind, fit.case, instrument_degree)
    data = _MomentData(panel, fit, spec, periods)
    m, dm = data.residual_and_grad(_as_params(theta), kind)
    _checked(m)
    return _checked(dm)


# ----------------------------------------------------------------------------
# Weighting
# ----------------------------------------------------------------------------

def weighting_matrix(hm: np.ndarray | None, mode: str = "optimal",
                     dim: int | None = None) -> np.ndarray:
    """Inverse of the centered sample covariance of the instrumented moments.

    ``hm`` holds per-observation rows of h(z)*m; the covariance uses the
    1/(n-1) centered outer-product sum. A near-singular covariance is
    ridge-regularized (lambda = 1e-10 * trace/dim) with a warning. With
    mode='identity' an identity of the instrument dimension is returned.
    """
    if mode == "identity":
        if dim is None:
            if hm is None:
                raise ValueError("identity mode needs hm or dim")
            dim = hm.shape[1]
        return np.eye(dim)
    if mode != "optimal":
        raise ValueError("mode must be 'optimal' or 'identity'")
    cov = np.cov(np.asarray(hm), rowvar=False, ddof=1)
    dim = cov.shape[0]
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals[0] <= eigvals[-1] * 1e-13:
        lam = 1e-10 * np.trace(cov) / dim
        warnings.warn(
            f"moment covariance near-singular (min eig {eigvals[0]:.3e}); "
            f"adding ridge {lam:.3e}",
            RuntimeWarning,
        )
        cov = cov + lam * np.eye(dim)
    # PSD inverse through Cholesky, then symmetrize
    L = np.linalg.cholesky(cov)
    inv_l = np.linalg.inv(L)
    W = inv_l.T @ inv_l
    return 0.5 * (W + W.T)


def _whitener(W: np.ndarray) -> np.ndarray:
    """Matrix R with R^T R = W, so that g'Wg = ||R g||^2."""
    try:
        return np.linalg.cholesky(W).T
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(W)
        vals = np.clip(vals, 0.0, None)
        return (vecs * np.sqrt(vals)) @ vecs.T


# ----------------------------------------------------------------------------
# Parameter transforms and the estimator
# ----------------------------------------------------------------------------

_BOUNDARY_CLIP = 1e-4


def transform_params(p: ModelParams) -> np.ndarray:
    """Map structural parameters to the unconstrained optimization space.

    logit for alpha, rho_omega, alpha_omega; log(-rho); log(nu); identity for
    mu_omega. Boundary values of the unit-interval parameters are nudged
    inside by 1e-4 so the map stays finite.
    """
    clip = lambda x: min(max(x, _BOUNDARY_CLIP), 1.0 - _BOUNDARY_CLIP)
    return np.array(
        [
            logit(clip(p.alpha)),
            np.log(-p.rho),
            np.log(p.nu),
            p.mu_omega,
            logit(clip(p.rho_omega)),
            logit(clip(p.alpha_omega)),
        ]
    )


def untransform_params(x: np.ndarray) -> np.ndarray:
    # clip so any point the optimizer can reach maps to an admissible
    # parameter vector (expit saturates to exactly 0/1 beyond |x| ~ 37)
    x = np.clip(np.asarray(x, dtype=float), -600.0, 600.0)
    unit = lambda v: float(np.clip(expit(v), 1e-12, 1.0 - 1e-12))
    return np.array(
        [
            unit(x[0]),
            -max(np.exp(x[1]), 1e-3),
            max(np.exp(x[2]), 1e-12),
            x[3],
            unit(x[4]),
            unit(x[5]),
        ]
    )


def _transform_jacobian(theta: np.ndarray) -> np.ndarray:
    """d(theta)/d(unconstrained coordinate), elementwise."""
    al, rho, nu, _, r_o, a_o = theta
    return np.array([al * (1 - al), rho, nu, 1.0, r_o * (1 - r_o), a_o * (1 - a_o)])


def estimate(spec: MomentSpec, panel: FirmPanel, fit: Step1Fit, start: ModelParams,
             W: np.ndarray | None = None, weighting: str = "optimal_at_start",
             periods=None, restarts: int = 5, restart_seed: int = 0,
             simplex_budget: int = 120) -> GmmResult:
    """Minimize the instrumented moment quadratic form.

    When ``W`` is omitted it is built per ``weighting``: 'optimal_at_start'
    inverts the moment covariance at ``start`` (the Monte Carlo convention,
    where ``start`` is the true parameter), 'identity' uses the identity, and
    'two_step' runs an identity-weighted pass first and re-weights at its
    optimum. Convergence requires a whitened-gradient norm below 1e-8 or a
    final objective improvement below 1e-12; otherwise up to ``restarts``
    seeded perturbed starts are tried and the best point is flagged
    non-converged if the tolerance still fails.
    """
    if fit.case != spec.case:
        raise ValueError(f"fit built for case {fit.case}, spec asks case {spec.case}")
    data = _MomentData(panel, fit, spec, periods)

    if W is None:
        if weighting == "identity":
            W = np.eye(data.h.shape[1])
        elif weighting == "optimal_at_start":
            m0, _, _ = data.residual(start, "original")
            W = weighting_matrix(data.h * m0[:, None])
        elif weighting == "two_step":
            first = estimate(spec, panel, fit, start, W=np.eye(data.h.shape[1]),
                             periods=periods, restarts=restarts,
                             restart_seed=restart_seed)
            m1, _, _ = data.residual(first.theta_hat, spec.moment_kind)
            W = weighting_matrix(data.h * m1[:, None])
        else:
            raise ValueError(f"unknown weighting {weighting!r}")

    R = _whitener(W)
    n = data.n
    kind = spec.moment_kind
    h = data.h

    cache: dict = {}

    def eval_point(x: np.ndarray, with_grad: bool):
        key = x.tobytes()
        hit = cache.get(key)
        if hit is not None and (not with_grad or hit[1] is not None):
            return hit
        theta = untransform_params(x)
        p = ModelParams.from_array(theta)
        if with_grad:
            m, dm = data.residual_and_grad(p, kind)
            c = R @ (h.T @ m / n)
            J = (R @ (h.T @ dm / n)) * _transform_jacobian(theta)[None, :]
            cache.clear()
            cache[key] = (c, J)
        else:
            m = data.residual(p, kind)[0]
            c = R @ (h.T @ m / n)
            cache.clear()
            cache[key] = (c, None)
        return cache[key]

    def objective(x):
        c = eval_point(x, False)[0]
        return float(c @ c)

    def grad_norm(x):
        c, J = eval_point(x, True)
        return float(np.linalg.norm(2.0 * J.T @ c))

    def refine(x0):
        # simplex warm-up from the supplied neighborhood, then damped
        # Gauss-Newton on the whitened residuals, then quasi-Newton polish
        r0 = optimize.minimize(objective, x0, method="Nelder-Mead",
                               options={"maxfev": simplex_budget, "xatol": 1e-10,
                                        "fatol": 1e-14})
        ls = optimize.least_squares(
            lambda x: eval_point(x, False)[0], r0.x,
            jac=lambda x: eval_point(x, True)[1],
            method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-13, max_nfev=400,
        )
        r2 = optimize.minimize(
            lambda x: (lambda c, J: (float(c @ c), 2.0 * (J.T @ c)))(*eval_point(x, True)),
            ls.x, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 80},
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            extra = optimize.minimize(
                lambda x: (lambda c, J: (float(c @ c), 2.0 * (J.T @ c)))(*eval_point(x, True)),
                r2.x, jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 10},
            )
        best_x = extra.x if extra.fun <= r2.fun else r2.x
        improvement = abs(r2.fun - extra.fun)
        nfev = int(r0.nfev + ls.nfev + r2.nfev + extra.nfev)
        return best_x, objective(best_x), improvement, nfev

    x_start = transform_params(start)
    rng = np.random.default_rng(restart_seed)
    trials = []
    for trial in range(restarts + 1):
        xs = x_start if trial == 0 else x_start + rng.normal(0.0, 0.4, size=6)
        x_hat, f_hat, improvement, nfev = refine(xs)
        gn = grad_norm(x_hat)
        converged = gn < 1e-8 or improvement < 1e-12
        trials.append({"x": x_hat, "objective": f_hat, "grad_norm": gn,
                       "converged": converged, "nfev": nfev})
        if converged:
            break
    converged_trials = [t for t in trials if t["converged"]]
    pool = converged_trials if converged_trials else trials
    best = min(pool, key=lambda t: t["objective"])
    attempts = len(trials)

    theta_hat = ModelParams.from_array(untransform_params(best["x"]))
    m_hat = data.residual(theta_hat, kind)[0]
    gbar = h.T @ m_hat / n
    convergence = {
        "converged": bool(best["converged"]),
        "grad_norm": best["grad_norm"],
        "objective": best["objective"],
        "restarts": attempts - 1,
        "n_function_evals": best["nfev"],
        "n_rows": n,
    }
    if not best["converged"]:
        warnings.warn("GMM minimization did not meet tolerance; result flagged", RuntimeWarning)
    return GmmResult(
        theta_hat=theta_hat,
        objective=float(best["objective"]),
        moment_vector=gbar,
        convergence=convergence,
        spec=spec,
        weighting=W,
    )
