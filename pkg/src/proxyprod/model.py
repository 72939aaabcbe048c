"""Closed-form structural model: CES production, productivity law of motion, markups.

All quantities live in logs. The production side is a two-input CES in capital
``k`` and a variable input ``v`` with returns to scale ``nu``; log productivity
follows a first-order Markov process whose conditional mean interpolates between
a Gaussian AR(1) (``alpha_omega = 0``) and a softplus-kinked nonlinear process
(``alpha_omega = 1``). Every function here is pure and vectorizes over numpy
arrays; analytic derivatives are provided for all estimation targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "ModelParams",
    "FirmState",
    "production_f",
    "production_dv",
    "production_dtheta",
    "law_g",
    "law_g_prime",
    "law_g_dprime",
    "law_g_dtheta",
    "law_g_dtheta_cross",
    "persistence_at_zero",
    "log_markup_plus_disturbance",
]

# curvature below this is treated as the (excluded) Cobb-Douglas singularity
RHO_MAX = -1e-3


@dataclass(frozen=True)
class ModelParams:
    """Structural parameters of the production function and law of motion.

    Production side: ``alpha`` is the distributional share of capital,
    ``rho`` the substitution curvature (elasticity of substitution is
    ``1/(1-rho)``), ``nu`` returns to scale. Law of motion: intercept
    ``mu_omega``, persistence coefficient ``rho_omega``, and nonlinearity
    weight ``alpha_omega`` mixing the linear and softplus terms.
    """

    alpha: float
    rho: float
    nu: float
    mu_omega: float
    rho_omega: float
    alpha_omega: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0,1), got {self.alpha}")
        if not (self.rho <= RHO_MAX):
            raise ValueError(f"rho must be <= {RHO_MAX} (strictly negative), got {self.rho}")
        if not (self.nu > 0.0):
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not (0.0 < self.rho_omega < 1.0):
            raise ValueError(f"rho_omega must lie in (0,1), got {self.rho_omega}")
        if not (0.0 <= self.alpha_omega <= 1.0):
            raise ValueError(f"alpha_omega must lie in [0,1], got {self.alpha_omega}")
        for name in ("alpha", "rho", "nu", "mu_omega", "rho_omega", "alpha_omega"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def as_array(self) -> np.ndarray:
        """Parameter vector in the canonical order (alpha, rho, nu, mu_omega, rho_omega, alpha_omega)."""
        return np.array(
            [self.alpha, self.rho, self.nu, self.mu_omega, self.rho_omega, self.alpha_omega]
        )

    @classmethod
    def from_array(cls, theta) -> "ModelParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (6,):
            raise ValueError(f"expected a 6-vector, got shape {theta.shape}")
        return cls(*theta.tolist())

    def replace(self, **kwargs) -> "ModelParams":
        import dataclasses

        return dataclasses.replace(self, **kwargs)


@dataclass(frozen=True)
class FirmState:
    """Per-firm state entering the static input choice: log productivity plus
    the firm's time-invariant demand and price draws."""

    omega: float
    delta1: float
    delta2: float
    pK: float
    pV: float

    def __post_init__(self):
        for name in ("omega", "delta1", "delta2", "pK", "pV"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def production_f(k, v, p: ModelParams):
    """Log output net of productivity: (nu/rho) * ln(alpha e^{rho k} + (1-alpha) e^{rho v}).

    Evaluated through a max-shifted log-sum-exp so large |rho*k| or |rho*v|
    never overflow.
    """
    k = np.asarray(k, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_finite(k, v)
    a = p.rho * k + np.log(p.alpha)
    b = p.rho * v + np.log1p(-p.alpha)
    return (p.nu / p.rho) * np.logaddexp(a, b)


def production_dv(k, v, p: ModelParams):
    """Output elasticity of the variable input, nu*(1-alpha)e^{rho v} / (alpha e^{rho k} + (1-alpha)e^{rho v}).

    Equal to nu times the CES weight on v, computed as a logistic of the
    log-weight difference; always in (0, nu).
    """
    k = np.asarray(k, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_finite(k, v)
    a = p.rho * k + np.log(p.alpha)
    b = p.rho * v + np.log1p(-p.alpha)
    return p.nu * expit(b - a)


def production_dtheta(k, v, p: ModelParams):
    """Gradient of production_f with respect to (alpha, rho, nu).

    Returns an array with a trailing axis of length 3. The nu-partial is
    exactly f/nu since f is linear in nu.
    """
    k = np.asarray(k, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_finite(k, v)
    a = p.rho * k + np.log(p.alpha)
    b = p.rho * v + np.log1p(-p.alpha)
    L = np.logaddexp(a, b)
    f = (p.nu / p.rho) * L
    wk = expit(a - b)  # CES weight on capital
    wv = 1.0 - wk
    d_alpha = (p.nu / p.rho) * (wk / p.alpha - wv / (1.0 - p.alpha))
    d_rho = (p.nu / p.rho) * (wk * k + wv * v) - f / p.rho
    d_nu = f / p.nu
    return np.stack(np.broadcast_arrays(d_alpha, d_rho, d_nu), axis=-1)


# ----------------------------------------------------------------------------
# Law of motion. The nonlinear term is ln(softplus(6*omega))/6, which needs a
# dedicated negative branch: for x = 6*omega << 0, softplus(x) ~ e^x underflows
# inside the outer log long before e^x itself does, so we switch to the series
# ln(softplus(x)) = x - e^x/2 + O(e^{2x}).
# ----------------------------------------------------------------------------

_NEG_BRANCH = -30.0


def _log_softplus(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    lo = x < _NEG_BRANCH
    out[lo] = x[lo] - 0.5 * np.exp(x[lo])
    xs = x[~lo]
    out[~lo] = np.log(np.logaddexp(0.0, xs))
    return out


def _dlog_softplus(x):
    # d/dx ln(softplus(x)) = sigmoid(x)/softplus(x); -> 1 - e^x/2 as x -> -inf
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    lo = x < _NEG_BRANCH
    out[lo] = 1.0 - 0.5 * np.exp(x[lo])
    xs = x[~lo]
    out[~lo] = expit(xs) / np.logaddexp(0.0, xs)
    return out


def _d2log_softplus(x):
    # second derivative; -> -e^x/2 as x -> -inf, -> -1/x^2-ish decay as x -> +inf
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    lo = x < _NEG_BRANCH
    out[lo] = -0.5 * np.exp(x[lo])
    xs = x[~lo]
    s = np.logaddexp(0.0, xs)
    sig = expit(xs)
    out[~lo] = (sig * (1.0 - sig) * s - sig * sig) / (s * s)
    return out


def _law_mix(omega, alpha_omega):
    """The bracketed mixture (1-a)*omega + (a/6)*ln(softplus(6*omega))."""
    return (1.0 - alpha_omega) * omega + (alpha_omega / 6.0) * _log_softplus(6.0 * omega)


def law_g(omega, p: ModelParams):
    """Conditional mean of next-period log productivity."""
    omega = np.asarray(omega, dtype=float)
    _check_finite(omega)
    return p.mu_omega + p.rho_omega * _law_mix(omega, p.alpha_omega)


def law_g_prime(omega, p: ModelParams):
    """First derivative of the law of motion in omega; strictly positive."""
    omega = np.asarray(omega, dtype=float)
    _check_finite(omega)
    return p.rho_omega * ((1.0 - p.alpha_omega) + p.alpha_omega * _dlog_softplus(6.0 * omega))


def law_g_dprime(omega, p: ModelParams):
    """Second derivative of the law of motion in omega."""
    omega = np.asarray(omega, dtype=float)
    _check_finite(omega)
    return 6.0 * p.rho_omega * p.alpha_omega * _d2log_softplus(6.0 * omega)


def law_g_dtheta(omega, p: ModelParams):
    """Gradient of law_g with respect to (mu_omega, rho_omega, alpha_omega).

    Trailing axis of length 3; the mu_omega partial is identically 1.
    """
    omega = np.asarray(omega, dtype=float)
    _check_finite(omega)
    d_mu = np.ones_like(omega)
    d_rho = _law_mix(omega, p.alpha_omega)
    d_alpha = p.rho_omega * (-omega + _log_softplus(6.0 * omega) / 6.0)
    return np.stack(np.broadcast_arrays(d_mu, d_rho, d_alpha), axis=-1)


def law_g_dtheta_cross(omega, p: ModelParams):
    """Cross-partials of law_g: d^2 g / d omega d(mu_omega, rho_omega, alpha_omega)."""
    omega = np.asarray(omega, dtype=float)
    _check_finite(omega)
    ds = _dlog_softplus(6.0 * omega)
    d_mu = np.zeros_like(omega)
    d_rho = (1.0 - p.alpha_omega) + p.alpha_omega * ds
    d_alpha = p.rho_omega * (ds - 1.0)
    return np.stack(np.broadcast_arrays(d_mu, d_rho, d_alpha), axis=-1)


def persistence_at_zero(p: ModelParams) -> float:
    """Slope of the law of motion at omega = 0, the scalar persistence summary.

    Equals rho_omega * ((1 - alpha_omega) + alpha_omega / (2 ln 2)).
    """
    return p.rho_omega * ((1.0 - p.alpha_omega) + p.alpha_omega / (2.0 * np.log(2.0)))


def log_markup_plus_disturbance(p_out, q, pV, v, dfdv):
    """Log markup contaminated by the output disturbance.

    Computed as log price-over-marginal-cost from the static cost side:
    p + q - pV - v + ln(output elasticity). The additive output disturbance
    rides along and averages out across observations.
    """
    dfdv = np.asarray(dfdv, dtype=float)
    if np.any(dfdv <= 0.0):
        raise ValueError("output elasticity must be strictly positive")
    p_out = np.asarray(p_out, dtype=float)
    q = np.asarray(q, dtype=float)
    pV = np.asarray(pV, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_finite(p_out, q, pV, v)
    return p_out + q - pV - v + np.log(dfdv)
