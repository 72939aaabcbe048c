"""Calibrate the law of motion and simulate a firm panel.

The calibration picks (intercept, persistence, innovation variance) so the
stationary productivity chain hits target mean/variance/autocorrelation; the
simulator then draws per-firm demand and price heterogeneity, solves the
static input choice each period, and applies the closed-form capital policy.
"""

import numpy as np

from proxyprod import baseline_config, simulate_panel
from proxyprod.dgp import calibrate_law_cached

cfg = baseline_config(alpha_omega=1.0, n_firms=1000, n_periods=12,
                      burn_in=800, seed=42)
law = calibrate_law_cached(cfg.targets, cfg.alpha_omega, 400_000)
print("calibrated law of motion:")
print(f"  mu_omega = {law.mu_omega:.4f}, rho_omega = {law.rho_omega:.4f}, "
      f"sigma2_omega = {law.sigma2_omega:.4f}")

panel = simulate_panel(cfg, law=law)
model = cfg.model(law)
panel.validate(model=model)
print("\npanel accounting identities hold (output decomposition, demand curve,")
print("and the marginal-revenue = marginal-cost condition at the stored input).")

om = panel.omega
print(f"\nstationary moments over the recorded window (targets 0 / 0.25 / 0.7):")
print(f"  mean {om.mean():+.4f}, variance {om.var():.4f}, "
      f"lag-1 corr {np.corrcoef(om[:, 1:].ravel(), om[:, :-1].ravel())[0, 1]:.4f}")

markup = np.logaddexp(0.0, panel.delta2)
print(f"\nlog markup across firms: mean {markup.mean():.4f} (target 0.25), "
      f"variance {markup.var():.4f} (target 0.0126)")

panel.to_csv("demo_panel.csv", include_latent=True)
print("\nwrote demo_panel.csv (+ .json sidecar with seed and config hash)")
