import numpy as np
import pytest

from proxyprod import (
    DgpConfig,
    ModelParams,
    baseline_config,
    modified_config,
    simulate_panel,
)
from proxyprod.dgp import CalibratedLaw, calibrate_law_cached


def small(cfg: DgpConfig, n_firms=400, n_periods=8, burn_in=300, seed=1234) -> DgpConfig:
    d = cfg.to_dict()
    d.update(n_firms=n_firms, n_periods=n_periods, burn_in=burn_in, seed=seed)
    return DgpConfig.from_dict(d)


# law calibrations reused across the whole session (the nonlinear ones cost seconds)
@pytest.fixture(scope="session")
def law_ar1() -> CalibratedLaw:
    cfg = baseline_config(0.0)
    return calibrate_law_cached(cfg.targets, 0.0)


@pytest.fixture(scope="session")
def law_nonlinear() -> CalibratedLaw:
    cfg = baseline_config(1.0)
    return calibrate_law_cached(cfg.targets, 1.0, 400_000)


@pytest.fixture(scope="session")
def law_modified() -> CalibratedLaw:
    cfg = modified_config(1.0)
    return calibrate_law_cached(cfg.targets, 1.0, 400_000)


@pytest.fixture(scope="session")
def panel_ar1(law_ar1):
    cfg = small(baseline_config(0.0))
    return simulate_panel(cfg, law=law_ar1), cfg.model(law_ar1), cfg


@pytest.fixture(scope="session")
def panel_nonlinear(law_nonlinear):
    cfg = small(baseline_config(1.0), seed=777)
    return simulate_panel(cfg, law=law_nonlinear), cfg.model(law_nonlinear), cfg


@pytest.fixture(scope="session")
def panel_invertible(law_ar1):
    # no demand heterogeneity: the variable input inverts for productivity
    cfg = small(baseline_config(0.0), seed=99)
    d = cfg.to_dict()
    d["demand"]["var_d1"] = 0.0
    d["demand"]["var_d2"] = 0.0
    cfg = DgpConfig.from_dict(d)
    return simulate_panel(cfg, law=law_ar1), cfg.model(law_ar1), cfg


@pytest.fixture(scope="session")
def panel_ar1_mid(law_ar1):
    # big enough for the 70-instrument clustered tests to have power
    cfg = small(baseline_config(0.0), n_firms=1500, n_periods=10, burn_in=500, seed=5)
    return simulate_panel(cfg, law=law_ar1), cfg.model(law_ar1), cfg


@pytest.fixture(scope="session")
def baseline_params() -> ModelParams:
    return ModelParams(alpha=0.3, rho=-1.0, nu=0.95, mu_omega=0.0,
                       rho_omega=0.7, alpha_omega=0.0)
