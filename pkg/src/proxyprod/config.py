"""Experiment configuration: flat key=value files or an equivalent JSON object.

Every key mirrors a field of DgpConfig or ExperimentConfig; there are no
hidden defaults beyond the dataclass defaults themselves. Lines starting with
'#' are comments; values are parsed as bool/int/float/list where the target
field requires it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .dgp import DgpConfig, DemandParams, MomentTargets, PriceParams, baseline_config, modified_config

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "parse_config_text"]

PAPER_SCALE = {"replications": 1000, "n_firms": 5000, "burn_in": 5000}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Full description of a Monte Carlo experiment."""

    dgp: DgpConfig = field(default_factory=DgpConfig)
    replications: int = 50
    cases: tuple[int, ...] = (1, 2, 3)
    moments: tuple[str, ...] = ("original",)
    step1: str = "ols"
    step1_degree: int = 4
    step1_orientation: str = "lagged"
    instrument_degree: int = 4
    run_lm: bool = True
    run_sensitivity: bool = False
    run_invertibility: bool = False
    invertibility_degree: int = 2
    seed: int = 0
    threads: int = 1
    out_dir: str | None = None
    oracle_length: int = 2_000_000

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not set(self.cases) <= {1, 2, 3}:
            raise ConfigError("cases must be a subset of {1,2,3}")
        if not set(self.moments) <= {"original", "modified"}:
            raise ConfigError("moments must be a subset of {original, modified}")
        if self.step1 not in ("ols", "mlp"):
            raise ConfigError("step1 must be 'ols' or 'mlp'")
        if self.step1_orientation not in ("lagged", "current"):
            raise ConfigError("step1_orientation must be 'lagged' or 'current'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cases"] = list(self.cases)
        d["moments"] = list(self.moments)
        return d

    def content_hash(self) -> str:
        import hashlib

        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

_DGP_SCALAR_KEYS = {
    "alpha": "alpha", "rho": "rho", "nu": "nu",
    "sigma2_eps": "sigma2_eps", "n_firms": "n_firms",
    "n_periods": "n_periods", "burn_in": "burn_in",
}
_TARGET_KEYS = {"mean_omega": "mean_omega", "var_omega": "var_omega", "corr_omega": "corr_omega"}
_DEMAND_KEYS = {"mu_delta1": "mu_d1", "var_delta1": "var_d1",
                "mu_delta2": "mu_d2", "var_delta2": "var_d2"}
_PRICE_KEYS = {"mu_pK": "mu_pK", "var_pK": "var_pK", "mu_pV": "mu_pV", "var_pV": "var_pV"}
_EXPERIMENT_KEYS = {
    "replications", "cases", "moments", "step1", "step1_degree", "step1_orientation",
    "instrument_degree", "run_lm", "run_sensitivity", "run_invertibility",
    "invertibility_degree", "seed", "threads", "out_dir", "oracle_length",
}
_KNOWN = (
    set(_DGP_SCALAR_KEYS) | set(_TARGET_KEYS) | set(_DEMAND_KEYS) | set(_PRICE_KEYS)
    | _EXPERIMENT_KEYS | {"preset", "process", "alpha_omega", "paper_scale"}
)


def parse_config_text(text: str) -> dict:
    """Parse the flat key=value format into a raw dict of strings."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def _coerce(key: str, value):
    if isinstance(value, str):
        v = value.strip()
        if key in ("cases",):
            return tuple(int(x) for x in v.replace(",", " ").split())
        if key in ("moments",):
            return tuple(x.strip() for x in v.split(",") if x.strip())
        if key in ("run_lm", "run_sensitivity", "run_invertibility", "paper_scale"):
            if v.lower() not in _BOOL:
                raise ConfigError(f"{key}: expected a boolean, got {value!r}")
            return _BOOL[v.lower()]
        if key in ("step1", "step1_orientation", "process", "preset", "out_dir"):
            return v
        if key in ("n_firms", "n_periods", "burn_in", "replications", "seed", "threads",
                   "step1_degree", "instrument_degree", "invertibility_degree",
                   "oracle_length"):
            return int(v)
        return float(v)
    if key in ("cases", "moments"):
        return tuple(value)
    return value


def build_experiment_config(raw: dict) -> ExperimentConfig:
    """Assemble an ExperimentConfig from a raw mapping of config keys."""
    unknown = set(raw) - _KNOWN
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    vals = {k: _coerce(k, v) for k, v in raw.items()}

    preset = vals.pop("preset", "baseline")
    process = vals.pop("process", None)
    alpha_omega = vals.pop("alpha_omega", None)
    if process is not None:
        if process not in ("ar1", "nonlinear"):
            raise ConfigError("process must be 'ar1' or 'nonlinear'")
        alpha_omega = 0.0 if process == "ar1" else 1.0
    if alpha_omega is None:
        alpha_omega = 1.0 if preset == "modified" else 0.0

    if preset == "baseline":
        dgp = baseline_config(alpha_omega=float(alpha_omega))
    elif preset == "modified":
        dgp = modified_config(alpha_omega=float(alpha_omega))
    else:
        raise ConfigError("preset must be 'baseline' or 'modified'")

    dgp_dict = dgp.to_dict()
    for key, val in list(vals.items()):
        if key in _DGP_SCALAR_KEYS:
            dgp_dict[_DGP_SCALAR_KEYS[key]] = val
            vals.pop(key)
        elif key in _TARGET_KEYS:
            dgp_dict["targets"][_TARGET_KEYS[key]] = val
            vals.pop(key)
        elif key in _DEMAND_KEYS:
            dgp_dict["demand"][_DEMAND_KEYS[key]] = val
            vals.pop(key)
        elif key in _PRICE_KEYS:
            dgp_dict["prices"][_PRICE_KEYS[key]] = val
            vals.pop(key)

    if vals.pop("paper_scale", False):
        vals.setdefault("replications", PAPER_SCALE["replications"])
        dgp_dict["n_firms"] = PAPER_SCALE["n_firms"]
        dgp_dict["burn_in"] = PAPER_SCALE["burn_in"]

    seed = vals.pop("seed", 0)
    dgp_dict["seed"] = int(seed)
    try:
        dgp_cfg = DgpConfig.from_dict(dgp_dict)
        return ExperimentConfig(dgp=dgp_cfg, seed=int(seed), **vals)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def load_config(path) -> ExperimentConfig:
    """Load a configuration file; '.json' files hold the equivalent JSON object."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON in {path}: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError("JSON config must be an object of key/value pairs")
    else:
        raw = parse_config_text(text)
    return build_experiment_config(raw)
