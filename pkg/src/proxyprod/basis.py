"""Complete multivariate Hermite polynomial design matrices.

Builds the full set of products He_{a1}(x1)...He_{ad}(xd) with total degree
a1+...+ad <= D over standardized inputs, using probabilists' Hermite
polynomials. The same builder backs the first-step regression, the GMM
instrument set, and the invertibility test, so standardization statistics are
captured once at fit time and reused for every later evaluation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e

__all__ = ["BasisSpec", "build_design", "hermite_univariate", "n_basis_columns"]


def n_basis_columns(n_vars: int, total_degree: int) -> int:
    """Number of monomials of total degree <= total_degree in n_vars variables."""
    return math.comb(n_vars + total_degree, total_degree)


def _exponent_tuples(n_vars: int, total_degree: int) -> list[tuple[int, ...]]:
    # graded-lexicographic: ascending total degree, lexicographic within a degree
    terms = []
    for deg in range(total_degree + 1):
        block = [t for t in itertools.product(range(deg + 1), repeat=n_vars) if sum(t) == deg]
        block.sort()
        terms.extend(block)
    return terms


@dataclass
class BasisSpec:
    """Specification of a complete Hermite design over named variables.

    ``standardization`` maps each variable to the (mean, std) frozen on the
    first build; predictions at new points reuse the frozen map so the basis
    is one fixed function of the raw data.
    """

    variable_names: tuple[str, ...]
    total_degree: int
    standardization: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.variable_names = tuple(self.variable_names)
        if self.total_degree < 0:
            raise ValueError("total_degree must be nonnegative")

    @property
    def n_columns(self) -> int:
        return n_basis_columns(len(self.variable_names), self.total_degree)

    def exponents(self) -> list[tuple[int, ...]]:
        return _exponent_tuples(len(self.variable_names), self.total_degree)

    def to_dict(self) -> dict:
        return {
            "variable_names": list(self.variable_names),
            "total_degree": self.total_degree,
            "standardization": {k: list(v) for k, v in self.standardization.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(
            variable_names=tuple(d["variable_names"]),
            total_degree=int(d["total_degree"]),
            standardization={k: (float(v[0]), float(v[1])) for k, v in d["standardization"].items()},
        )


def hermite_univariate(x, n: int):
    """Probabilists' Hermite polynomial He_n evaluated elementwise."""
    if n < 0:
        raise ValueError("order must be nonnegative")
    coeffs = np.zeros(n + 1)
    coeffs[n] = 1.0
    return hermite_e.hermeval(np.asarray(x, dtype=float), coeffs)


def build_design(data: dict, spec: BasisSpec) -> np.ndarray:
    """Evaluate the complete Hermite design on the given data columns.

    ``data`` maps variable names to equal-length 1-D arrays. Column j of the
    result is the product of He_{a_m}(standardized x_m) over variables m for
    the j-th exponent tuple in graded-lexicographic order. Standardization is
    computed (and frozen into ``spec``) on the first call.
    """
    missing = [v for v in spec.variable_names if v not in data]
    if missing:
        raise KeyError(f"missing variables for basis: {missing}")
    cols = [np.asarray(data[v], dtype=float).ravel() for v in spec.variable_names]
    n = cols[0].size
    if any(c.size != n for c in cols):
        raise ValueError("all variables must have the same length")

    if not spec.standardization:
        for name, c in zip(spec.variable_names, cols):
            mu, sd = float(c.mean()), float(c.std())
            if sd <= 0.0 or not np.isfinite(sd):
                raise ValueError(f"variable {name!r} has zero variance; cannot standardize")
            spec.standardization[name] = (mu, sd)

    # per-variable Vandermonde of He_0..He_D on the standardized column
    vander = []
    for name, c in zip(spec.variable_names, cols):
        mu, sd = spec.standardization[name]
        vander.append(hermite_e.hermevander((c - mu) / sd, spec.total_degree))

    terms = spec.exponents()
    out = np.empty((n, len(terms)))
    for j, expo in enumerate(terms):
        col = None
        for m, a in enumerate(expo):
            if a == 0:
                continue
            col = vander[m][:, a] if col is None else col * vander[m][:, a]
        out[:, j] = 1.0 if col is None else col
    return out
