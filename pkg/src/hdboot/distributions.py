"""Error-law objects shared by the theory solver and the simulation harness.

A law exposes sampling, its variance, and (when available in closed form)
the quantile function used for stratified expectations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri


@dataclass(frozen=True)
class StdNormal:
    """N(0, 1) errors."""

    variance: float = 1.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.standard_normal(size)

    def ppf(self, u: np.ndarray) -> np.ndarray:
        return ndtri(u)


@dataclass(frozen=True)
class StdLaplace:
    """Standard double exponential (unit scale), variance 2."""

    variance: float = 2.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.laplace(0.0, 1.0, size)

    def ppf(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.where(u < 0.5, np.log(2.0 * u), -np.log(2.0 * (1.0 - u)))


@dataclass(frozen=True)
class GaussianConvolution:
    """Base law convolved with N(0, spread_sd^2), rescaled to target variance.

    Used for the relative-risk experiment arms; sampling only.
    """

    base: object
    spread_sd: float
    target_variance: float

    @property
    def variance(self) -> float:
        return self.target_variance

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raw = self.base.sample(rng, size) + self.spread_sd * rng.standard_normal(size)
        raw_var = self.base.variance + self.spread_sd**2
        return raw * np.sqrt(self.target_variance / raw_var)


@dataclass(frozen=True)
class ScaledNormal:
    """N(0, variance) errors."""

    variance: float

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.sqrt(self.variance) * rng.standard_normal(size)

    def ppf(self, u: np.ndarray) -> np.ndarray:
        return np.sqrt(self.variance) * ndtri(u)


ERROR_LAWS = {
    "StdNormal": StdNormal,
    "StdLaplace": StdLaplace,
}


def make_error_law(name: str):
    try:
        return ERROR_LAWS[name]()
    except KeyError:
        raise ValueError(f"unknown error law {name!r}; choose from {sorted(ERROR_LAWS)}")
