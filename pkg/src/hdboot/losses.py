"""Convex loss family for M-estimation.

Each loss exposes rho, its derivative psi, the convention-extended second
derivative psi_prime, the IRLS reweighting function, and the Moreau
proximal mapping of c*rho together with its piecewise-linear description
(used for exact Gaussian expectations in the asymptotic solver).

Conventions for non-smooth losses: Huber has psi_prime(x) = 1 when
|x| <= k, else 0; absolute error has psi_prime(x) = 1 when x == 0, else 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HUBER_DEFAULT_K = 1.345

#: floor for |residual| in IRLS weights of the absolute-error family
L1_WEIGHT_FLOOR = 1e-8


@dataclass(frozen=True)
class Loss:
    """Tagged loss: one of squared, huber, absolute, smoothed_absolute.

    ``k`` is the Huber transition point, ``eta`` the quadratic curvature
    added to the absolute loss by the smoothed variant.
    """

    kind: str
    k: float = HUBER_DEFAULT_K
    eta: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("squared", "huber", "absolute", "smoothed_absolute"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "huber" and not self.k > 0:
            raise ValueError("Huber transition point k must be positive")
        if self.kind == "smoothed_absolute" and not self.eta > 0:
            raise ValueError("smoothed_absolute curvature eta must be positive")

    # -- pointwise calculus ------------------------------------------------

    def rho(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "squared":
            return 0.5 * x * x
        if self.kind == "huber":
            a = np.abs(x)
            return np.where(a <= self.k, 0.5 * x * x, self.k * a - 0.5 * self.k**2)
        if self.kind == "absolute":
            return np.abs(x)
        return np.abs(x) + 0.5 * self.eta * x * x

    def psi(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "squared":
            return x
        if self.kind == "huber":
            return np.clip(x, -self.k, self.k)
        if self.kind == "absolute":
            return np.sign(x)
        return np.sign(x) + self.eta * x

    def psi_prime(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "squared":
            return np.ones_like(x)
        if self.kind == "huber":
            return (np.abs(x) <= self.k).astype(float)
        if self.kind == "absolute":
            return (x == 0.0).astype(float)
        return self.eta + (x == 0.0).astype(float)

    def irls_weights(self, residuals: np.ndarray) -> np.ndarray:
        """Reweighting psi(e)/e, clamped so zero residuals stay finite."""
        e = np.asarray(residuals, dtype=float)
        if self.kind == "squared":
            return np.ones_like(e)
        if self.kind == "huber":
            a = np.abs(e)
            return np.where(a <= self.k, 1.0, self.k / np.maximum(a, self.k))
        w = 1.0 / np.maximum(np.abs(e), L1_WEIGHT_FLOOR)
        if self.kind == "smoothed_absolute":
            w = w + self.eta
        return w

    # -- proximal calculus ---------------------------------------------------

    def prox(self, c: float, x: np.ndarray) -> np.ndarray:
        """Moreau proximal mapping of c*rho: argmin_z c rho(z) + (z-x)^2/2."""
        if not c >= 0:
            raise ValueError("prox scale c must be nonnegative")
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for lo, hi, slope, intercept in self.prox_segments(c):
            mask = (x > lo) & (x <= hi)
            out[mask] = slope * x[mask] + intercept
        return out

    def prox_deriv(self, c: float, x: np.ndarray) -> np.ndarray:
        """Derivative of the proximal mapping with respect to its argument."""
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for lo, hi, slope, _ in self.prox_segments(c):
            mask = (x > lo) & (x <= hi)
            out[mask] = slope
        return out

    def prox_segments(self, c: float) -> list[tuple[float, float, float, float]]:
        """Piecewise-linear form of prox(c*rho): (lo, hi, slope, intercept).

        The mapping equals slope*x + intercept on (lo, hi]; segments
        partition the real line.
        """
        inf = np.inf
        if self.kind == "squared" or c == 0.0:
            s = 1.0 / (1.0 + c) if self.kind == "squared" else 1.0
            return [(-inf, inf, s, 0.0)]
        if self.kind == "huber":
            t = self.k * (1.0 + c)
            return [
                (-inf, -t, 1.0, c * self.k),
                (-t, t, 1.0 / (1.0 + c), 0.0),
                (t, inf, 1.0, -c * self.k),
            ]
        if self.kind == "absolute":
            return [
                (-inf, -c, 1.0, c),
                (-c, c, 0.0, 0.0),
                (c, inf, 1.0, -c),
            ]
        m = 1.0 / (1.0 + c * self.eta)
        return [
            (-inf, -c, m, m * c),
            (-c, c, 0.0, 0.0),
            (c, inf, m, -m * c),
        ]

    @property
    def kinked_at_zero(self) -> bool:
        """Whether rho has a kink at the origin (absolute-error family)."""
        return self.kind in ("absolute", "smoothed_absolute")


def squared() -> Loss:
    return Loss("squared")


def huber(k: float = HUBER_DEFAULT_K) -> Loss:
    return Loss("huber", k=k)


def absolute() -> Loss:
    return Loss("absolute")


def smoothed_absolute(eta: float = 1e-8) -> Loss:
    return Loss("smoothed_absolute", eta=eta)


def loss_from_name(name: str, k: float = HUBER_DEFAULT_K, eta: float = 1e-8) -> Loss:
    """Map CLI/config spellings to a Loss."""
    name = name.lower().replace("-", "_")
    table = {
        "l2": squared,
        "squared": squared,
        "least_squares": squared,
        "huber": lambda: huber(k),
        "l1": absolute,
        "absolute": absolute,
        "smoothed_l1": lambda: smoothed_absolute(eta),
        "smoothed_absolute": lambda: smoothed_absolute(eta),
    }
    try:
        return table[name]()
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {sorted(table)}")
