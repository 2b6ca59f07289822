"""Estimating the error law by Gaussian deconvolution of predicted errors.

The predicted errors behave like the true error plus an independent
centered Gaussian whose variance matches the squared coefficient-estimation
risk.  This module strips that Gaussian off with a Fourier-domain kernel
estimator, cleans the resulting cdf, and drives a residual bootstrap from
draws of the deconvolved law.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .exceptions import (
    DegenerateCdfError,
    HdbootError,
    NumericalUnderflowError,
    ZeroRowError,
)
from .losses import Loss
from .mestim import Dataset, PredictedErrors, fit, predicted_errors
from .resample import ResamplingPlan, BootstrapOutcome, _assemble, _check_failures, _refit_same_design
from .rng import keyed_rng

#: cdf tail probability clamped away (both sides)
TAIL_CLAMP = 1e-3
#: grid construction: absolute spacing target and minimum point count
GRID_SPACING = 0.01
GRID_MIN_POINTS = 512
#: number of frequency nodes for the Fourier inversion
FREQ_POINTS = 2048
#: largest exponent allowed in the Gaussian characteristic-function divisor
MAX_EXPONENT = 700.0

_SQRT2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class DeconvolvedCdf:
    """Cdf estimate on a grid, after monotonization."""

    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    noise_sd: float

    def to_csv(self, path) -> None:
        """Two-column CSV (grid,value) for inspection."""
        np.savetxt(
            path,
            np.column_stack([self.grid, self.values]),
            delimiter=",",
            header="grid,value",
            comments="",
        )

    def variance(self) -> float:
        """Variance of the estimated law (midpoint-mass quadrature)."""
        dG = np.diff(self.values)
        mid = 0.5 * (self.grid[1:] + self.grid[:-1])
        mean = float(mid @ dG)
        return float((mid - mean) ** 2 @ dG)


@dataclass(frozen=True)
class EllipticalScales:
    """Per-row squared scale estimates, mean one by construction."""

    lambda_sq_hat: np.ndarray


def estimate_noise_sd(pe: PredictedErrors) -> float | None:
    """Sd of the Gaussian part of the predicted errors.

    Returns sqrt(var(pred) - sigma_hat_ls^2), or None when the difference
    is nonpositive, signalling the caller to skip deconvolution and
    bootstrap the predicted errors directly.
    """
    excess = float(np.var(pe.values, ddof=1)) - pe.sigma_hat_ls
    if excess <= 0.0:
        return None
    return float(np.sqrt(excess))


def default_bandwidth(noise_sd: float, n: int) -> float:
    """Rate-appropriate bandwidth for Gaussian deconvolution."""
    return noise_sd / np.sqrt(np.log(n))


def deconvolve_cdf(
    pe: PredictedErrors | np.ndarray,
    noise_sd: float,
    bandwidth: float | None = None,
    noise_sd_per_obs: np.ndarray | None = None,
) -> DeconvolvedCdf:
    """Fourier-deconvolve a centered Gaussian out of the observed values.

    Uses the kernel whose characteristic function is (1 - t^2)^3 on
    [-1, 1]; the compact support keeps division by the Gaussian
    characteristic function finite.  ``noise_sd_per_obs`` switches to a
    per-observation noise level (heteroskedastic designs); it is off by
    default.  The raw estimate is passed through ``monotonize_cdf``.
    """
    obs = pe.values if isinstance(pe, PredictedErrors) else np.asarray(pe, dtype=float)
    n = obs.size
    if not noise_sd > 0:
        raise ValueError("noise_sd must be positive")
    h = default_bandwidth(noise_sd, n) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")

    worst_sd = noise_sd if noise_sd_per_obs is None else float(np.max(noise_sd_per_obs))
    exponent = 0.5 * (worst_sd / h) ** 2
    if exponent > MAX_EXPONENT:
        suggestion = worst_sd / np.sqrt(2.0 * MAX_EXPONENT * 0.9)
        raise NumericalUnderflowError(
            f"Gaussian characteristic function underflows at bandwidth {h:.3g}; "
            f"try bandwidth >= {suggestion:.3g}",
            suggested_bandwidth=suggestion,
        )

    lo, hi = float(obs.min()), float(obs.max())
    span = hi - lo
    if span <= 0:
        raise DegenerateCdfError("observed values are constant")
    ngrid = max(GRID_MIN_POINTS, int(np.ceil(span / GRID_SPACING)) + 1)
    x = np.linspace(lo, hi, ngrid)

    t = np.linspace(0.0, 1.0 / h, FREQ_POINTS)
    kernel_cf = (1.0 - (t * h) ** 2) ** 3
    t_obs = np.outer(t, obs)
    if noise_sd_per_obs is None:
        amp = kernel_cf * np.exp(0.5 * (noise_sd * t) ** 2)
        re = np.cos(t_obs).mean(axis=1) * amp
        im = np.sin(t_obs).mean(axis=1) * amp
    else:
        sd = np.asarray(noise_sd_per_obs, dtype=float)
        if sd.shape != obs.shape:
            raise ValueError("noise_sd_per_obs must match the observations in length")
        boost = np.exp(0.5 * np.outer(t, sd) ** 2)
        re = (np.cos(t_obs) * boost).mean(axis=1) * kernel_cf
        im = (np.sin(t_obs) * boost).mean(axis=1) * kernel_cf

    xt = np.outer(x, t)
    density = (np.cos(xt) @ re + np.sin(xt) @ im) * (t[1] - t[0]) / np.pi
    # trapezoid end corrections: halve the first and last frequency node
    density -= 0.5 * (t[1] - t[0]) / np.pi * (np.cos(x * t[0]) * re[0] + np.sin(x * t[0]) * im[0])
    density -= 0.5 * (t[1] - t[0]) / np.pi * (np.cos(x * t[-1]) * re[-1] + np.sin(x * t[-1]) * im[-1])
    raw = cumulative_trapezoid(density, x, initial=0.0)
    return monotonize_cdf(x, raw, bandwidth=h, noise_sd=noise_sd)


def monotonize_cdf(
    grid: np.ndarray,
    values: np.ndarray,
    bandwidth: float = float("nan"),
    noise_sd: float = float("nan"),
) -> DeconvolvedCdf:
    """Clean a raw cdf estimate into a proper nondecreasing cdf.

    Tails beyond the outermost crossings of 0.001 and 0.999 are flattened,
    negative increments zeroed, and the cumulative sum renormalized to
    span [0, 1].  The output is a fixed point of this map.
    """
    grid = np.asarray(grid, dtype=float)
    v = np.array(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("raw cdf values must be finite")
    lo, hi = TAIL_CLAMP, 1.0 - TAIL_CLAMP

    below = np.nonzero(v <= lo)[0]
    if below.size:
        v[: below[-1]] = lo
    above = np.nonzero(v >= hi)[0]
    if above.size:
        v[above[0] + 1 :] = hi

    inc = np.maximum(np.diff(v), 0.0)
    cum = np.concatenate([[0.0], np.cumsum(inc)])
    if cum[-1] <= 0.0:
        raise DegenerateCdfError("all cdf increments vanish after tail clamping")
    u = cum / cum[-1]
    # snap the untrusted tail mass so the map is idempotent
    u[u <= lo] = 0.0
    u[u >= hi] = 1.0
    return DeconvolvedCdf(grid=grid, values=u, bandwidth=bandwidth, noise_sd=noise_sd)


def sample_ghat(cdf: DeconvolvedCdf, m: int, sigma_target: float, seed) -> np.ndarray:
    """Inverse-cdf draws, centered and rescaled to sample variance
    sigma_target^2 exactly.

    A point-mass cdf yields all-equal draws; those are returned as zeros
    with a warning rather than divided by a zero scale.
    """
    if m < 2:
        raise ValueError("need at least 2 draws to standardize")
    if not sigma_target > 0:
        raise ValueError("sigma_target must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else keyed_rng(int(seed), "sample_ghat")
    u = rng.uniform(0.0, 1.0, m)

    vals, grid = cdf.values, cdf.grid
    j = np.clip(np.searchsorted(vals, u, side="right"), 1, vals.size - 1)
    v0, v1 = vals[j - 1], vals[j]
    g0, g1 = grid[j - 1], grid[j]
    den = v1 - v0
    frac = np.where(den > 0, (u - v0) / np.where(den > 0, den, 1.0), 1.0)
    draws = g0 + frac * (g1 - g0)

    centered = draws - draws.mean()
    spread = float(np.var(centered, ddof=1))
    if spread == 0.0:
        warnings.warn("all draws from the estimated cdf coincide; returning zeros", stacklevel=2)
        return np.zeros(m)
    return centered * np.sqrt(sigma_target**2 / spread)


def deconvolution_bootstrap(ds: Dataset, loss: Loss, plan: ResamplingPlan, seed: int) -> BootstrapOutcome:
    """Residual bootstrap with errors drawn from the deconvolved law.

    With ``plan.fresh_draws`` each replicate draws a fresh iid error set
    from the estimated law (the better-performing style); otherwise one
    frozen draw is resampled empirically.  When the noise-variance
    estimate is nonpositive the scheme falls back to bootstrapping the
    centered predicted errors directly.
    """
    if plan.scheme != "DeconvolutionResidual":
        raise ValueError("deconvolution_bootstrap requires the DeconvolutionResidual scheme")
    v = plan.contrast(ds.p)
    base = fit(ds, loss)
    mean_part = ds.X @ base.beta_hat
    n = ds.n

    pe = predicted_errors(ds, loss)
    noise_sd = estimate_noise_sd(pe)
    if noise_sd is None:
        pool = pe.values - pe.values.mean()
        pool = pool - pool.mean()
        draw = lambda rng: pool[rng.integers(0, n, n)]
    else:
        cdf = deconvolve_cdf(pe, noise_sd, bandwidth=plan.bandwidth)
        sigma_target = float(np.sqrt(pe.sigma_hat_ls))
        if plan.fresh_draws:
            draw = lambda rng: sample_ghat(cdf, n, sigma_target, rng)
        else:
            frozen = sample_ghat(cdf, n, sigma_target, keyed_rng(seed, "deconv:frozen"))
            draw = lambda rng: frozen[rng.integers(0, n, n)]

    reps, failed = [], 0
    for b in range(plan.B):
        rng = keyed_rng(seed, "boot:DeconvolutionResidual", b)
        eps = draw(rng)
        try:
            beta_star = _refit_same_design(ds, loss, mean_part + eps, base.beta_hat)
        except HdbootError:
            failed += 1
            continue
        reps.append(v @ beta_star)
    _check_failures(failed, plan.B)
    return _assemble(reps, v @ base.beta_hat, plan, failed, 0)


def estimate_lambda_sq(ds: Dataset) -> EllipticalScales:
    """Row-scale estimates ||X_i||^2 / mean_j ||X_j||^2 (mean exactly one)."""
    norms = np.einsum("ij,ij->i", ds.X, ds.X)
    if np.any(norms == 0.0):
        raise ZeroRowError("design contains an all-zero row")
    return EllipticalScales(lambda_sq_hat=norms / norms.mean())
