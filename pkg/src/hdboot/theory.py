"""Asymptotic theory: expected bootstrap variance, weight calibration,
jackknife inflation, and the two-equation risk system.

Expectations over weight laws use their (truncated) atom decompositions;
expectations in the risk system integrate the Gaussian convolution part
exactly through the piecewise-linear proximal mapping and average over a
stratified quantile grid of the error law, so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from .exceptions import (
    NoBracketError,
    NonConvergenceError,
    NoSolutionError,
    RankDeficientError,
    SingularCurvatureError,
)
from .losses import Loss
from .mestim import Dataset, fit
from .resample import WeightLaw
from .rng import keyed_rng

C_SEARCH_MAX = 1e6
C_MATCH_TOL = 1e-6
ALPHA_FACTOR_TOL = 1e-2
RISK_MAX_ITER = 200
RISK_RESIDUAL_TOL = 1e-4

_SQRT2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class RiskSystemSolution:
    """Solution (c, r) of the asymptotic risk system at aspect ratio kappa."""

    c: float
    r: float
    kappa: float
    residual_norms: tuple[float, float]


@dataclass(frozen=True)
class BootVarPrediction:
    """Expected (scaled) bootstrap variance under a weight law."""

    kappa: float
    weight_law: WeightLaw
    c: float
    expected_boot_var_scaled: float
    overestimation_factor: float

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "law": self.weight_law.kind,
            "alpha": self.weight_law.alpha if self.weight_law.kind == "PoissonMixture" else None,
            "c": self.c,
            "expected_boot_var_scaled": self.expected_boot_var_scaled,
            "overestimation_factor": self.overestimation_factor,
        }


def _law_expectations(law: WeightLaw, c: float) -> tuple[float, float]:
    """E[1/(1+cW)] and E[1/(1+cW)^2] by the truncated atom sum."""
    w, p = law.atoms()
    denom = 1.0 + c * w
    return float(np.sum(p / denom)), float(np.sum(p / denom**2))


def solve_c(weight_law: WeightLaw, kappa: float) -> float:
    """The c with E[1/(1+cW)] = 1 - kappa.

    Bracketing search on [0, 1e6]; raises NoBracketError when the
    expectation cannot reach 1 - kappa there (e.g. Poisson weights with
    kappa beyond 1 - 1/e).
    """
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    target = 1.0 - kappa

    def f(c):
        return _law_expectations(weight_law, c)[0] - target

    f_hi = f(C_SEARCH_MAX)
    if f_hi > 0.0:
        raise NoBracketError(
            f"E[1/(1+cW)] stays above {target:.4f} on [0, {C_SEARCH_MAX:.0e}]; "
            "the weight law puts too much mass at zero for this kappa"
        )
    c = brentq(f, 0.0, C_SEARCH_MAX, xtol=1e-13, rtol=8.9e-16)
    if abs(f(c)) > C_MATCH_TOL:
        raise NoBracketError("root finder failed to match the expectation")
    return float(c)


def boot_var_prediction(weight_law: WeightLaw, kappa: float, sigma_eps: float = 1.0) -> BootVarPrediction:
    """Scaled expected bootstrap variance
    sigma^2 [kappa/(1 - kappa - E[1/(1+cW)^2]) - 1/(1-kappa)],
    and its ratio to the sampling variance sigma^2 kappa/(1-kappa)."""
    c = solve_c(weight_law, kappa)
    _, e2 = _law_expectations(weight_law, c)
    bracket = kappa / (1.0 - kappa - e2) - 1.0 / (1.0 - kappa)
    if bracket < 0.0:
        if bracket < -1e-9:
            raise ValueError(f"negative variance bracket {bracket:.3e}; law violates Jensen bound")
        bracket = 0.0
    scaled = sigma_eps**2 * bracket
    return BootVarPrediction(
        kappa=kappa,
        weight_law=weight_law,
        c=c,
        expected_boot_var_scaled=scaled,
        overestimation_factor=bracket / (kappa / (1.0 - kappa)),
    )


def calibrate_alpha(kappa: float) -> float:
    """The Poisson-mixture parameter making the expected bootstrap variance
    match the sampling variance (overestimation factor 1, tolerance 1e-2).

    Dichotomous search over [0, 1], first probe at 0.95, refined until the
    bracket is tight so the returned alpha is reproducible.
    """
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")

    def factor(alpha: float) -> float:
        law = WeightLaw("PoissonMixture", alpha=alpha)
        return boot_var_prediction(law, kappa).overestimation_factor

    try:
        f_hi = factor(1.0) - 1.0
    except NoBracketError:
        raise NoSolutionError(f"no admissible alpha at kappa={kappa} (weights degenerate)")
    if f_hi < 0.0:
        raise NoSolutionError(
            f"even pure Poisson weights under-disperse at kappa={kappa}; no alpha in [0, 1]"
        )

    lo, hi = 0.0, 1.0
    mid = 0.95
    while hi - lo > 1e-6:
        if factor(mid) - 1.0 > 0.0:
            hi = mid
        else:
            lo = mid
        mid = 0.5 * (lo + hi)
    if abs(factor(mid) - 1.0) > ALPHA_FACTOR_TOL:
        raise NoSolutionError(f"calibration did not reach factor 1 +/- {ALPHA_FACTOR_TOL}")
    return float(mid)


def jackknife_factor(kappa: float) -> float:
    """Asymptotic jackknife variance inflation 1/(1 - kappa)."""
    if not 0.0 <= kappa < 1.0:
        raise ValueError("kappa must lie in [0, 1)")
    return 1.0 / (1.0 - kappa)


def gamma_hat(ds: Dataset, loss: Loss) -> float:
    """Curvature-trace correction (tr(S^-2)/p) / (tr(S^-1)/p)^2 with
    S = (1/n) sum_i psi'(e_i) X_i X_i'.

    Raises SingularCurvatureError when S is numerically singular, which is
    generic for absolute error where psi' is an indicator of {0}.
    """
    res = fit(ds, loss)
    if not res.converged:
        raise NonConvergenceError("fit did not converge; gamma_hat needs a converged fit")
    d = loss.psi_prime(res.residuals)
    S = (ds.X * d[:, None]).T @ ds.X / ds.n
    eigs = np.linalg.eigvalsh(S)
    if eigs[0] <= 1e-10 * max(eigs[-1], 0.0) or eigs[-1] <= 0.0:
        raise SingularCurvatureError(
            "psi'-weighted curvature matrix is numerically singular"
        )
    inv = 1.0 / eigs
    p = ds.p
    return float((np.sum(inv**2) / p) / (np.sum(inv) / p) ** 2)


# -- risk system ---------------------------------------------------------


def _stratified_errors(error_law, mc_size: int, seed: int) -> np.ndarray:
    """Common-random-number error draws: stratified quantiles when the law
    has a ppf, otherwise iid draws from a fixed keyed stream."""
    if hasattr(error_law, "ppf"):
        u = (np.arange(mc_size) + 0.5) / mc_size
        return np.asarray(error_law.ppf(u), dtype=float)
    return np.asarray(error_law.sample(keyed_rng(seed, "risk-system"), mc_size), dtype=float)


def _phi(x):
    return np.exp(-0.5 * x * x) / _SQRT2PI


def _e_prox_deriv(loss: Loss, c: float, eps: np.ndarray, r: float) -> float:
    """E[(prox(c rho))'(eps + r Z)], Gaussian part integrated exactly."""
    total = 0.0
    for lo, hi, slope, _ in loss.prox_segments(c):
        if slope == 0.0:
            continue
        upper = ndtr((hi - eps) / r) if np.isfinite(hi) else 1.0
        lower = ndtr((lo - eps) / r) if np.isfinite(lo) else 0.0
        total += slope * float(np.mean(upper - lower))
    return total


def _e_sq_diff(loss: Loss, c: float, eps: np.ndarray, r: float) -> float:
    """E[(zhat - prox(c rho)(zhat))^2] with zhat = eps + r Z."""
    total = np.zeros_like(eps)
    for lo, hi, slope, intercept in loss.prox_segments(c):
        a = (lo - eps) / r if np.isfinite(lo) else None
        b = (hi - eps) / r if np.isfinite(hi) else None
        cdf_a = ndtr(a) if a is not None else 0.0
        cdf_b = ndtr(b) if b is not None else 1.0
        pdf_a = _phi(a) if a is not None else 0.0
        pdf_b = _phi(b) if b is not None else 0.0
        prob = cdf_b - cdf_a
        ez1 = pdf_a - pdf_b
        ez2 = prob + (a * pdf_a if a is not None else 0.0) - (b * pdf_b if b is not None else 0.0)
        # (x - prox(x))^2 = ((1-slope) x - intercept)^2 on this segment
        q2 = (1.0 - slope) ** 2
        q1 = -2.0 * (1.0 - slope) * intercept
        q0 = intercept**2
        ex1 = eps * prob + r * ez1
        ex2 = eps**2 * prob + 2.0 * eps * r * ez1 + r**2 * ez2
        total += q2 * ex2 + q1 * ex1 + q0 * prob
    return float(np.mean(total))


def _solve_prox_scale(loss: Loss, eps: np.ndarray, r: float, kappa: float) -> float:
    """Inner dichotomy: the c with E[(prox(c rho))'(zhat)] = 1 - kappa."""
    target = 1.0 - kappa

    def f(c):
        return _e_prox_deriv(loss, c, eps, r) - target

    hi = 1.0
    while f(hi) > 0.0:
        hi *= 4.0
        if hi > 1e12:
            raise NoBracketError("no prox scale c matches the divergence equation")
    return brentq(f, 0.0, hi, xtol=1e-12, rtol=8.9e-16, maxiter=200)


def solve_risk_system(
    loss: Loss,
    error_law,
    kappa: float,
    mc_size: int = 1_000_000,
    seed: int = 0,
) -> RiskSystemSolution:
    """Solve the coupled equations
    E[(prox(c rho))'(zhat)] = 1 - kappa,  kappa r^2 = E[(zhat - prox(c rho)(zhat))^2]
    with zhat = eps + r Z, Z standard normal independent of eps.

    Outer bracketing search on r, inner dichotomy on c; the error draws
    are common across iterations.
    """
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    eps = _stratified_errors(error_law, mc_size, seed)
    sigma2 = float(np.mean(eps**2))

    def outer(r: float) -> float:
        c = _solve_prox_scale(loss, eps, r, kappa)
        return _e_sq_diff(loss, c, eps, r) - kappa * r * r

    r0 = max(np.sqrt(sigma2 * kappa / (1.0 - kappa)), 1e-8)
    lo = hi = r0
    it = 0
    while outer(hi) > 0.0:
        hi *= 2.0
        it += 1
        if it > RISK_MAX_ITER:
            raise NonConvergenceError("risk radius bracket expansion failed", residuals=None)
    while outer(lo) < 0.0:
        lo *= 0.5
        it += 1
        if it > RISK_MAX_ITER:
            raise NonConvergenceError("risk radius bracket contraction failed", residuals=None)
    r, info = brentq(outer, lo, hi, xtol=1e-10, rtol=1e-12, maxiter=RISK_MAX_ITER, full_output=True)
    c = _solve_prox_scale(loss, eps, r, kappa)

    res1 = abs(_e_prox_deriv(loss, c, eps, r) - (1.0 - kappa))
    res2 = abs(_e_sq_diff(loss, c, eps, r) - kappa * r * r) / max(1.0, kappa * r * r)
    if not info.converged or res1 > RISK_RESIDUAL_TOL or res2 > RISK_RESIDUAL_TOL:
        raise NonConvergenceError(
            f"risk system not solved to tolerance (residuals {res1:.2e}, {res2:.2e})",
            residuals=(res1, res2),
        )
    return RiskSystemSolution(c=float(c), r=float(r), kappa=kappa, residual_norms=(res1, res2))


def asymptotic_ci(
    ds: Dataset,
    loss: Loss,
    v: np.ndarray | None,
    r_hat: float,
    level: float = 0.95,
) -> tuple[float, float]:
    """Normal-theory interval for v'beta from an estimated risk radius:
    v'beta_hat +/- z * r_hat * sqrt((1 - p/n) v' SigmaHat^{-1} v) / sqrt(p)."""
    if v is None:
        v = np.zeros(ds.p)
        v[0] = 1.0
    v = np.asarray(v, dtype=float)
    if r_hat < 0.0:
        raise ValueError("r_hat must be nonnegative")
    point = float(v @ fit(ds, loss).beta_hat)
    quad = float(ds.n * (v @ ds.factor().gram_inverse() @ v))  # v' (X'X/n)^{-1} v
    z = float(ndtri(0.5 + level / 2.0))
    half = z * r_hat * np.sqrt((1.0 - ds.p / ds.n) * quad) / np.sqrt(ds.p)
    return point - half, point + half


def sigma_contrast_estimator(ds: Dataset, v: np.ndarray) -> float:
    """(1 - p/n) v' (X'X/n)^{-1} v, a consistent estimator of v' Sigma^{-1} v."""
    v = np.asarray(v, dtype=float)
    quad = float(ds.n * (v @ ds.factor().gram_inverse() @ v))
    return (1.0 - ds.p / ds.n) * quad
