"""Resampling schemes: residual bootstraps, pairs/weighted bootstraps, jackknife.

Replicates draw from counter-based streams keyed by (seed, scheme, index),
so outcomes are bit-reproducible and unaffected by execution order or by
raising the replicate count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln, ndtri

from .exceptions import (
    ExcessiveFailuresError,
    HdbootError,
    InsufficientReplicatesError,
    RankDeficientError,
)
from .losses import Loss
from .mestim import Dataset, DesignFactor, _irls, fit, hat_diagonal, predicted_errors, loo_coefficients, sigma_hat_ls
from .rng import keyed_rng

RESIDUAL_SCHEMES = (
    "ResidualRaw",
    "ResidualHatCorrected",
    "ResidualMcKean",
    "PredictedStandardized",
    "GaussianResidual",
)
ALL_SCHEMES = RESIDUAL_SCHEMES + ("DeconvolutionResidual", "PairsMultinomial", "WeightedIID")

#: abort when more than this fraction of replicates fail to refit
MAX_FAILURE_FRACTION = 0.05
#: abort when one replicate needs more than this many redraws
MAX_REDRAWS = 100

#: Poisson series for weight-law expectations are truncated here
POISSON_TRUNCATION = 100


@dataclass(frozen=True)
class WeightLaw:
    """Mean-one observation-weight law for the weighted bootstrap.

    Kinds: ConstantOne, PoissonOne, PoissonMixture (1 - alpha + alpha*Poisson(1)),
    EmpiricalTable (finite support with probabilities).
    """

    kind: str
    alpha: float = 1.0
    values: tuple = ()
    probabilities: tuple = ()

    def __post_init__(self):
        if self.kind not in ("ConstantOne", "PoissonOne", "PoissonMixture", "EmpiricalTable"):
            raise ValueError(f"unknown weight law {self.kind!r}")
        if self.kind == "PoissonMixture" and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("PoissonMixture needs alpha in [0, 1] to keep weights nonnegative")
        if self.kind == "EmpiricalTable":
            v = np.asarray(self.values, dtype=float)
            p = np.asarray(self.probabilities, dtype=float)
            if v.size == 0 or v.shape != p.shape:
                raise ValueError("EmpiricalTable needs matching nonempty values/probabilities")
            if np.any(v < 0) or np.any(p < 0):
                raise ValueError("EmpiricalTable values and probabilities must be nonnegative")
            if abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("EmpiricalTable probabilities must sum to 1")
            if abs(float(v @ p) - 1.0) > 1e-9:
                raise ValueError("EmpiricalTable mean must equal 1 (within 1e-9)")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "ConstantOne":
            return np.ones(size)
        if self.kind == "PoissonOne":
            return rng.poisson(1.0, size).astype(float)
        if self.kind == "PoissonMixture":
            return 1.0 - self.alpha + self.alpha * rng.poisson(1.0, size)
        return rng.choice(np.asarray(self.values, float), size=size, p=np.asarray(self.probabilities, float))

    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Support and probabilities (Poisson laws truncated at k = 100)."""
        if self.kind == "ConstantOne":
            return np.array([1.0]), np.array([1.0])
        k = np.arange(POISSON_TRUNCATION + 1)
        pk = np.exp(-1.0 - gammaln(k + 1.0))
        if self.kind == "PoissonOne":
            return k.astype(float), pk
        if self.kind == "PoissonMixture":
            return 1.0 - self.alpha + self.alpha * k, pk
        return np.asarray(self.values, float), np.asarray(self.probabilities, float)


def weight_law_from_name(name: str, alpha: float | None = None) -> WeightLaw:
    name = name.lower().replace("-", "_")
    if name in ("const1", "constant", "constantone", "constant_one"):
        return WeightLaw("ConstantOne")
    if name in ("poisson1", "poissonone", "poisson_one", "poisson"):
        return WeightLaw("PoissonOne")
    if name in ("poisson_mix", "poissonmixture", "mixture"):
        if alpha is None:
            raise ValueError("PoissonMixture requires alpha")
        return WeightLaw("PoissonMixture", alpha=alpha)
    raise ValueError(f"unknown weight law {name!r}")


@dataclass(frozen=True)
class ResamplingPlan:
    """Which scheme to run and with what parameters.

    ``v`` is the contrast (defaults to the first coordinate);
    ``fresh_draws`` selects the deconvolution replicate style (fresh iid
    draws from the estimated error law per replicate vs one frozen draw
    resampled empirically).  ``bandwidth`` overrides the deconvolution
    bandwidth.
    """

    scheme: str
    B: int = 1000
    v: tuple | None = None
    ci_level: float = 0.95
    weights: WeightLaw | None = None
    fresh_draws: bool = True
    bandwidth: float | None = None

    def __post_init__(self):
        if self.scheme not in ALL_SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {ALL_SCHEMES}")
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")
        if self.scheme == "WeightedIID" and self.weights is None:
            raise ValueError("WeightedIID requires a weight law")
        if self.v is not None:
            v = np.asarray(self.v, dtype=float)
            if abs(np.linalg.norm(v) - 1.0) > 1e-12:
                raise ValueError("contrast v must have unit norm (within 1e-12)")

    def contrast(self, p: int) -> np.ndarray:
        if self.v is None:
            v = np.zeros(p)
            v[0] = 1.0
            return v
        v = np.asarray(self.v, dtype=float)
        if v.shape[0] != p:
            raise ValueError(f"contrast has length {v.shape[0]}, expected {p}")
        return v


@dataclass(frozen=True)
class BootstrapOutcome:
    """Replicate contrasts with derived interval and variance."""

    replicates: np.ndarray
    point: float
    ci_lo: float
    ci_hi: float
    boot_variance: float
    failed_replicates: int
    redraws: int = 0
    scheme: str = ""
    ci_level: float = 0.95

    def to_dict(self, include_replicates: bool = False) -> dict:
        out = {
            "scheme": self.scheme,
            "B": int(self.replicates.size),
            "point": self.point,
            "ci_level": self.ci_level,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "boot_variance": self.boot_variance,
            "failed_replicates": self.failed_replicates,
            "redraws": self.redraws,
        }
        if include_replicates:
            out["replicates"] = self.replicates.tolist()
        return out


@dataclass(frozen=True)
class JackknifeOutcome:
    """Leave-one-out variance estimate with the two corrections."""

    point: float
    var_jack: float
    corrected_ls: float
    corrected_gamma: float | None
    ci_lo: float
    ci_hi: float
    ci_level: float = 0.95

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "var_jack": self.var_jack,
            "corrected_ls": self.corrected_ls,
            "corrected_gamma": self.corrected_gamma,
            "ci_level": self.ci_level,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
        }


def percentile_ci(replicates: np.ndarray, level: float) -> tuple[float, float]:
    """Percentile interval from order statistics at ceil((B+1)*alpha/2) and
    ceil((B+1)*(1-alpha/2)), clamped to [1, B]."""
    reps = np.sort(np.asarray(replicates, dtype=float))
    B = reps.size
    if B < 2:
        raise InsufficientReplicatesError(f"need at least 2 replicates, got {B}")
    alpha = 1.0 - level
    lo_rank = int(np.ceil((B + 1) * alpha / 2.0))
    hi_rank = int(np.ceil((B + 1) * (1.0 - alpha / 2.0)))
    lo_rank = min(max(lo_rank, 1), B)
    hi_rank = min(max(hi_rank, 1), B)
    return float(reps[lo_rank - 1]), float(reps[hi_rank - 1])


def normal_ci(point: float, variance: float, level: float) -> tuple[float, float]:
    """point +/- z_{1-alpha/2} * sqrt(variance)."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    z = float(ndtri(0.5 + level / 2.0))
    half = z * np.sqrt(variance)
    return float(point - half), float(point + half)


def _center(x: np.ndarray) -> np.ndarray:
    out = x - x.mean()
    return out - out.mean()


def _mckean_scale_factor(e: np.ndarray, loss: Loss, s: float) -> float:
    """The d in the robust residual correction e_i / sqrt(1 - d h_i).

    Sample-mean form: d = 2 mean(e' psi(e')) / mean(psi'(e'))
    - mean(psi(e')^2) / mean(psi'(e'))^2, with e' = e/s.
    """
    ep = e / s
    psi = loss.psi(ep)
    dpsi = loss.psi_prime(ep)
    m1 = float(np.mean(ep * psi))
    m2 = float(np.mean(psi * psi))
    md = float(np.mean(dpsi))
    if md <= 0:
        raise HdbootError("psi' vanishes everywhere; the residual correction is undefined")
    return 2.0 * m1 / md - m2 / md**2


def residual_pool(ds: Dataset, loss: Loss, scheme: str, fit_result=None) -> np.ndarray:
    """Centered error pool for the residual-bootstrap family."""
    res = fit_result if fit_result is not None else fit(ds, loss)
    e = res.residuals
    if scheme == "ResidualRaw":
        return _center(e)
    if scheme == "ResidualHatCorrected":
        h = hat_diagonal(ds)
        return _center(e / np.sqrt(1.0 - h))
    if scheme == "ResidualMcKean":
        h = hat_diagonal(ds)
        s = np.sqrt(sigma_hat_ls(ds))
        d = _mckean_scale_factor(e, loss, s)
        # leverage guard: the first-order correction can push 1 - d h_i
        # nonpositive at high leverage
        denom = np.sqrt(np.maximum(1.0 - d * h, 1e-2))
        return _center(e / denom)
    if scheme == "PredictedStandardized":
        return _center(predicted_errors(ds, loss).standardized)
    raise ValueError(f"{scheme!r} is not a pooled residual scheme")


def _assemble(replicates, point, plan, failed, redraws) -> BootstrapOutcome:
    reps = np.asarray(replicates, dtype=float)
    if reps.size < 2:
        raise InsufficientReplicatesError(
            f"only {reps.size} successful replicates; cannot form an interval"
        )
    lo, hi = percentile_ci(reps, plan.ci_level)
    return BootstrapOutcome(
        replicates=reps,
        point=float(point),
        ci_lo=lo,
        ci_hi=hi,
        boot_variance=float(np.var(reps, ddof=1)),
        failed_replicates=failed,
        redraws=redraws,
        scheme=plan.scheme,
        ci_level=plan.ci_level,
    )


def _check_failures(failed: int, B: int) -> None:
    if failed > MAX_FAILURE_FRACTION * B:
        raise ExcessiveFailuresError(
            f"{failed} of {B} replicates failed to refit (> {MAX_FAILURE_FRACTION:.0%})"
        )


def _refit_same_design(ds: Dataset, loss: Loss, y_star: np.ndarray, warm: np.ndarray):
    """Refit with the original design; reuses the cached factorization."""
    if loss.kind == "squared":
        return ds.factor().solve_ls(y_star)
    return _irls(ds.X, y_star, loss, None, warm, 500).beta_hat


def residual_bootstrap(ds: Dataset, loss: Loss, plan: ResamplingPlan, seed: int) -> BootstrapOutcome:
    """Bootstrap with errors drawn from a scheme-specific pool.

    Each replicate forms y* = X beta_hat + eps*, refits with the same
    loss, and records v' beta_hat*.
    """
    if plan.scheme not in RESIDUAL_SCHEMES:
        raise ValueError(f"{plan.scheme!r} is not a residual-family scheme")
    v = plan.contrast(ds.p)
    base = fit(ds, loss)
    mean_part = ds.X @ base.beta_hat
    gaussian = plan.scheme == "GaussianResidual"
    if gaussian:
        sd = np.sqrt(sigma_hat_ls(ds))
        pool = None
    else:
        pool = residual_pool(ds, loss, plan.scheme, fit_result=base)

    n = ds.n
    reps, failed = [], 0
    for b in range(plan.B):
        rng = keyed_rng(seed, f"boot:{plan.scheme}", b)
        if gaussian:
            eps = sd * rng.standard_normal(n)
        else:
            eps = pool[rng.integers(0, n, n)]
        try:
            beta_star = _refit_same_design(ds, loss, mean_part + eps, base.beta_hat)
        except HdbootError:
            failed += 1
            continue
        reps.append(v @ beta_star)
    _check_failures(failed, plan.B)
    return _assemble(reps, v @ base.beta_hat, plan, failed, 0)


def pairs_bootstrap(ds: Dataset, loss: Loss, plan: ResamplingPlan, seed: int) -> BootstrapOutcome:
    """Resample (y_i, X_i) rows with replacement and refit.

    Singular resampled designs are redrawn (at most MAX_REDRAWS times per
    replicate).
    """
    if plan.scheme != "PairsMultinomial":
        raise ValueError("pairs_bootstrap requires the PairsMultinomial scheme")
    if ds.p / ds.n > 1.0 - 1.0 / np.e:
        warnings.warn(
            "aspect ratio p/n exceeds 1 - 1/e: resampled design matrices are "
            "singular with probability approaching one and the pairs bootstrap "
            "is unreliable",
            stacklevel=2,
        )
    v = plan.contrast(ds.p)
    base = fit(ds, loss)
    n = ds.n

    reps, failed, redraws = [], 0, 0
    for b in range(plan.B):
        rng = keyed_rng(seed, "boot:PairsMultinomial", b)
        factor, idx = None, None
        for _ in range(MAX_REDRAWS + 1):
            idx = rng.integers(0, n, n)
            try:
                factor = DesignFactor(ds.X[idx])
                break
            except RankDeficientError:
                redraws += 1
        if factor is None:
            raise ExcessiveFailuresError(
                f"replicate {b} still singular after {MAX_REDRAWS} redraws"
            )
        try:
            if loss.kind == "squared":
                beta_star = factor.solve_ls(ds.y[idx])
            else:
                beta_star = _irls(ds.X[idx], ds.y[idx], loss, None, base.beta_hat, 500).beta_hat
        except HdbootError:
            failed += 1
            continue
        reps.append(v @ beta_star)
    _check_failures(failed, plan.B)
    return _assemble(reps, v @ base.beta_hat, plan, failed, redraws)


def weighted_bootstrap(ds: Dataset, loss: Loss, plan: ResamplingPlan, seed: int) -> BootstrapOutcome:
    """Refit with iid mean-one random observation weights per replicate."""
    if plan.scheme != "WeightedIID":
        raise ValueError("weighted_bootstrap requires the WeightedIID scheme")
    law = plan.weights
    v = plan.contrast(ds.p)
    base = fit(ds, loss)
    n = ds.n

    reps, failed, redraws = [], 0, 0
    for b in range(plan.B):
        rng = keyed_rng(seed, "boot:WeightedIID", b)
        result = None
        for _ in range(MAX_REDRAWS + 1):
            w = law.sample(rng, n)
            try:
                result = fit(ds, loss, weights=w, beta0=base.beta_hat)
                break
            except RankDeficientError:
                redraws += 1
            except HdbootError:
                failed += 1
                break
        else:
            raise ExcessiveFailuresError(
                f"replicate {b} still singular after {MAX_REDRAWS} redraws"
            )
        if result is not None:
            reps.append(v @ result.beta_hat)
    _check_failures(failed, plan.B)
    return _assemble(reps, v @ base.beta_hat, plan, failed, redraws)


def jackknife(
    ds: Dataset,
    loss: Loss,
    v: np.ndarray | None = None,
    gamma_hat: float | None = None,
    level: float = 0.95,
) -> JackknifeOutcome:
    """Leave-one-out variance of v'beta_hat with aspect-ratio corrections.

    ``corrected_ls`` multiplies by (1 - p/n); ``corrected_gamma`` divides
    by a supplied curvature-trace factor.
    """
    if v is None:
        v = np.zeros(ds.p)
        v[0] = 1.0
    v = np.asarray(v, dtype=float)
    betas = loo_coefficients(ds, loss)
    proj = betas @ v
    var_jack = float((ds.n - 1) / ds.n * np.sum((proj - proj.mean()) ** 2))
    point = float(v @ fit(ds, loss).beta_hat)
    lo, hi = normal_ci(point, var_jack, level)
    return JackknifeOutcome(
        point=point,
        var_jack=var_jack,
        corrected_ls=(1.0 - ds.p / ds.n) * var_jack,
        corrected_gamma=None if gamma_hat is None else var_jack / gamma_hat,
        ci_lo=lo,
        ci_hi=hi,
        ci_level=level,
    )


def run_plan(ds: Dataset, loss: Loss, plan: ResamplingPlan, seed: int) -> BootstrapOutcome:
    """Dispatch a plan to the appropriate bootstrap routine."""
    if plan.scheme in RESIDUAL_SCHEMES:
        return residual_bootstrap(ds, loss, plan, seed)
    if plan.scheme == "PairsMultinomial":
        return pairs_bootstrap(ds, loss, plan, seed)
    if plan.scheme == "WeightedIID":
        return weighted_bootstrap(ds, loss, plan, seed)
    if plan.scheme == "DeconvolutionResidual":
        from . import deconv

        return deconv.deconvolution_bootstrap(ds, loss, plan, seed)
    raise ValueError(f"unknown scheme {plan.scheme!r}")
