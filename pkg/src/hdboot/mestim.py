"""Linear M-estimation: fitting, leverage, leave-one-out, predicted errors.

Least squares is solved through a pivoted QR factorization; robust losses
by iteratively reweighted least squares warm-started from the LS fit.
``DesignFactor`` caches the factorization so bootstrap replicates sharing
a design never refactor it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import DegenerateScaleError, RankDeficientError
from .losses import Loss

#: smallest pivot below this multiple of the largest pivot means rank deficient
RANK_RTOL = 1e-10

#: IRLS stopping rule: relative coefficient change and objective decrease
IRLS_BETA_TOL = 1e-10
IRLS_OBJ_TOL = 1e-12
IRLS_MAX_ITER = 500
FIRST_ORDER_RTOL = 1e-8


@dataclass
class Dataset:
    """Design matrix and response, rows are observations.

    ``beta_true`` and ``sigma_true`` are optional simulation bookkeeping.
    """

    X: np.ndarray
    y: np.ndarray
    beta_true: np.ndarray | None = None
    sigma_true: float | None = None
    _factor: "DesignFactor | None" = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        n, p = self.X.shape
        if p < 1 or n <= p:
            raise ValueError(f"need n > p >= 1, got n={n}, p={p}")
        if self.y.shape[0] != n:
            raise ValueError("y length must match the number of rows of X")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def factor(self) -> "DesignFactor":
        if self._factor is None:
            self._factor = DesignFactor(self.X)
        return self._factor

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Headerless CSV, response in the last column."""
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        return cls(X=data[:, :-1], y=data[:, -1])

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.X, self.y]), delimiter=",")


class DesignFactor:
    """Pivoted QR of a design matrix, with rank detection.

    Raises RankDeficientError when the smallest pivot falls below
    RANK_RTOL times the largest.
    """

    def __init__(self, X: np.ndarray):
        X = np.asarray(X, dtype=float)
        n, p = X.shape
        Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        if diag.size == 0 or diag[0] == 0.0 or diag.min() < RANK_RTOL * diag.max():
            raise RankDeficientError(
                f"design is numerically rank deficient (pivot ratio "
                f"{0.0 if diag.max() == 0 else diag.min() / diag.max():.2e})"
            )
        self.X = X
        self.Q = Q
        self.R = R
        self.piv = piv
        self._hat = None
        self._gram_inv = None

    def solve_ls(self, y: np.ndarray) -> np.ndarray:
        """Least-squares coefficients for one response vector or a matrix of them."""
        z = scipy.linalg.solve_triangular(self.R, self.Q.T @ y, lower=False)
        beta = np.empty_like(z)
        beta[self.piv] = z
        return beta

    def hat_diagonal(self) -> np.ndarray:
        if self._hat is None:
            self._hat = np.einsum("ij,ij->i", self.Q, self.Q)
        return self._hat

    def gram_inverse(self) -> np.ndarray:
        """(X'X)^{-1}, from the triangular factor."""
        if self._gram_inv is None:
            Rinv = scipy.linalg.solve_triangular(
                self.R, np.eye(self.R.shape[0]), lower=False
            )
            G = Rinv @ Rinv.T
            inv = np.empty_like(G)
            inv[np.ix_(self.piv, self.piv)] = G
            self._gram_inv = inv
        return self._gram_inv


@dataclass(frozen=True)
class FitResult:
    """Fitted coefficients with convergence metadata.

    ``gradient_norm`` is the sup-norm of sum_i w_i psi(e_i) X_i at the
    solution (the raw subgradient selection for absolute error).
    """

    beta_hat: np.ndarray
    residuals: np.ndarray
    loss: Loss
    iterations: int
    converged: bool
    gradient_norm: float
    objective: float
    objective_trace: np.ndarray


@dataclass(frozen=True)
class PredictedErrors:
    """Leave-one-out predicted errors and their standardized version.

    ``standardized`` rescales the predicted errors to carry the
    least-squares noise variance estimate; ``sigma_hat_ls`` is that
    estimate, regardless of the study loss.
    """

    values: np.ndarray
    standardized: np.ndarray
    sigma_hat_ls: float


def _objective(loss: Loss, residuals: np.ndarray, weights: np.ndarray | None) -> float:
    contrib = loss.rho(residuals)
    if weights is not None:
        contrib = weights * contrib
    return float(np.sum(contrib))


def _gradient_norm(X, residuals, loss, weights) -> float:
    g = loss.psi(residuals)
    if weights is not None:
        g = weights * g
    return float(np.max(np.abs(X.T @ g))) if X.shape[1] else 0.0


def _solve_weighted_gram(X, y, w):
    """Coefficients of min sum w_i (y_i - X_i'b)^2 via the normal equations.

    Used only inside IRLS where w > 0 keeps the Gram matrix positive
    definite whenever X has full column rank.  Falls back to a QR solve
    of the row-scaled system when the Gram matrix is too ill-conditioned
    for Cholesky (large absolute-error weights square the condition number).
    """
    Xw = X * w[:, None]
    G = X.T @ Xw
    rhs = Xw.T @ y
    try:
        cf = scipy.linalg.cho_factor(G, check_finite=False)
        return scipy.linalg.cho_solve(cf, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        sw = np.sqrt(w)
        beta, _, rank, _ = scipy.linalg.lstsq(
            X * sw[:, None], sw * y, cond=RANK_RTOL, lapack_driver="gelsy"
        )
        if rank < X.shape[1]:
            raise RankDeficientError("reweighted design lost full column rank")
        return beta


def fit(
    ds: Dataset,
    loss: Loss,
    weights: np.ndarray | None = None,
    *,
    beta0: np.ndarray | None = None,
    max_iter: int = IRLS_MAX_ITER,
) -> FitResult:
    """Minimize sum_i w_i rho(y_i - X_i'b).

    Squared error is solved directly from a pivoted QR factorization.
    Other losses run IRLS with weights psi(e)/e (clamped), warm-started
    from the least-squares fit unless ``beta0`` is given.  Zero-weight
    observations drop out of the fit.  Non-convergence is reported via
    ``converged=False``, never silently.
    """
    X, y = ds.X, ds.y
    if weights is not None:
        weights = np.asarray(weights, dtype=float).ravel()
        if weights.shape[0] != ds.n:
            raise ValueError("weights length must match the number of observations")
        if np.any(weights < 0):
            raise ValueError("observation weights must be nonnegative")
        keep = weights > 0
        if keep.sum() <= ds.p:
            raise RankDeficientError("fewer positive-weight rows than parameters")
        sw = np.sqrt(weights[keep])
        factor = DesignFactor(X[keep] * sw[:, None])
        beta_ls = factor.solve_ls(sw * y[keep])
    else:
        factor = ds.factor()
        beta_ls = factor.solve_ls(y)

    if loss.kind == "squared":
        beta = beta_ls
        resid = y - X @ beta
        obj = _objective(loss, resid, weights)
        return FitResult(
            beta_hat=beta,
            residuals=resid,
            loss=loss,
            iterations=0,
            converged=True,
            gradient_norm=_gradient_norm(X, resid, loss, weights),
            objective=obj,
            objective_trace=np.array([obj]),
        )

    return _irls(X, y, loss, weights, beta_ls if beta0 is None else np.asarray(beta0, float), max_iter)


def _irls(X, y, loss, weights, beta0, max_iter) -> FitResult:
    beta = beta0.copy()
    resid = y - X @ beta
    obj = _objective(loss, resid, weights)
    trace = [obj]
    grad_scale = max(1.0, _gradient_norm(X, resid, loss, weights))
    converged = False
    it = 0

    for it in range(1, max_iter + 1):
        w_irls = loss.irls_weights(resid)
        if weights is not None:
            w_irls = w_irls * weights
        beta_new = _solve_weighted_gram(X, y, w_irls)

        # IRLS is a majorization step for these losses, so the objective
        # should not increase; guard against round-off with step halving.
        step = 1.0
        accepted = False
        for _ in range(30):
            cand = beta + step * (beta_new - beta)
            resid_cand = y - X @ cand
            obj_cand = _objective(loss, resid_cand, weights)
            if obj_cand <= obj * (1.0 + 1e-15) + 1e-300:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break

        rel_change = np.max(np.abs(cand - beta)) / max(1.0, np.max(np.abs(cand)))
        obj_decrease = (obj - obj_cand) / max(1.0, abs(obj))
        beta, resid = cand, resid_cand
        obj = obj_cand
        trace.append(obj)

        first_order = _gradient_norm(X, resid, loss, weights) <= FIRST_ORDER_RTOL * grad_scale
        if (rel_change < IRLS_BETA_TOL and obj_decrease < IRLS_OBJ_TOL) or first_order:
            converged = True
            break

    return FitResult(
        beta_hat=beta,
        residuals=resid,
        loss=loss,
        iterations=it,
        converged=converged,
        gradient_norm=_gradient_norm(X, resid, loss, weights),
        objective=obj,
        objective_trace=np.asarray(trace),
    )


def hat_diagonal(ds: Dataset) -> np.ndarray:
    """Diagonal of X (X'X)^{-1} X', computed from the factorization."""
    return ds.factor().hat_diagonal()


def sigma_hat_ls(ds: Dataset) -> float:
    """Noise variance estimate sum(e_LS^2)/(n-p), always from least squares."""
    resid = ds.y - ds.X @ ds.factor().solve_ls(ds.y)
    return float(resid @ resid / (ds.n - ds.p))


def loo_coefficients(ds: Dataset, loss: Loss) -> np.ndarray:
    """n x p matrix of leave-one-out coefficient vectors.

    Squared error uses the rank-one downdate identity; robust losses
    refit each reduced problem warm-started from the full-data solution.
    """
    n, p = ds.n, ds.p
    if n - 1 <= p:
        raise ValueError(f"leave-one-out needs n - 1 > p, got n={n}, p={p}")
    if loss.kind == "squared":
        factor = ds.factor()
        beta = factor.solve_ls(ds.y)
        e = ds.y - ds.X @ beta
        h = factor.hat_diagonal()
        if np.any(h >= 1.0 - 1e-12):
            raise RankDeficientError("a leave-one-out design loses rank (leverage ~ 1)")
        G = factor.gram_inverse()
        scale = e / (1.0 - h)
        return beta[None, :] - (ds.X @ G) * scale[:, None]

    full = fit(ds, loss)
    betas = np.empty((n, p))
    idx = np.arange(n)
    for i in range(n):
        keep = idx != i
        sub = Dataset(ds.X[keep], ds.y[keep])
        betas[i] = fit(sub, loss, beta0=full.beta_hat).beta_hat
    return betas


def loo_fits(ds: Dataset, loss: Loss) -> list[FitResult]:
    """Full leave-one-out refits (one FitResult per left-out observation).

    The squared-error path must agree with a from-scratch refit; robust
    refits warm-start at the full-data coefficients.
    """
    betas = loo_coefficients(ds, loss)
    out = []
    idx = np.arange(ds.n)
    for i in range(ds.n):
        keep = idx != i
        resid = ds.y[keep] - ds.X[keep] @ betas[i]
        sub_X = ds.X[keep]
        out.append(
            FitResult(
                beta_hat=betas[i],
                residuals=resid,
                loss=loss,
                iterations=0,
                converged=True,
                gradient_norm=_gradient_norm(sub_X, resid, loss, None),
                objective=_objective(loss, resid, None),
                objective_trace=np.array([_objective(loss, resid, None)]),
            )
        )
    return out


def predicted_errors(ds: Dataset, loss: Loss) -> PredictedErrors:
    """Leave-one-out predicted errors and the standardized version.

    Standardization rescales so the sample variance equals the
    least-squares noise-variance estimate, whatever the study loss.
    """
    if loss.kind == "squared":
        factor = ds.factor()
        beta = factor.solve_ls(ds.y)
        e = ds.y - ds.X @ beta
        h = factor.hat_diagonal()
        if np.any(h >= 1.0 - 1e-12):
            raise RankDeficientError("a leave-one-out design loses rank (leverage ~ 1)")
        values = e / (1.0 - h)
    else:
        betas = loo_coefficients(ds, loss)
        values = ds.y - np.einsum("ij,ij->i", ds.X, betas)

    s2 = sigma_hat_ls(ds)
    var_pred = float(np.var(values, ddof=1))
    if var_pred == 0.0:
        raise DegenerateScaleError("predicted errors have zero sample variance")
    standardized = values * np.sqrt(s2 / var_pred)
    return PredictedErrors(values=values, standardized=standardized, sigma_hat_ls=s2)
