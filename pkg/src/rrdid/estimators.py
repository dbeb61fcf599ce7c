"""Model fitting: weighted OLS, Poisson QMLE, logistic QMLE, multinomial logit.

Every fit solves a weighted first-order condition

    sum_i w_i (y_i - mu_i(b)) x_i = 0

and reports a sandwich covariance A^{-1} B A^{-1}, where A is the negative
Hessian at the optimum and B the outer product of per-observation scores,
summed within clusters first when cluster ids are supplied. No small-sample
degrees-of-freedom correction is applied unless requested.

The quasi-likelihood maximizers share a Newton iteration with step halving;
linear predictors are clamped at +/- FitOptions.linear_predictor_cap inside
exp(), and a clamp that is still active at the final iterate raises instead
of returning a silently unreliable estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit

from .design import DesignMatrix
from .errors import (
    NonFiniteObjectiveError,
    OverflowGuardError,
    SeparationError,
    SingularDesignError,
    SingularHessianError,
)

__all__ = [
    "FitOptions",
    "FitResult",
    "NewtonDiagnostics",
    "maximize",
    "fit_ols",
    "fit_poisson_qmle",
    "fit_logit_qmle",
    "fit_multinomial_logit",
    "robust_vcov",
]


@dataclass(frozen=True)
class FitOptions:
    """Iteration controls shared by the quasi-likelihood fits.

    gradient_tolerance applies to the max-abs score and is scaled by
    (1 + total weight) inside the fit functions.
    """

    gradient_tolerance: float = 1e-8
    max_iterations: int = 100
    step_halving_max: int = 30
    linear_predictor_cap: float = 30.0

    def __post_init__(self):
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.step_halving_max < 1:
            raise ValueError("step_halving_max must be at least 1")
        if self.linear_predictor_cap <= 0:
            raise ValueError("linear_predictor_cap must be positive")


@dataclass(frozen=True)
class NewtonDiagnostics:
    iterations: int
    converged: bool
    score_norm: float
    value: float


@dataclass(frozen=True)
class FitResult:
    """Estimates plus the diagnostics needed to judge them.

    coefficients are named by design column; multinomial fits append the
    class index, e.g. "treat[2]" for the class-2 contrast. t-values are
    asymptotic z-style ratios (no degrees-of-freedom adjustment). loglik
    drops terms constant in the parameters (e.g. log y! for Poisson).
    """

    family: str
    names: tuple
    coefficients: np.ndarray
    vcov: np.ndarray
    vcov_kind: str
    loglik: float
    iterations: int
    converged: bool
    score_norm: float
    n_obs: int
    n_classes: int = 0

    def __post_init__(self):
        coef = np.array(self.coefficients, float, copy=True)
        coef.setflags(write=False)
        vcov = np.array(self.vcov, float, copy=True)
        vcov.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "vcov", vcov)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"unknown coefficient {name!r}") from None

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.index(name)])

    def se(self, name: str) -> float:
        i = self.index(name)
        return float(np.sqrt(self.vcov[i, i]))

    def t_value(self, name: str) -> float:
        se = self.se(name)
        beta = self.coef(name)
        if se == 0:
            return float("nan") if beta == 0 else float("inf") * np.sign(beta)
        return beta / se


def maximize(objective, init, options: FitOptions = FitOptions(), tolerance=None):
    """Newton ascent with step halving.

    objective(beta) must return (value, gradient, hessian). Convergence is
    max-abs gradient <= tolerance (default options.gradient_tolerance,
    unscaled); a step shorter than 1e-12 also stops the iteration. Returns
    (argmax, NewtonDiagnostics). An init already at the optimum returns
    immediately with 0 iterations.
    """
    tol = options.gradient_tolerance if tolerance is None else float(tolerance)
    beta = np.array(init, float, copy=True)
    value, grad, hess = objective(beta)
    if not np.isfinite(value):
        raise NonFiniteObjectiveError("objective non-finite at the starting point")

    iterations = 0
    for _ in range(options.max_iterations):
        score_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if score_norm <= tol:
            return beta, NewtonDiagnostics(iterations, True, score_norm, value)
        try:
            direction = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise SingularHessianError("Hessian is singular at the current iterate")

        step = 1.0
        accepted = None
        for _ in range(options.step_halving_max):
            candidate = beta + step * direction
            cand_value, cand_grad, cand_hess = objective(candidate)
            # accept any non-decrease up to rounding noise
            if np.isfinite(cand_value) and cand_value >= value - 1e-12 * (1 + abs(value)):
                accepted = (candidate, cand_value, cand_grad, cand_hess)
                break
            step /= 2.0
        if accepted is None:
            break
        beta, value, grad, hess = accepted
        iterations += 1
        if step * float(np.max(np.abs(direction))) < 1e-12:
            break

    score_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
    return beta, NewtonDiagnostics(iterations, score_norm <= tol, score_norm, value)


def _as_design(X):
    if isinstance(X, DesignMatrix):
        return X.values, list(X.column_names)
    values = np.asarray(X, float)
    if values.ndim != 2:
        raise ValueError("design must be a 2-d array or DesignMatrix")
    return values, [f"x{j}" for j in range(values.shape[1])]


def _check_inputs(values, names, y, weights):
    n, p = values.shape
    if n == 0 or p == 0:
        raise ValueError("design matrix must have at least one row and column")
    y = np.asarray(y, float)
    if y.shape != (n,):
        raise ValueError("y must match the number of design rows")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, float)
        if w.shape != (n,):
            raise ValueError("weights must match the number of design rows")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be positive and finite")
    if not np.all(np.isfinite(values)):
        raise ValueError("design matrix contains non-finite values")
    _check_full_rank(values, w, names)
    return y, w


def _check_full_rank(values, weights, names):
    # pivoted QR on the weighted design identifies which columns collide
    weighted = values * np.sqrt(weights)[:, None]
    r, piv = scipy.linalg.qr(weighted, mode="r", pivoting=True)
    diag = np.abs(np.diag(r[: values.shape[1], :]))
    if diag.size == 0 or diag[0] == 0:
        raise SingularDesignError(names)
    cutoff = diag[0] * max(values.shape) * np.finfo(float).eps
    rank = int(np.sum(diag > cutoff))
    if rank < values.shape[1]:
        raise SingularDesignError([names[j] for j in sorted(piv[rank:])])


def _cluster_sum(scores, clusters):
    if clusters is None:
        return scores
    clusters = np.asarray(clusters)
    if clusters.shape[0] != scores.shape[0]:
        raise ValueError("clusters must match the number of observations")
    _, codes = np.unique(clusters, return_inverse=True)
    summed = np.zeros((codes.max() + 1, scores.shape[1]))
    np.add.at(summed, codes, scores)
    return summed


def _sandwich(bread, scores, clusters, small_sample_correction=False):
    """A^{-1} B A^{-1} with B accumulated from (cluster-summed) score rows."""
    grouped = _cluster_sum(scores, clusters)
    meat = grouped.T @ grouped
    try:
        half = np.linalg.solve(bread, meat)
        vcov = np.linalg.solve(bread, half.T).T
    except np.linalg.LinAlgError:
        raise SingularHessianError("sandwich bread matrix is singular")
    if small_sample_correction:
        if clusters is not None:
            g = grouped.shape[0]
            if g < 2:
                raise ValueError("small-sample correction needs at least 2 clusters")
            vcov = vcov * (g / (g - 1))
        else:
            n, p = scores.shape[0], bread.shape[0]
            if n <= p:
                raise ValueError("small-sample correction needs n > p")
            vcov = vcov * (n / (n - p))
    return (vcov + vcov.T) / 2.0


def _poisson_objective(values, y, w, cap):
    def objective(beta):
        eta = np.clip(values @ beta, -cap, cap)
        mu = np.exp(eta)
        value = float(np.sum(w * (y * eta - mu)))
        resid = w * (y - mu)
        grad = values.T @ resid
        hess = -(values.T * (w * mu)) @ values
        return value, grad, hess

    return objective


def _logit_objective(values, y, w, cap):
    def objective(beta):
        eta = np.clip(values @ beta, -cap, cap)
        p = expit(eta)
        value = float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))
        resid = w * (y - p)
        grad = values.T @ resid
        hess = -(values.T * (w * p * (1.0 - p))) @ values
        return value, grad, hess

    return objective


def _multinomial_parts(values, ymat, w, cap, beta):
    n, p = values.shape
    n_classes = ymat.shape[1]
    b = beta.reshape(n_classes, p)
    eta = np.clip(values @ b.T, -cap, cap)
    top = np.maximum(eta.max(axis=1), 0.0)
    lse = top + np.log(np.exp(-top) + np.sum(np.exp(eta - top[:, None]), axis=1))
    probs = np.exp(eta - lse[:, None])
    value = float(np.sum(w * (np.sum(ymat * eta, axis=1) - lse)))
    resid = w[:, None] * (ymat - probs)
    grad = (resid.T @ values).reshape(n_classes * p)
    hess = np.zeros((n_classes * p, n_classes * p))
    for c in range(n_classes):
        for d in range(c, n_classes):
            block = probs[:, c] * ((1.0 if c == d else 0.0) - probs[:, d])
            h = -(values.T * (w * block)) @ values
            hess[c * p:(c + 1) * p, d * p:(d + 1) * p] = h
            if d != c:
                hess[d * p:(d + 1) * p, c * p:(c + 1) * p] = h
    return value, grad, hess, probs, resid


def _multinomial_objective(values, ymat, w, cap):
    def objective(beta):
        value, grad, hess, _, _ = _multinomial_parts(values, ymat, w, cap, beta)
        return value, grad, hess

    return objective


def fit_ols(X, y, weights=None, clusters=None, robust=True):
    """Weighted least squares with a robust (sandwich) covariance by default.

    robust=False reports the classical homoskedastic covariance instead
    (vcov_kind "classical_ols", sigma^2 = sum w e^2 / (sum w - p)).
    """
    values, names = _as_design(X)
    y, w = _check_inputs(values, names, y, weights)
    n, p = values.shape

    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(values * sw[:, None], y * sw, rcond=None)
    resid = y - values @ beta
    score = values.T @ (w * resid)
    score_norm = float(np.max(np.abs(score)))
    bread = (values.T * w) @ values

    if robust:
        scores = (w * resid)[:, None] * values
        vcov = _sandwich(bread, scores, clusters)
        vcov_kind = "cluster_sandwich" if clusters is not None else "sandwich"
    else:
        total = float(w.sum())
        if total <= p:
            raise ValueError("classical variance needs total weight > p")
        sigma2 = float(np.sum(w * resid**2)) / (total - p)
        vcov = sigma2 * np.linalg.inv(bread)
        vcov = (vcov + vcov.T) / 2.0
        vcov_kind = "classical_ols"

    return FitResult(
        family="ols",
        names=names,
        coefficients=beta,
        vcov=vcov,
        vcov_kind=vcov_kind,
        loglik=-0.5 * float(np.sum(w * resid**2)),
        iterations=0,
        converged=True,
        score_norm=score_norm,
        n_obs=n,
    )


def _finish_qmle(family, values, names, y, w, clusters, options, diag, beta,
                 objective, score_rows, cap_error, perfect_fit=None):
    if family == "multinomial_logit":
        eta = values @ beta.reshape(-1, values.shape[1]).T
    else:
        eta = values @ beta
    if float(np.max(np.abs(eta))) >= options.linear_predictor_cap:
        raise cap_error
    # Divergent fits can stall "converged" below the cap once the saturated
    # rows' score drops under the tolerance; a perfectly predicted boundary
    # fit is the signature of that divergence.
    if diag.converged and perfect_fit is not None and perfect_fit(beta):
        raise cap_error
    value, grad, hess = objective(beta)
    if diag.converged:
        vcov = _sandwich(-hess, score_rows(beta), clusters)
        vcov_kind = "cluster_sandwich" if clusters is not None else "sandwich"
    else:
        k = beta.size
        vcov = np.full((k, k), np.nan)
        vcov_kind = "cluster_sandwich" if clusters is not None else "sandwich"
    return FitResult(
        family=family,
        names=names,
        coefficients=beta,
        vcov=vcov,
        vcov_kind=vcov_kind,
        loglik=value,
        iterations=diag.iterations,
        converged=diag.converged,
        score_norm=diag.score_norm,
        n_obs=values.shape[0],
        n_classes=0 if family != "multinomial_logit" else beta.size // values.shape[1],
    )


def fit_poisson_qmle(X, y, weights=None, clusters=None, options: FitOptions = FitOptions()):
    """Poisson quasi-MLE for an exponential conditional mean.

    y may be any non-negative reals (counts, positive continuous, or
    censored-at-zero outcomes); only the conditional mean must be
    exponential for the estimate to be consistent.
    """
    values, names = _as_design(X)
    y, w = _check_inputs(values, names, y, weights)
    if np.any(y < 0):
        raise ValueError("poisson_qmle requires non-negative y")
    if float(np.sum(w * y)) == 0.0:
        raise OverflowGuardError(
            "outcome is identically zero; the exponential mean has no finite optimum"
        )

    cap = options.linear_predictor_cap
    objective = _poisson_objective(values, y, w, cap)
    tol = options.gradient_tolerance * (1.0 + float(w.sum()))
    beta, diag = maximize(objective, np.zeros(values.shape[1]), options, tolerance=tol)

    def score_rows(b):
        mu = np.exp(np.clip(values @ b, -cap, cap))
        return (w * (y - mu))[:, None] * values

    return _finish_qmle(
        "poisson_qmle", values, names, y, w, clusters, options, diag, beta,
        objective, score_rows,
        OverflowGuardError(
            "linear-predictor cap active at the optimum; "
            "estimates would overflow without the guard"
        ),
    )


def fit_logit_qmle(X, y, weights=None, clusters=None, options: FitOptions = FitOptions()):
    """Logistic quasi-MLE for binary or fractional y in [0, 1]."""
    values, names = _as_design(X)
    y, w = _check_inputs(values, names, y, weights)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("logit_qmle requires y in [0, 1]")

    cap = options.linear_predictor_cap
    objective = _logit_objective(values, y, w, cap)
    tol = options.gradient_tolerance * (1.0 + float(w.sum()))
    beta, diag = maximize(objective, np.zeros(values.shape[1]), options, tolerance=tol)

    def score_rows(b):
        p = expit(np.clip(values @ b, -cap, cap))
        return (w * (y - p))[:, None] * values

    def perfect_fit(b):
        if not np.all((y == 0) | (y == 1)):
            return False
        p = expit(np.clip(values @ b, -cap, cap))
        gap = np.where(y == 1, 1.0 - p, p)
        return bool(np.all(gap <= 1e-6))

    return _finish_qmle(
        "logit_qmle", values, names, y, w, clusters, options, diag, beta,
        objective, score_rows,
        SeparationError(
            "coefficients diverged toward the linear-predictor cap; "
            "the outcome is perfectly separated"
        ),
        perfect_fit=perfect_fit,
    )


def fit_multinomial_logit(X, y, weights=None, clusters=None, options: FitOptions = FitOptions()):
    """Multinomial logit with class 0 as base and case-specific regressors.

    y holds integer class labels 0..C with every class observed at least
    once. Coefficients are the C blocks of contrasts against class 0, one
    block per class in design-column order; names carry the class index,
    e.g. "treat[1]".
    """
    values, names = _as_design(X)
    y_arr = np.asarray(y)
    y_float, w = _check_inputs(values, names, y_arr, weights)
    if not np.all(y_float == np.floor(y_float)) or np.any(y_float < 0):
        raise ValueError("multinomial_logit requires integer class labels >= 0")
    labels = y_float.astype(np.int64)
    n_classes = int(labels.max())
    if n_classes < 1:
        raise ValueError("multinomial_logit needs at least 2 observed classes")
    observed = np.unique(labels)
    missing = sorted(set(range(n_classes + 1)) - set(observed.tolist()))
    if missing:
        raise ValueError(f"classes never observed: {missing}")

    n, p = values.shape
    ymat = np.zeros((n, n_classes))
    for c in range(1, n_classes + 1):
        ymat[:, c - 1] = labels == c

    cap = options.linear_predictor_cap
    objective = _multinomial_objective(values, ymat, w, cap)
    tol = options.gradient_tolerance * (1.0 + float(w.sum()))
    beta, diag = maximize(objective, np.zeros(n_classes * p), options, tolerance=tol)

    full_names = [f"{name}[{c}]" for c in range(1, n_classes + 1) for name in names]

    def score_rows(b):
        _, _, _, _, resid = _multinomial_parts(values, ymat, w, cap, b)
        return np.einsum("nc,nk->nck", resid, values).reshape(n, n_classes * p)

    def perfect_fit(b):
        _, _, _, probs, _ = _multinomial_parts(values, ymat, w, cap, b)
        base = 1.0 - probs.sum(axis=1)
        p_obs = np.where(labels == 0, base, probs[np.arange(n), np.maximum(labels - 1, 0)])
        return bool(np.all(p_obs >= 1.0 - 1e-6))

    return _finish_qmle(
        "multinomial_logit", values, full_names, y_float, w, clusters, options,
        diag, beta, objective, score_rows,
        SeparationError(
            "multinomial coefficients diverged toward the linear-predictor cap; "
            "a class is perfectly separated"
        ),
        perfect_fit=perfect_fit,
    )


def robust_vcov(family, X, y, weights, beta_hat, clusters=None,
                small_sample_correction=False, options: FitOptions = FitOptions()):
    """Sandwich covariance A^{-1} B A^{-1} at beta_hat for any supported family.

    A is the negative Hessian of the weighted quasi-likelihood, B the outer
    product of per-observation scores, summed within clusters first when
    cluster ids are given. The optional correction multiplies by G/(G-1)
    (clustered) or n/(n-p) (unclustered).
    """
    values, names = _as_design(X)
    y_arr = np.asarray(y, float)
    if weights is None:
        w = np.ones(values.shape[0])
    else:
        w = np.asarray(weights, float)
    beta = np.asarray(beta_hat, float)
    cap = options.linear_predictor_cap

    if family == "ols":
        resid = y_arr - values @ beta
        scores = (w * resid)[:, None] * values
        bread = (values.T * w) @ values
    elif family == "poisson_qmle":
        mu = np.exp(np.clip(values @ beta, -cap, cap))
        scores = (w * (y_arr - mu))[:, None] * values
        bread = (values.T * (w * mu)) @ values
    elif family == "logit_qmle":
        p = expit(np.clip(values @ beta, -cap, cap))
        scores = (w * (y_arr - p))[:, None] * values
        bread = (values.T * (w * p * (1.0 - p))) @ values
    elif family == "multinomial_logit":
        labels = y_arr.astype(np.int64)
        n, p = values.shape
        n_classes = beta.size // p
        ymat = np.zeros((n, n_classes))
        for c in range(1, n_classes + 1):
            ymat[:, c - 1] = labels == c
        _, _, hess, _, resid = _multinomial_parts(values, ymat, w, cap, beta)
        scores = np.einsum("nc,nk->nck", resid, values).reshape(n, n_classes * p)
        bread = -hess
    else:
        raise ValueError(f"unknown family {family!r}")

    return _sandwich(bread, scores, clusters, small_sample_correction)
