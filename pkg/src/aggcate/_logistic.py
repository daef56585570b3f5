"""Logistic regression by iteratively reweighted least squares.

Shared by the IPD g-formula benchmark and the relative-scale control-mean
fit. Plain Newton on the log-likelihood with step halving; coefficients
exceeding ``blowup`` in absolute value are treated as separation.
"""

from __future__ import annotations

import numpy as np

from .errors import MaxIterationsError, NumericalError


def expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def irls_logistic(X: np.ndarray, y: np.ndarray, tol: float = 1e-10,
                  max_iter: int = 100, blowup: float = 30.0) -> np.ndarray:
    """Fit logit(E[y]) = X beta; returns beta.

    Raises NumericalError on separation (coefficient blow-up) and
    MaxIterationsError on non-convergence.
    """
    n, p = X.shape
    beta = np.zeros(p)
    for _ in range(max_iter):
        mu = expit(X @ beta)
        grad = X.T @ (y - mu)
        wvar = np.clip(mu * (1.0 - mu), 1e-10, None)
        H = (X * wvar[:, None]).T @ X
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise NumericalError(
                "singular information matrix in logistic IRLS") from None
        # step halving keeps the log-likelihood nondecreasing
        ll = _loglik(X, y, beta)
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            if _loglik(X, y, cand) >= ll - 1e-12:
                break
            t *= 0.5
        beta = beta + t * step
        if np.max(np.abs(beta)) > blowup:
            raise NumericalError(
                "logistic IRLS coefficients diverged (separation)")
        if np.max(np.abs(step)) * t < tol * (1.0 + np.max(np.abs(beta))):
            return beta
    raise MaxIterationsError(
        f"logistic IRLS did not converge in {max_iter} iterations")


def _loglik(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = X @ beta
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def sandwich_cov(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Robust covariance of the logistic MLE: A^-1 B A^-1 (unscaled by n)."""
    mu = expit(X @ beta)
    wvar = mu * (1.0 - mu)
    A = (X * wvar[:, None]).T @ X
    resid = y - mu
    B = (X * resid[:, None]).T @ (X * resid[:, None])
    Ainv = np.linalg.inv(A)
    return Ainv @ B @ Ainv
