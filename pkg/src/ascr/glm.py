"""Binary logistic regression by iteratively reweighted least squares.

Shared by confidence calibration and detection-curve fitting. Returns
the MLE with its asymptotic covariance (inverse observed information)
and detects complete separation instead of silently diverging.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class SeparationError(RuntimeError):
    """Raised when the labels are perfectly separated by the covariate."""


def logistic_mle(
    x: np.ndarray,
    y: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """Fit P(y=1 | x) = logistic(b0 + b1 x).

    Returns (coef, cov) with coef = [intercept, slope] and cov the
    inverse observed information at the MLE. Raises ``ValueError`` if
    only one label is present and ``SeparationError`` on complete or
    quasi-complete separation.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    n1 = y.sum()
    if n1 == 0 or n1 == y.size:
        raise ValueError("both labels must be present")

    xmat = np.column_stack([np.ones_like(x), x])
    beta = np.array([float(np.log((n1 + 0.5) / (y.size - n1 + 0.5))), 0.0])
    for _ in range(max_iter):
        eta = xmat @ beta
        p = expit(eta)
        w = p * (1.0 - p)
        if np.max(np.abs(eta)) > 30.0 and np.min(w) < 1e-12:
            raise SeparationError(
                "perfect separation detected; fall back to a fixed mapping"
            )
        grad = xmat.T @ (y - p)
        info = (xmat * w[:, None]).T @ xmat
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("singular information matrix") from exc
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    else:
        if np.max(np.abs(beta)) > 25.0:
            raise SeparationError("IRLS did not converge; labels may be separated")
    eta = xmat @ beta
    p = expit(eta)
    info = (xmat * (p * (1.0 - p))[:, None]).T @ xmat
    cov = np.linalg.inv(info)
    return beta, cov


def logistic_deviance(x: np.ndarray, y: np.ndarray, coef: np.ndarray) -> float:
    """Residual deviance of a fitted logistic model."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    eta = coef[0] + coef[1] * x
    # -2 sum[y log p + (1-y) log(1-p)] in a softplus form stable for large |eta|
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))
