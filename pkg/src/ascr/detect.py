"""Signal-strength decay and distance-dependent detection functions.

Received strength at distance d is Normal around a spherical-spreading
mean with an extra linear absorption term. Detection given strength is
logistic, so the distance-dependent detection probability is the
expectation of a logistic over a Normal, evaluated with a closed-form
approximation.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .domain import DetectorArray, ModelParams, distances_to_detectors

# scale constant of the logistic-over-Normal expectation approximation,
# treated as frozen; see estimate_sigmoid_normal_lambda for re-derivation
SIGMOID_NORMAL_LAMBDA = 0.368


def expected_strength(d, beta0: float, beta1: float):
    """Mean received strength (dBFS) at distance d metres.

    Spherical spreading (20 dB per decade) plus linear decay beta1 per
    metre beyond 1 m; flat at beta0 within 1 m.
    """
    d = np.asarray(d, dtype=float)
    safe = np.maximum(d, 1.0)
    out = beta0 - 20.0 * np.log10(safe) - beta1 * (safe - 1.0)
    if out.ndim == 0:
        return float(out)
    return out


def strength_pdf(y, d, zeta: int, params: ModelParams):
    """Normal density of received strength y at distance d for class zeta."""
    b0, sigma = params.strength_params(zeta)
    mu = expected_strength(d, b0, params.beta1)
    return norm.pdf(np.asarray(y, dtype=float), loc=mu, scale=sigma)


def detect_prob_given_strength(y, r0: float, r1: float):
    """Logistic probability of detection given received strength y."""
    out = expit(r0 + r1 * np.asarray(y, dtype=float))
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_normal_expectation(mu, sigma, r0: float, r1: float):
    """E[logistic(r0 + r1 Y)] for Y ~ Normal(mu, sigma^2).

    Closed-form moderation of the logistic argument; accurate to about
    0.01 absolute over the parameter ranges used here.
    """
    mu = np.asarray(mu, dtype=float)
    den = np.sqrt(1.0 + SIGMOID_NORMAL_LAMBDA * (r1 * np.asarray(sigma, dtype=float)) ** 2)
    out = expit((r1 * mu + r0) / den)
    if out.ndim == 0:
        return float(out)
    return out


def g(d, zeta: int, params: ModelParams):
    """Distance-dependent detection probability for class zeta."""
    b0, sigma = params.strength_params(zeta)
    mu = expected_strength(d, b0, params.beta1)
    return sigmoid_normal_expectation(mu, sigma, params.r0, params.r1)


def p_dot(x, zeta: int, params: ModelParams, array: DetectorArray):
    """Probability a call at x is detected by at least one microphone."""
    d = distances_to_detectors(x, array)
    gs = g(d, zeta, params)
    log_miss = np.log1p(-np.asarray(gs))
    out = -np.expm1(log_miss.sum(axis=-1))
    if np.ndim(x) == 1:
        return float(out[0])
    return out


def mean_detection_prob(params: ModelParams, array: DetectorArray, zeta: int = 1) -> float:
    """Region-averaged detection probability over the integration mask."""
    return float(np.mean(p_dot(array.mask.centres, zeta, params, array)))


def estimate_sigmoid_normal_lambda(
    rng: np.random.Generator,
    n_draws: int = 200_000,
    grid: np.ndarray | None = None,
) -> float:
    """Dev utility: re-estimate the moderation constant by Monte Carlo.

    Minimises squared error between the approximation and simulated
    expectations over a grid of (mu, sigma, r0, r1). Not used by the
    production code path, which keeps the frozen constant.
    """
    from scipy.optimize import minimize_scalar

    if grid is None:
        mus = np.array([-80.0, -60.0, -40.0, -20.0, 0.0])
        sigmas = np.array([2.0, 8.0, 15.0, 30.0])
        r1s = np.array([0.05, 0.1, 0.2, 0.4])
        r0s = np.array([-2.0, 2.0, 6.0])
        grid = np.array([(m, s, a, b) for m in mus for s in sigmas for a in r0s for b in r1s])

    z = rng.standard_normal(n_draws)
    targets = np.array([np.mean(expit(r0 + r1 * (m + s * z))) for (m, s, r0, r1) in grid])

    def loss(lam: float) -> float:
        den = np.sqrt(1.0 + lam * (grid[:, 3] * grid[:, 1]) ** 2)
        approx = expit((grid[:, 3] * grid[:, 0] + grid[:, 2]) / den)
        return float(np.sum((approx - targets) ** 2))

    res = minimize_scalar(loss, bounds=(0.05, 1.5), method="bounded")
    return float(res.x)
