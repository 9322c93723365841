"""Maximum-likelihood fitting and density estimators.

Fitting minimises the negative log-likelihood on the unconstrained
(link-transformed) scale with bounded L-BFGS-B and central
finite-difference gradients. Density estimates divide an effective
true-positive count by the mask-averaged detection probability times
surveyed area (hectares) and duration (hours).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .domain import (
    HECTARE_M2,
    ConfidenceDistParams,
    LinkTransform,
    ModelParams,
    MODEL_PARAM_NAMES,
    SurveyData,
)
from .glm import logistic_mle
from .lik import SurveyLikelihood, _mixture_branches

_BAD_OBJECTIVE = 1e10

# typical estimation-uncertainty scales per unconstrained coordinate;
# the optimizer works in these units so its identity initial Hessian,
# gradient tolerance, and finite-difference step are roughly whitened
_COORD_SCALE = {
    "beta0": 2.0,
    "beta0_fp": 4.0,
    "beta1": 0.02,
    "sigma_s": 0.1,
    "sigma_s_fp": 0.2,
    "sigma_t": 0.15,
    "r0": 1.0,
    "r1": 0.01,
    "pi": 0.5,
}


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    maxiter: int = 500
    gtol: float = 1e-4  # gradient infinity-norm
    ftol: float = 1e-9  # relative objective change
    fd_step: float = 1e-5  # central-difference step, unconstrained scale
    n_restarts: int = 3  # jittered restarts on non-convergence
    restart_scale: float = 0.1
    seed: int = 0  # drives the (deterministic) restart jitter


@dataclass(frozen=True, eq=False)
class FitResult:
    model: str
    params_hat: ModelParams
    loglik: float
    converged: bool
    n_evals: int
    p_hat: float
    zeta_hat: np.ndarray | None
    D_c_hat: float
    n_calls: int
    message: str = ""
    # inverse Hessian estimate on the scaled unconstrained coordinates,
    # kept in memory (not serialised) to precondition refits of the same
    # model on data of the same size, e.g. bootstrap replicates
    hess_inv_scaled: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "params_hat": self.params_hat.to_dict(),
            "loglik": self.loglik,
            "converged": bool(self.converged),
            "n_evals": self.n_evals,
            "p_hat": self.p_hat,
            "D_c_hat": self.D_c_hat,
            "n_calls": self.n_calls,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(
            model=d["model"],
            params_hat=ModelParams.from_dict(d["params_hat"]),
            loglik=float(d["loglik"]),
            converged=bool(d["converged"]),
            n_evals=int(d["n_evals"]),
            p_hat=float(d["p_hat"]),
            zeta_hat=None,
            D_c_hat=float(d["D_c_hat"]),
            n_calls=int(d["n_calls"]),
            message=d.get("message", ""),
        )


def save_fit_json(fit: FitResult, path) -> None:
    Path(path).write_text(json.dumps(fit.to_dict(), indent=2, sort_keys=True) + "\n")


def load_fit_json(path) -> FitResult:
    return FitResult.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# initial values
# ---------------------------------------------------------------------------


def default_init(
    data: SurveyData,
    model: str,
    tau: ConfidenceDistParams | None = None,
    detection_curve: tuple[float, float] | None = None,
) -> ModelParams:
    """Moment-style starting values inside the plausible region."""
    ys = np.concatenate([c.y for c in data.calls]) if data.n_calls else np.array([0.0])
    beta0 = float(ys.max())
    sigma_s = float(max(np.std(ys), 3.0))
    r0, r1 = detection_curve if detection_curve is not None else (0.0, 0.1)
    init = ModelParams(
        beta0=beta0,
        beta1=0.1,
        sigma_s=sigma_s,
        sigma_t=1.0,
        r0=float(r0),
        r1=float(r1),
        tau=tau,
    )
    names = MODEL_PARAM_NAMES[model]
    if "beta0_fp" in names:
        init = replace(init, beta0_fp=beta0 - 10.0, sigma_s_fp=2.0 * sigma_s)
    if "pi" in names:
        rho_bar = np.array([float(np.mean(c.rho)) for c in data.calls])
        init = replace(init, pi=float(np.clip(rho_bar.mean(), 0.05, 0.95)))
    return init


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def _central_fd_grad(fun, x: np.ndarray, h: float) -> np.ndarray:
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return grad


def fd_hessian_inverse(
    data: SurveyData,
    fit: "FitResult",
    tau: ConfidenceDistParams | None = None,
    config: FitConfig | None = None,
    evaluator: SurveyLikelihood | None = None,
    step: float = 1e-3,
) -> np.ndarray | None:
    """Inverse of a finite-difference Hessian at a fitted optimum, on the
    scaled unconstrained coordinates.

    A far better refit preconditioner than the optimizer's own memory
    estimate; costs about 4k^2 objective evaluations once. Returns None
    when the Hessian is not positive definite.
    """
    cfg = config or FitConfig()
    link = LinkTransform.for_model(fit.model)
    scale = np.array([_COORD_SCALE[name] for name in link.names])
    ev = evaluator if evaluator is not None else SurveyLikelihood(
        data, tau=tau or fit.params_hat.tau
    )
    template = fit.params_hat

    def nll(u: np.ndarray) -> float:
        params = link.inverse(u * scale, template)
        try:
            val = ev.loglik(fit.model, params)
        except (ValueError, FloatingPointError):
            return _BAD_OBJECTIVE
        return -val if np.isfinite(val) else _BAD_OBJECTIVE

    u_hat = link.forward(template) / scale
    k = u_hat.size
    hess = np.empty((k, k))
    for i in range(k):
        e = np.zeros(k)
        e[i] = step
        gp = _central_fd_grad(nll, u_hat + e, cfg.fd_step)
        gm = _central_fd_grad(nll, u_hat - e, cfg.fd_step)
        hess[i] = (gp - gm) / (2.0 * step)
    hess = 0.5 * (hess + hess.T)
    try:
        np.linalg.cholesky(hess)
        return np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        return None


def fit_model(
    data: SurveyData,
    model: str,
    init: ModelParams | None = None,
    tau: ConfidenceDistParams | None = None,
    config: FitConfig | None = None,
    evaluator: SurveyLikelihood | None = None,
    precondition: np.ndarray | None = None,
) -> FitResult:
    """Fit one model by maximum likelihood.

    ``precondition`` is an inverse-Hessian estimate (scaled coordinates)
    from an earlier fit of the same model; when given, the optimizer
    runs in the whitened coordinates it implies, which sharply reduces
    iteration counts for refits on comparable data. Non-convergence
    after the configured restarts is reported honestly in ``converged``;
    a non-finite objective at the starting values is an error because it
    signals a data/parameter mismatch.
    """
    if model not in MODEL_PARAM_NAMES:
        raise ValueError(f"unknown model {model!r}")
    if data.n_calls == 0:
        raise FitError("cannot fit a survey with no calls")
    cfg = config or FitConfig()
    if model == "random_mixture":
        tau = tau or (init.tau if init is not None else None)
        if tau is None:
            raise FitError("random_mixture requires confidence-distribution parameters (tau)")
    ev = evaluator if evaluator is not None else SurveyLikelihood(data, tau=tau)
    if model == "random_mixture" and ev.tau is None:
        raise FitError("evaluator was built without tau")

    if init is None:
        init = default_init(data, model, tau=tau)
    elif tau is not None:
        init = replace(init, tau=tau)
    link = LinkTransform.for_model(model)
    scale = np.array([_COORD_SCALE[name] for name in link.names])
    u0 = link.forward(init) / scale
    bounds = [(lo / s, hi / s) for (lo, hi), s in zip(link.bounds(), scale)]
    # soft box for the preconditioned path, slack so finite-difference
    # probes at an active bound of the boxed path stay evaluable
    lo_b = np.array([b[0] for b in bounds]) - 1e-3
    hi_b = np.array([b[1] for b in bounds]) + 1e-3

    n_evals = 0

    def nll(u: np.ndarray) -> float:
        nonlocal n_evals
        n_evals += 1
        if np.any(u < lo_b) or np.any(u > hi_b):
            return _BAD_OBJECTIVE
        params = link.inverse(u * scale, init)
        try:
            val = ev.loglik(model, params)
        except (ValueError, FloatingPointError):
            return _BAD_OBJECTIVE
        if not np.isfinite(val):
            return _BAD_OBJECTIVE
        return -val

    f0 = nll(u0)
    if f0 >= _BAD_OBJECTIVE:
        raise FitError("objective is non-finite at the starting values")

    best = None
    if precondition is not None:
        best = _preconditioned_run(nll, u0, precondition, cfg)
    if best is None or not best["success"]:
        bounded = _bounded_runs(nll, u0, bounds, cfg)
        if best is None or bounded["fun"] < best["fun"]:
            best = bounded

    params_hat = link.inverse(best["x"] * scale, init)
    loglik = -float(best["fun"])
    converged = bool(best["success"]) and loglik > -_BAD_OBJECTIVE / 2

    p_hat = ev.detection_prob_mean(params_hat, zeta=1)
    zeta_hat = None
    if model in ("fixed_mixture", "random_mixture"):
        zeta_hat = ev.zeta_expectations(model, params_hat)
    fit = FitResult(
        model=model,
        params_hat=params_hat,
        loglik=loglik,
        converged=converged,
        n_evals=n_evals,
        p_hat=p_hat,
        zeta_hat=zeta_hat,
        D_c_hat=float("nan"),
        n_calls=data.n_calls,
        message=str(best["message"]),
        hess_inv_scaled=best["hess_inv"],
    )
    if model == "fp_only":
        return fit
    return replace(fit, D_c_hat=estimate_density(data, fit))


def _bounded_runs(nll, u0: np.ndarray, bounds, cfg: FitConfig) -> dict:
    """L-BFGS-B with deterministic jittered restarts on non-convergence."""

    def grad(u):
        return _central_fd_grad(nll, u, cfg.fd_step)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(101,)))
    best = None
    u_start = u0.copy()
    for _ in range(cfg.n_restarts + 1):
        res = minimize(
            nll,
            u_start,
            jac=grad,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": cfg.maxiter, "ftol": cfg.ftol, "gtol": cfg.gtol},
        )
        if best is None or res.fun < best.fun:
            best = res
        if best.success:
            break
        jitter = rng.uniform(-1.0, 1.0, size=u0.size)
        u_start = u0 + cfg.restart_scale * np.maximum(np.abs(u0), 0.5) * jitter
    hess_inv = None
    try:
        hess_inv = np.asarray(best.hess_inv.todense())
    except (AttributeError, ValueError):
        pass
    return {
        "x": best.x,
        "fun": float(best.fun),
        "success": bool(best.success),
        "message": str(best.message),
        "hess_inv": hess_inv,
    }


def _preconditioned_run(nll, u0: np.ndarray, hess_inv: np.ndarray, cfg: FitConfig) -> dict | None:
    """Refit in coordinates whitened by a previous fit's curvature.

    The box constraints are enforced softly inside the objective (the
    whitening rotation breaks their axis alignment). Returns None when
    the supplied curvature is unusable.
    """
    try:
        chol = np.linalg.cholesky(0.5 * (hess_inv + hess_inv.T))
    except np.linalg.LinAlgError:
        return None

    def nll_q(q):
        return nll(u0 + chol @ q)

    def grad_q(q):
        return _central_fd_grad(nll_q, q, cfg.fd_step)

    res = minimize(
        nll_q,
        np.zeros_like(u0),
        jac=grad_q,
        method="L-BFGS-B",
        options={"maxiter": cfg.maxiter, "ftol": cfg.ftol, "gtol": cfg.gtol},
    )
    x = u0 + chol @ res.x
    hi = None
    try:
        hi = chol @ np.asarray(res.hess_inv.todense()) @ chol.T
    except (AttributeError, ValueError):
        pass
    return {
        "x": x,
        "fun": float(res.fun),
        "success": bool(res.success) and res.fun < _BAD_OBJECTIVE / 2,
        "message": str(res.message),
        "hess_inv": hi,
    }


# ---------------------------------------------------------------------------
# posterior class probabilities (single-call form)
# ---------------------------------------------------------------------------


def zeta_expectation_fixed(rho_bar: float, m1: float, m0: float) -> float:
    """Posterior P(true positive) with the call's mean confidence as prior.

    ``m1``/``m0`` are the call's log marginal densities under each class.
    """
    a, b = _mixture_branches(np.array([rho_bar]), np.array([m1]), np.array([m0]))
    return float(np.exp(a - np.logaddexp(a, b))[0])


def zeta_expectation_random(pi: float, m1: float, m0: float, c1: float, c0: float) -> float:
    """Posterior P(true positive) with mixing weight pi and per-class
    confidence-density terms ``c1``/``c0`` added to the marginals."""
    a, b = _mixture_branches(np.array([pi]), np.array([m1 + c1]), np.array([m0 + c0]))
    return float(np.exp(a - np.logaddexp(a, b))[0])


# ---------------------------------------------------------------------------
# density estimators
# ---------------------------------------------------------------------------


def estimate_density(data: SurveyData, fit: FitResult) -> float:
    """Horvitz-Thompson-style call density in calls/hectare/hour.

    The numerator is the number of detections for the true-positive-only
    model, the summed posterior true-positive probabilities for the
    mixtures, and the summed mean confidences for the pseudo-likelihood.
    """
    if fit.p_hat < 1e-6:
        raise FitError("region/parameters imply near-zero detectability")
    if fit.model == "tp_only":
        numerator = float(data.n_calls)
    elif fit.model in ("fixed_mixture", "random_mixture"):
        if fit.zeta_hat is None:
            raise FitError("mixture fit lacks per-call class expectations")
        numerator = float(np.sum(fit.zeta_hat))
    elif fit.model == "pseudo":
        numerator = float(np.sum([np.mean(c.rho) for c in data.calls]))
    else:
        raise ValueError(f"no density estimator for model {fit.model!r}")
    area_ha = data.array.region.area_ha
    return numerator / (fit.p_hat * area_ha * data.duration_hours)


def canonical_estimate(
    n_detected: int, f_hat: float, p_hat: float, area_ha: float, duration_hours: float
) -> float:
    """Baseline estimator applying a uniform false-positive correction."""
    return n_detected * (1.0 - f_hat) / (p_hat * area_ha * duration_hours)


# ---------------------------------------------------------------------------
# detection curve from labelled strength data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DetectionCurveFit:
    r0: float
    r1: float
    cov: np.ndarray  # 2x2 asymptotic covariance, order (r0, r1)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def fit_detection_curve(y, detected) -> DetectionCurveFit:
    """Logistic regression of detection state on received strength.

    The asymptotic Normal of the estimates supports resampling the
    detection curve in simulation studies.
    """
    coef, cov = logistic_mle(np.asarray(y, dtype=float), np.asarray(detected, dtype=float))
    return DetectionCurveFit(r0=float(coef[0]), r1=float(coef[1]), cov=cov)


def write_zeta_csv(data: SurveyData, fit: FitResult, path) -> None:
    """Per-call posterior true-positive probabilities next to the raw
    mean confidences."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["call_id", "zeta_hat", "rho_bar"])
        for j, call in enumerate(data.calls):
            zh = float(fit.zeta_hat[j]) if fit.zeta_hat is not None else ""
            w.writerow(
                [call.call_id, format(zh, ".12g") if zh != "" else "", format(float(np.mean(call.rho)), ".12g")]
            )
