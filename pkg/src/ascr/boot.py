"""Parametric bootstrap and confidence-interval construction.

Each replicate simulates a survey from the fitted model (animal
intensity implied by the fitted call density, false-positive fraction
from the posterior class probabilities, confidences resampled from the
validation pools), refits the same model, and records the estimates.
Intervals use the normal approximation and type-7 percentiles.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .domain import ConfidenceDistParams, ModelParams, MODEL_PARAM_NAMES, SurveyData
from .fit import FitConfig, FitError, FitResult, fit_model
from .sim import Scenario, simulate_survey


@dataclass(frozen=True)
class BootConfig:
    B: int = 200
    seed: int = 0
    level: float = 0.95
    mu_c: float = 0.5  # calls per hour per animal, needed for animal intensity
    threads: int = 1
    max_failure_fraction: float = 0.2
    mask_cell_m: float | None = None  # refit-mask override for the replicates
    fit: FitConfig = field(default_factory=lambda: FitConfig(n_restarts=0))


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    model: str
    B: int
    rows: list[dict]  # one per replicate: parameter estimates + D_c/D_a + converged
    intervals: dict[str, dict[str, tuple[float, float]]]
    level: float
    n_failed: int
    unreliable: bool
    f_hat: float

    def values(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["converged"]])


def ci_normal(values, point_estimate: float, level: float) -> tuple[float, float]:
    """Normal-approximation interval centred on the point estimate."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("need at least two replicate values")
    z = norm.ppf(0.5 * (1.0 + level))
    half = z * float(np.std(values, ddof=1))
    return (point_estimate - half, point_estimate + half)


def ci_percentile(values, level: float) -> tuple[float, float]:
    """Equal-tail empirical quantile interval (type-7 interpolation)."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("need at least two replicate values")
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha], method="linear")
    return (float(lo), float(hi))


def f_hat_from_fit(data: SurveyData, fit: FitResult) -> float:
    """Estimated false-positive fraction among the detections."""
    if fit.model == "tp_only":
        return 0.0
    if fit.model in ("fixed_mixture", "random_mixture"):
        return float(1.0 - np.mean(fit.zeta_hat))
    if fit.model == "pseudo":
        rho_bar = np.array([float(np.mean(c.rho)) for c in data.calls])
        return float(1.0 - rho_bar.mean())
    raise ValueError(f"no false-positive rate for model {fit.model!r}")


def _merge_fp_params(params: ModelParams, fp_params: ModelParams | None) -> ModelParams:
    """Fill in false-positive generative fields from an external fit.

    Used for models that do not estimate those fields themselves.
    """
    if fp_params is None:
        return params
    return replace(params, beta0_fp=fp_params.beta0_fp, sigma_s_fp=fp_params.sigma_s_fp)


def _boot_scenario(
    data: SurveyData,
    fit: FitResult,
    config: BootConfig,
    pools_tp: np.ndarray,
    pools_fp: np.ndarray,
    fp_params: ModelParams | None,
) -> Scenario:
    f_hat = f_hat_from_fit(data, fit)
    gen_params = _merge_fp_params(fit.params_hat, fp_params)
    if f_hat > 0 and (gen_params.beta0_fp is None or gen_params.sigma_s_fp is None):
        raise FitError(
            "bootstrap needs false-positive strength parameters; supply fp_params "
            "fitted on an independent labelled false-positive dataset"
        )
    if f_hat > 0 and np.asarray(pools_fp).size == 0:
        raise FitError("bootstrap with false positives needs a false-positive confidence pool")
    return Scenario(
        array=data.array,
        call_density=fit.D_c_hat,
        call_rate=config.mu_c,
        duration_hours=data.duration_hours,
        params=gen_params,
        f=f_hat,
        pools_tp=np.asarray(pools_tp, dtype=float),
        pools_fp=np.asarray(pools_fp, dtype=float),
        speed_of_sound=data.speed_of_sound,
        seed=config.seed,
    )


def _replicate(args) -> dict:
    scenario, model, init, tau, fit_cfg, mu_c, mask_m, precond, b = args
    sim = simulate_survey(scenario, replicate=b)
    data = sim.data.with_mask(mask_m) if mask_m is not None else sim.data
    row: dict = {"replicate": b}
    try:
        refit = fit_model(
            data, model, init=init, tau=tau, config=fit_cfg, precondition=precond
        )
        row["converged"] = bool(refit.converged)
        row["D_c"] = refit.D_c_hat
        row["D_a"] = refit.D_c_hat / mu_c
        for name in MODEL_PARAM_NAMES[model]:
            row[name] = getattr(refit.params_hat, name)
    except (FitError, ValueError):
        row["converged"] = False
        row["D_c"] = float("nan")
        row["D_a"] = float("nan")
        for name in MODEL_PARAM_NAMES[model]:
            row[name] = float("nan")
    return row


def bootstrap(
    data: SurveyData,
    fit: FitResult,
    config: BootConfig,
    tau: ConfidenceDistParams | None = None,
    pools_tp=np.array([1.0]),
    pools_fp=np.array([]),
    fp_params: ModelParams | None = None,
) -> BootstrapResult:
    """Parametric bootstrap of a converged fit.

    ``pools_tp``/``pools_fp`` are validation-set confidence values for
    each class; ``fp_params`` supplies false-positive strength
    parameters for models that do not estimate them (fitted separately
    on labelled false positives).
    """
    if not fit.converged:
        raise FitError("refusing to bootstrap an unconverged fit")
    if config.B < 2:
        raise ValueError("B must be at least 2")
    scenario = _boot_scenario(data, fit, config, pools_tp, pools_fp, fp_params)
    init = _merge_fp_params(fit.params_hat, fp_params)
    if fit.model == "random_mixture" and tau is None:
        tau = fit.params_hat.tau
    jobs = [
        (
            scenario,
            fit.model,
            init,
            tau,
            config.fit,
            config.mu_c,
            config.mask_cell_m,
            fit.hess_inv_scaled,
            b,
        )
        for b in range(config.B)
    ]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            rows = list(pool.map(_replicate, jobs, chunksize=4))
    else:
        rows = [_replicate(j) for j in jobs]

    ok = [r for r in rows if r["converged"]]
    n_failed = config.B - len(ok)
    unreliable = n_failed > config.max_failure_fraction * config.B

    intervals: dict[str, dict[str, tuple[float, float]]] = {}
    if len(ok) >= 2:
        points = {"D_c": fit.D_c_hat, "D_a": fit.D_c_hat / config.mu_c}
        for name in MODEL_PARAM_NAMES[fit.model]:
            points[name] = getattr(fit.params_hat, name)
        for key, point in points.items():
            vals = np.array([r[key] for r in ok], dtype=float)
            intervals[key] = {
                "normal": ci_normal(vals, point, config.level),
                "percentile": ci_percentile(vals, config.level),
            }
    return BootstrapResult(
        model=fit.model,
        B=config.B,
        rows=rows,
        intervals=intervals,
        level=config.level,
        n_failed=n_failed,
        unreliable=unreliable,
        f_hat=f_hat_from_fit(data, fit),
    )


def write_bootstrap_csv(result: BootstrapResult, path) -> None:
    keys = ["replicate", "converged", "D_c", "D_a"] + list(MODEL_PARAM_NAMES[result.model])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in result.rows:
            w.writerow(
                [
                    r["replicate"],
                    int(r["converged"]),
                    *(format(float(r[k]), ".12g") for k in keys[2:]),
                ]
            )


def write_intervals_json(result: BootstrapResult, path) -> None:
    d = {
        "model": result.model,
        "level": result.level,
        "B": result.B,
        "n_failed": result.n_failed,
        "unreliable": result.unreliable,
        "f_hat": result.f_hat,
        "intervals": {
            k: {m: list(v) for m, v in methods.items()} for k, methods in result.intervals.items()
        },
    }
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
