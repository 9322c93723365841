"""Simulation-study harness: point-estimation bias/CV and interval coverage.

Each replicate draws a detection curve from the asymptotic Normal of a
logistic fit to a synthetic labelled test set, resamples that test set
for confidence pools and the false-positive fraction, simulates a
survey, and fits the requested estimators. The coverage study adds a
parametric bootstrap per replicate and checks whether the true call
density falls inside each interval.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .boot import BootConfig, bootstrap
from .conf import PlattFit, ValidationSample, fit_confidence_dist, fit_platt, map_confidence
from .domain import ConfidenceDistParams, DetectorArray, ModelParams
from .fit import (
    DetectionCurveFit,
    FitConfig,
    FitError,
    canonical_estimate,
    default_init,
    fit_detection_curve,
    fit_model,
)
from .sim import Scenario, simulate_survey, substream, true_positive_subset

ESTIMATORS = ("tp_free", "tp_fp", "fixed", "random", "pseudo", "canonical")

_MODEL_FOR_ESTIMATOR = {
    "tp_free": "tp_only",
    "tp_fp": "tp_only",
    "fixed": "fixed_mixture",
    "random": "random_mixture",
    "pseudo": "pseudo",
}


# ---------------------------------------------------------------------------
# synthetic labelled reference data (validation + test sets)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDetectionModel:
    """Generator for labelled validation/test sets.

    Raw scores are Gamma with a common shape and class-specific scales,
    which makes the true class posterior exactly logistic in the raw
    score, so calibrated confidences are exact by construction. Strength
    values for the detection-curve fit are uniform over a range spanning
    the logistic transition.
    """

    r0: float
    r1: float
    f: float = 0.15  # false-positive fraction among detections
    score_shape: float = 2.0
    score_scale_tp: float = 1.1
    score_scale_fp: float = 0.35
    n_events: int = 1500  # true-call events per set (detected or not)
    strength_range: tuple[float, float] = (-140.0, -20.0)


@dataclass(frozen=True, eq=False)
class LabelledSet:
    """One labelled dataset: true-call strength/detection rows plus raw
    scores for every detection of either class."""

    curve_y: np.ndarray  # strengths of true-call events
    curve_detected: np.ndarray  # detection indicator for those events
    raw_tp: np.ndarray  # raw scores of detected true positives
    raw_fp: np.ndarray  # raw scores of detected false positives

    @property
    def f_hat(self) -> float:
        n_fp = self.raw_fp.size
        return n_fp / (n_fp + self.raw_tp.size)

    def samples(self) -> list[ValidationSample]:
        out = [ValidationSample(raw_score=float(s), label=1) for s in self.raw_tp]
        out += [ValidationSample(raw_score=float(s), label=0) for s in self.raw_fp]
        return out


def simulate_labelled_set(model: SyntheticDetectionModel, rng: np.random.Generator) -> LabelledSet:
    y = rng.uniform(*model.strength_range, size=model.n_events)
    detected = rng.random(model.n_events) < expit(model.r0 + model.r1 * y)
    n_tp = int(detected.sum())
    n_fp = int(np.round(n_tp * model.f / (1.0 - model.f)))
    raw_tp = rng.gamma(model.score_shape, model.score_scale_tp, size=n_tp)
    raw_fp = rng.gamma(model.score_shape, model.score_scale_fp, size=n_fp)
    return LabelledSet(curve_y=y, curve_detected=detected, raw_tp=raw_tp, raw_fp=raw_fp)


@dataclass(frozen=True, eq=False)
class DetectionReference:
    """Fitted quantities from the synthetic validation and test sets."""

    curve: DetectionCurveFit  # logistic fit on the test set
    platt: PlattFit  # calibration fitted on the validation set
    tau: ConfidenceDistParams  # Beta confidence model from validation
    pools_val_tp: np.ndarray  # calibrated validation confidences
    pools_val_fp: np.ndarray
    test: LabelledSet
    f_hat: float  # test-set false-positive fraction


def make_reference(model: SyntheticDetectionModel, seed: int) -> DetectionReference:
    validation = simulate_labelled_set(model, substream(seed, 1))
    test = simulate_labelled_set(model, substream(seed, 2))
    platt = fit_platt(validation.samples())
    tau = fit_confidence_dist(validation.samples(), "beta", platt=platt)
    curve = fit_detection_curve(test.curve_y, test.curve_detected)
    return DetectionReference(
        curve=curve,
        platt=platt,
        tau=tau,
        pools_val_tp=map_confidence(validation.raw_tp, platt.a, platt.b),
        pools_val_fp=map_confidence(validation.raw_fp, platt.a, platt.b),
        test=test,
        f_hat=test.f_hat,
    )


def draw_replicate_inputs(
    ref: DetectionReference, rng: np.random.Generator
) -> tuple[float, float, np.ndarray, np.ndarray, float]:
    """Per-replicate (r0, r1, tp pool, fp pool, f).

    The curve is drawn from the asymptotic Normal of its fit; pools and
    the false-positive fraction come from a joint resample of the test
    set's detections, keeping them coherent.
    """
    mean = np.array([ref.curve.r0, ref.curve.r1])
    for _ in range(100):
        r0, r1 = rng.multivariate_normal(mean, ref.curve.cov)
        if r1 > 0.01:
            break
    else:
        r0, r1 = mean
    raw_all = np.concatenate([ref.test.raw_tp, ref.test.raw_fp])
    labels = np.concatenate(
        [np.ones(ref.test.raw_tp.size, dtype=int), np.zeros(ref.test.raw_fp.size, dtype=int)]
    )
    idx = rng.integers(0, raw_all.size, size=raw_all.size)
    raw, lab = raw_all[idx], labels[idx]
    if not (lab == 1).any() or not (lab == 0).any():
        raw, lab = raw_all, labels
    pool_tp = map_confidence(raw[lab == 1], ref.platt.a, ref.platt.b)
    pool_fp = map_confidence(raw[lab == 0], ref.platt.a, ref.platt.b)
    f = float(np.mean(lab == 0))
    return float(r0), float(r1), pool_tp, pool_fp, f


# ---------------------------------------------------------------------------
# canonical scenario
# ---------------------------------------------------------------------------

# detection-curve intercept/slope chosen so that the closed-form
# logistic-over-Normal approximation stays accurate over the detection
# range (its relative error grows in the far tail, which biases fits
# when the effective detection radius is small)
GIBBON_TRUE_PARAMS = ModelParams(
    beta0=0.0,
    beta0_fp=-15.0,
    beta1=0.12,
    sigma_s=15.0,
    sigma_s_fp=30.0,
    sigma_t=2.0,
    r0=14.0,
    r1=0.15,
)


def gibbon_array(mask_cell_m: float = 50.0) -> DetectorArray:
    """4x4 grid at 600 m spacing with a 1800 m buffer."""
    return DetectorArray.grid(
        nx=4, ny=4, spacing_m=600.0, buffer_m=1800.0, mask_cell_m=mask_cell_m
    )


def gibbon_scenario(
    mask_cell_m: float = 50.0, f: float = 0.15, seed: int = 0
) -> tuple[Scenario, SyntheticDetectionModel]:
    """Low-density forest-primate scenario used throughout the studies.

    The detection-curve intercept/slope and the synthetic confidence
    model stand in for quantities that would come from a real ML
    detector evaluated on labelled audio.
    """
    detmodel = SyntheticDetectionModel(
        r0=GIBBON_TRUE_PARAMS.r0, r1=GIBBON_TRUE_PARAMS.r1, f=f
    )
    scenario = Scenario(
        array=gibbon_array(mask_cell_m),
        call_density=0.06,
        call_rate=0.5,
        duration_hours=8.0,
        params=GIBBON_TRUE_PARAMS,
        f=f,
        seed=seed,
    )
    return scenario, detmodel


# ---------------------------------------------------------------------------
# study configuration and report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    R: int = 200
    B: int = 100
    level: float = 0.95
    seed: int = 0
    threads: int = 1
    estimators: tuple[str, ...] = ESTIMATORS
    mask_cell_m: float = 200.0  # study-fit mask; convergence-checked default
    boot_mask_cell_m: float = 300.0  # coarser refit mask inside the bootstrap
    fit: FitConfig = field(default_factory=FitConfig)
    fp_reference_density: float = 0.25  # call density of the labelled fp dataset


@dataclass(frozen=True)
class EstimatorStats:
    bias_pct: float
    cv_pct: float
    n_used: int
    n_failed: int


@dataclass(frozen=True)
class CoverageStats:
    coverage: float
    n_used: int
    n_failed: int


@dataclass(frozen=True, eq=False)
class StudyReport:
    true_density: float
    point: dict[str, EstimatorStats]
    coverage: dict[str, dict[str, CoverageStats]]  # estimator -> method -> stats
    point_rows: list[dict]
    coverage_rows: list[dict]
    runtime_seconds: float
    config: dict

    def to_dict(self) -> dict:
        return {
            "true_density": self.true_density,
            "point": {k: vars(v) for k, v in self.point.items()},
            "coverage": {
                k: {m: vars(s) for m, s in methods.items()}
                for k, methods in self.coverage.items()
            },
            "point_rows": self.point_rows,
            "coverage_rows": self.coverage_rows,
            "runtime_seconds": self.runtime_seconds,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyReport":
        return cls(
            true_density=d["true_density"],
            point={k: EstimatorStats(**v) for k, v in d["point"].items()},
            coverage={
                k: {m: CoverageStats(**s) for m, s in methods.items()}
                for k, methods in d["coverage"].items()
            },
            point_rows=d["point_rows"],
            coverage_rows=d["coverage_rows"],
            runtime_seconds=d["runtime_seconds"],
            config=d["config"],
        )


# ---------------------------------------------------------------------------
# replicate workers
# ---------------------------------------------------------------------------


def _replicate_scenario(
    scenario: Scenario, ref: DetectionReference, seed: int, rep: int
) -> Scenario:
    rng = substream(seed, rep, 7)
    r0, r1, pool_tp, pool_fp, f = draw_replicate_inputs(ref, rng)
    params = replace(scenario.params, r0=r0, r1=r1)
    return replace(
        scenario, params=params, f=f, pools_tp=pool_tp, pools_fp=pool_fp, seed=seed
    )


def _fit_estimators(data_full, data_clean, estimators, tau, f_hat_external, fit_cfg, pilots=None):
    """Fit every requested estimator; returns per-estimator rows.

    ``pilots`` optionally maps estimator names to (params, curvature)
    from a pilot replicate, used as warm starts and preconditioners.
    """
    out = {}
    fits = {}
    for est in estimators:
        if est == "canonical":
            continue
        model = _MODEL_FOR_ESTIMATOR[est]
        data = data_clean if est == "tp_free" else data_full
        init, precond = (pilots or {}).get(est) or (None, None)
        try:
            fits[est] = fit_model(
                data,
                model,
                init=init,
                tau=tau if model == "random_mixture" else None,
                config=fit_cfg,
                precondition=precond,
            )
            out[est] = {"D_c": fits[est].D_c_hat, "converged": bool(fits[est].converged)}
        except (FitError, ValueError) as exc:
            fits[est] = None
            out[est] = {"D_c": float("nan"), "converged": False, "error": str(exc)}
    if "canonical" in estimators:
        base = fits.get("tp_fp")
        if base is not None and base.converged:
            d = canonical_estimate(
                n_detected=data_full.n_calls,
                f_hat=f_hat_external,
                p_hat=base.p_hat,
                area_ha=data_full.array.region.area_ha,
                duration_hours=data_full.duration_hours,
            )
            out["canonical"] = {"D_c": d, "converged": True}
        else:
            out["canonical"] = {"D_c": float("nan"), "converged": False}
    return out, fits


_PILOT_REPLICATE = 999_983  # replicate index reserved for pilot fits


def _make_pilots(scenario, ref, estimators, seed, mask_cell_m, fit_cfg):
    """One cold fit per estimator on a reserved replicate; the resulting
    parameters and curvature seed every study replicate's fits."""
    scn = _replicate_scenario(scenario, ref, seed, _PILOT_REPLICATE)
    sim = simulate_survey(scn, replicate=_PILOT_REPLICATE)
    data_full = sim.data.with_mask(mask_cell_m)
    data_clean = true_positive_subset(sim).with_mask(mask_cell_m)
    pilots = {}
    for est in estimators:
        if est == "canonical":
            continue
        model = _MODEL_FOR_ESTIMATOR[est]
        data = data_clean if est == "tp_free" else data_full
        curve = (ref.curve.r0, ref.curve.r1)
        try:
            fit = fit_model(
                data,
                model,
                init=default_init(data, model, detection_curve=curve),
                tau=ref.tau if model == "random_mixture" else None,
                config=fit_cfg,
            )
            if fit.converged:
                pilots[est] = (fit.params_hat, fit.hess_inv_scaled)
        except (FitError, ValueError):
            pass
    return pilots


def _point_replicate(args) -> list[dict]:
    scenario, ref, estimators, seed, rep, mask_cell_m, fit_cfg, pilots = args
    scn = _replicate_scenario(scenario, ref, seed, rep)
    sim = simulate_survey(scn, replicate=rep)
    data_full = sim.data.with_mask(mask_cell_m)
    data_clean = true_positive_subset(sim).with_mask(mask_cell_m)
    rows, _ = _fit_estimators(
        data_full, data_clean, estimators, ref.tau, ref.f_hat, fit_cfg, pilots
    )
    return [
        {"replicate": rep, "estimator": est, **vals} for est, vals in rows.items()
    ]


def _coverage_replicate(args) -> list[dict]:
    (
        scenario,
        ref,
        estimators,
        seed,
        rep,
        mask_cell_m,
        boot_mask_cell_m,
        fit_cfg,
        B,
        level,
        fp_params,
        pilots,
    ) = args
    scn = _replicate_scenario(scenario, ref, seed, rep)
    sim = simulate_survey(scn, replicate=rep)
    data_full = sim.data.with_mask(mask_cell_m)
    data_clean = true_positive_subset(sim).with_mask(mask_cell_m)
    ests = [e for e in estimators if e != "canonical"]
    rows, fits = _fit_estimators(
        data_full, data_clean, ests, ref.tau, ref.f_hat, fit_cfg, pilots
    )
    out = []
    for k, est in enumerate(ests):
        fit = fits.get(est)
        row = {"replicate": rep, "estimator": est, "converged": False}
        if fit is not None and fit.converged:
            data = data_clean if est == "tp_free" else data_full
            cfg = BootConfig(
                B=B,
                seed=int(np.random.SeedSequence(entropy=seed, spawn_key=(rep, 13, k)).generate_state(1)[0]),
                level=level,
                mu_c=scenario.call_rate,
                threads=1,
                mask_cell_m=boot_mask_cell_m,
                fit=replace(fit_cfg, n_restarts=0),
            )
            try:
                boot = bootstrap(
                    data,
                    fit,
                    cfg,
                    tau=ref.tau if est == "random" else None,
                    pools_tp=ref.pools_val_tp,
                    pools_fp=ref.pools_val_fp,
                    fp_params=fp_params if est == "pseudo" else None,
                )
                if "D_c" in boot.intervals and not boot.unreliable:
                    truth = scenario.call_density
                    row["converged"] = True
                    for method in ("normal", "percentile"):
                        lo, hi = boot.intervals["D_c"][method]
                        row[f"covered_{method}"] = bool(lo <= truth <= hi)
                        row[f"lo_{method}"] = lo
                        row[f"hi_{method}"] = hi
                    row["D_c"] = fit.D_c_hat
            except (FitError, ValueError) as exc:
                row["error"] = str(exc)
        out.append(row)
    return out


def _fit_fp_reference(scenario: Scenario, ref: DetectionReference, config: StudyConfig) -> ModelParams:
    """Fit the false-positive-only model on an independent labelled
    false-positive dataset, for bootstrap generation under models that
    do not estimate those parameters."""
    fp_scn = replace(
        scenario,
        array=scenario.array.with_mask(config.mask_cell_m),
        f=0.0,
        # reuse the true-positive machinery with false-positive strength
        # parameters in the true-positive slots
        params=replace(
            scenario.params,
            beta0=scenario.params.beta0_fp,
            sigma_s=scenario.params.sigma_s_fp,
        ),
        pools_tp=ref.pools_val_fp,
        call_density=config.fp_reference_density,
        seed=scenario.seed + 90001,
    )
    sim = simulate_survey(fp_scn, replicate=0)
    fit = fit_model(sim.data, "fp_only", config=config.fit)
    if not fit.converged:
        raise FitError("false-positive reference fit did not converge")
    return fit.params_hat


def _run_pool(worker, jobs, threads: int):
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(worker, jobs, chunksize=1))
    return [worker(j) for j in jobs]


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def run_point_study(
    scenario: Scenario,
    ref: DetectionReference,
    config: StudyConfig,
) -> StudyReport:
    """Bias and CV of the point estimators over R simulated surveys."""
    if not config.estimators:
        raise ValueError("no estimators requested")
    t0 = time.time()
    pilots = _make_pilots(
        scenario, ref, config.estimators, config.seed, config.mask_cell_m, config.fit
    )
    jobs = [
        (scenario, ref, config.estimators, config.seed, rep, config.mask_cell_m, config.fit, pilots)
        for rep in range(config.R)
    ]
    rows = [r for chunk in _run_pool(_point_replicate, jobs, config.threads) for r in chunk]
    point = summarise_point(rows, scenario.call_density, config.estimators)
    return StudyReport(
        true_density=scenario.call_density,
        point=point,
        coverage={},
        point_rows=rows,
        coverage_rows=[],
        runtime_seconds=time.time() - t0,
        config={"R": config.R, "seed": config.seed, "mask_cell_m": config.mask_cell_m},
    )


def run_coverage_study(
    scenario: Scenario,
    ref: DetectionReference,
    config: StudyConfig,
) -> StudyReport:
    """Bootstrap interval coverage of the true call density."""
    ests = tuple(e for e in config.estimators if e != "canonical")
    if not ests:
        raise ValueError("no estimators requested")
    t0 = time.time()
    fp_params = _fit_fp_reference(scenario, ref, config) if "pseudo" in ests else None
    pilots = _make_pilots(scenario, ref, ests, config.seed, config.mask_cell_m, config.fit)
    jobs = [
        (
            scenario,
            ref,
            ests,
            config.seed,
            rep,
            config.mask_cell_m,
            config.boot_mask_cell_m,
            config.fit,
            config.B,
            config.level,
            fp_params,
            pilots,
        )
        for rep in range(config.R)
    ]
    rows = [r for chunk in _run_pool(_coverage_replicate, jobs, config.threads) for r in chunk]
    coverage = summarise_coverage(rows, ests)
    return StudyReport(
        true_density=scenario.call_density,
        point={},
        coverage=coverage,
        point_rows=[],
        coverage_rows=rows,
        runtime_seconds=time.time() - t0,
        config={
            "R": config.R,
            "B": config.B,
            "level": config.level,
            "seed": config.seed,
            "mask_cell_m": config.mask_cell_m,
        },
    )


def summarise_point(rows: list[dict], true_density: float, estimators) -> dict[str, EstimatorStats]:
    out = {}
    for est in estimators:
        vals = np.array(
            [r["D_c"] for r in rows if r["estimator"] == est and r["converged"]], dtype=float
        )
        vals = vals[np.isfinite(vals)]
        n_total = sum(1 for r in rows if r["estimator"] == est)
        if vals.size == 0:
            out[est] = EstimatorStats(float("nan"), float("nan"), 0, n_total)
            continue
        bias = 100.0 * (vals.mean() - true_density) / true_density
        cv = 100.0 * vals.std(ddof=1) / true_density if vals.size > 1 else 0.0
        out[est] = EstimatorStats(
            bias_pct=float(bias), cv_pct=float(cv), n_used=int(vals.size), n_failed=n_total - int(vals.size)
        )
    return out


def summarise_coverage(rows: list[dict], estimators) -> dict[str, dict[str, CoverageStats]]:
    out: dict[str, dict[str, CoverageStats]] = {}
    for est in estimators:
        est_rows = [r for r in rows if r["estimator"] == est]
        usable = [r for r in est_rows if r.get("converged")]
        methods = {}
        for method in ("normal", "percentile"):
            flags = [bool(r[f"covered_{method}"]) for r in usable if f"covered_{method}" in r]
            cov = float(np.mean(flags)) if flags else float("nan")
            methods[method] = CoverageStats(
                coverage=cov, n_used=len(flags), n_failed=len(est_rows) - len(flags)
            )
        out[est] = methods
    return out


def merge_reports(point: StudyReport, coverage: StudyReport) -> StudyReport:
    return StudyReport(
        true_density=point.true_density,
        point=point.point,
        coverage=coverage.coverage,
        point_rows=point.point_rows,
        coverage_rows=coverage.coverage_rows,
        runtime_seconds=point.runtime_seconds + coverage.runtime_seconds,
        config={**coverage.config, **point.config},
    )


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def report(study: StudyReport, out_dir, formats: tuple[str, ...] = ("csv", "json")) -> list[Path]:
    """Write the study tables; returns the paths written."""
    if not study.point and not study.coverage:
        raise ValueError("empty study report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        if study.point:
            p = out / "point_study.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["estimator", "bias_pct", "cv_pct", "n_used", "n_failed"])
                for est, s in study.point.items():
                    w.writerow(
                        [est, format(s.bias_pct, ".6g"), format(s.cv_pct, ".6g"), s.n_used, s.n_failed]
                    )
            written.append(p)
            p = out / "point_replicates.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["replicate", "estimator", "D_c", "converged"])
                for r in study.point_rows:
                    w.writerow(
                        [r["replicate"], r["estimator"], format(r["D_c"], ".12g"), int(r["converged"])]
                    )
            written.append(p)
        if study.coverage:
            p = out / "coverage.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["estimator", "method", "coverage", "n_used", "n_failed"])
                for est, methods in study.coverage.items():
                    for method, s in methods.items():
                        w.writerow([est, method, format(s.coverage, ".6g"), s.n_used, s.n_failed])
            written.append(p)
    if "json" in formats:
        p = out / "study_report.json"
        p.write_text(json.dumps(study.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(p)
    return written
