"""Confidence-score handling: calibration, averaging, and class models.

Raw ML scores live in (0, inf). A logistic map with coefficients fitted
on labelled validation data (Platt scaling) turns them into calibrated
confidences in (0, 1). Class-conditional confidence distributions are
Beta for calibrated values and Gamma for raw scores; their parameters
are estimated on validation data and held fixed during survey fitting.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import digamma, expit, polygamma

from .domain import CallRecord, ConfidenceDistParams
from .glm import SeparationError, logistic_deviance, logistic_mle

# Beta densities can be infinite at the endpoints; clamping keeps the
# likelihood finite at the cost of negligible distortion
BETA_CLAMP = 1e-6


@dataclass(frozen=True)
class ValidationSample:
    """One labelled detection-pipeline outcome from a validation set."""

    raw_score: float
    label: int  # 1 true positive, 0 false positive
    detected: bool = True

    def __post_init__(self):
        if self.raw_score <= 0:
            raise ValueError("raw_score must be positive")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


@dataclass(frozen=True)
class PlattFit:
    """Calibration coefficients: confidence = logistic(a * raw + b)."""

    a: float
    b: float


def map_confidence(raw, a: float, b: float):
    """Map raw scores onto (0, 1) with the calibrated logistic."""
    out = expit(a * np.asarray(raw, dtype=float) + b)
    if out.ndim == 0:
        return float(out)
    return out


def fit_platt(samples: list[ValidationSample]) -> PlattFit:
    """Logistic-regression calibration of raw scores against labels.

    Uses detected samples only (raw scores exist only for detections).
    Raises on single-label input or perfect separation.
    """
    det = [s for s in samples if s.detected]
    x = np.array([s.raw_score for s in det])
    y = np.array([s.label for s in det])
    if x.size == 0 or len(set(y.tolist())) < 2:
        raise ValueError("calibration requires detected samples of both labels")
    coef, _ = logistic_mle(x, y)
    # sanity: the fit can never beat the saturated model but must not be
    # worse than intercept-only
    null = logistic_deviance(x, y, np.array([float(np.log(y.mean() / (1 - y.mean()))), 0.0]))
    dev = logistic_deviance(x, y, coef)
    if dev > null + 1e-8:
        raise RuntimeError("calibration fit worse than intercept-only model")
    return PlattFit(a=float(coef[1]), b=float(coef[0]))


def mean_confidence(call: CallRecord) -> float:
    """Average confidence across the microphones that detected the call."""
    if call.J < 1:
        raise ValueError("call has no detections")
    return float(np.mean(call.rho))


# ---------------------------------------------------------------------------
# class-conditional confidence distributions
# ---------------------------------------------------------------------------


def _beta_mle(x: np.ndarray, max_iter: int = 200) -> tuple[float, float]:
    """Beta MLE via Newton iterations on the log-scale parameters."""
    x = np.clip(np.asarray(x, dtype=float), BETA_CLAMP, 1.0 - BETA_CLAMP)
    mlx = float(np.mean(np.log(x)))
    ml1x = float(np.mean(np.log1p(-x)))
    # method-of-moments start
    m, v = float(np.mean(x)), float(np.var(x))
    v = max(v, 1e-12)
    common = m * (1 - m) / v - 1.0
    a = max(m * common, 1e-3)
    b = max((1 - m) * common, 1e-3)
    u = np.log([a, b])
    for _ in range(max_iter):
        a, b = np.exp(u)
        da = digamma(a + b) - digamma(a) + mlx
        db = digamma(a + b) - digamma(b) + ml1x
        grad = np.array([da * a, db * b])  # chain rule for log-scale
        tri_ab = polygamma(1, a + b)
        h11 = (tri_ab - polygamma(1, a)) * a * a + da * a
        h22 = (tri_ab - polygamma(1, b)) * b * b + db * b
        h12 = tri_ab * a * b
        hess = np.array([[h11, h12], [h12, h22]])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad * 0.1
        if not np.all(np.isfinite(step)):
            step = grad * 0.1
        step = np.clip(step, -2.0, 2.0)
        u = u - step
        if np.max(np.abs(step)) < 1e-12:
            break
    a, b = np.exp(u)
    return float(a), float(b)


def _gamma_mle(x: np.ndarray, max_iter: int = 200) -> tuple[float, float]:
    """Gamma (shape, rate) MLE; shape solves the digamma equation."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("gamma samples must be positive")
    mx = float(np.mean(x))
    s = float(np.log(mx) - np.mean(np.log(x)))
    if s <= 0:
        raise ValueError("degenerate sample for gamma fit")
    k = (3.0 - s + np.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    for _ in range(max_iter):
        f = np.log(k) - digamma(k) - s
        fp = 1.0 / k - polygamma(1, k)
        step = f / fp
        k_new = k - step
        if k_new <= 0:
            k_new = k / 2.0
        if abs(k_new - k) < 1e-13 * k:
            k = k_new
            break
        k = k_new
    return float(k), float(k / mx)


def fit_confidence_dist(
    samples: list[ValidationSample],
    family: str,
    platt: PlattFit | None = None,
    min_per_label: int = 10,
) -> ConfidenceDistParams:
    """Per-label ML fits of the confidence distribution.

    Beta is fitted to calibrated confidences (calibrating internally
    when no ``platt`` coefficients are supplied), Gamma to raw scores.
    """
    if family not in ("beta", "gamma"):
        raise ValueError(f"unknown family {family!r}")
    det = [s for s in samples if s.detected]
    by_label = {lab: np.array([s.raw_score for s in det if s.label == lab]) for lab in (0, 1)}
    for lab, arr in by_label.items():
        if arr.size < min_per_label:
            raise ValueError(f"need at least {min_per_label} detected samples with label {lab}")
        if np.var(arr) == 0:
            raise ValueError(f"degenerate (constant) scores for label {lab}")
    if family == "beta":
        if platt is None:
            platt = fit_platt(det)
        vals = {lab: map_confidence(arr, platt.a, platt.b) for lab, arr in by_label.items()}
        tau0 = _beta_mle(vals[0])
        tau1 = _beta_mle(vals[1])
    else:
        tau0 = _gamma_mle(by_label[0])
        tau1 = _gamma_mle(by_label[1])
    return ConfidenceDistParams(family=family, tau0=tau0, tau1=tau1)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def read_validation_csv(path) -> list[ValidationSample]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                ValidationSample(
                    raw_score=float(row["raw_score"]),
                    label=int(row["label"]),
                    detected=row.get("detected", "1") in ("1", "True", "true"),
                )
            )
    return out


def write_validation_csv(samples: list[ValidationSample], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["raw_score", "label", "detected"])
        for s in samples:
            w.writerow([format(s.raw_score, ".12g"), s.label, int(s.detected)])


def tau_to_json(tau: ConfidenceDistParams, platt: PlattFit | None = None) -> str:
    d = {"family": tau.family, "tau0": list(tau.tau0), "tau1": list(tau.tau1)}
    if platt is not None:
        d["platt"] = {"a": platt.a, "b": platt.b}
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def tau_from_json(path) -> tuple[ConfidenceDistParams, PlattFit | None]:
    d = json.loads(Path(path).read_text())
    tau = ConfidenceDistParams(family=d["family"], tau0=tuple(d["tau0"]), tau1=tuple(d["tau1"]))
    platt = None
    if "platt" in d:
        platt = PlattFit(a=float(d["platt"]["a"]), b=float(d["platt"]["b"]))
    return tau, platt
