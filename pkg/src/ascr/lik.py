"""Per-call component densities and the four survey log-likelihoods.

Each detected call contributes a marginal density obtained by
integrating, over the mask, the product of four conditional densities:
received strengths given detection, arrival times, the capture history,
and the latent source location. The class-conditional marginals feed a
true-positive-only likelihood, a false-positive-only likelihood, two
mixture likelihoods (weights from ML confidences, either fixed or
modelled as random draws), and a confidence-powered pseudo-likelihood.

``SurveyLikelihood`` is the vectorised evaluator used for fitting: it
precomputes every parameter-independent quantity (distances, arrival
-time residual sums, confidence-density terms) once per dataset. The
module-level functions implement the same densities call-by-call in a
direct form; tests cross-check the two paths.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .conf import mean_confidence
from .detect import expected_strength, g as detect_g, p_dot as detect_p_dot
from .domain import (
    CallRecord,
    ConfidenceDistParams,
    DetectorArray,
    ModelParams,
    SurveyData,
    distances_to_detectors,
)
from .detect import SIGMOID_NORMAL_LAMBDA

# floor applied to per-cell log contributions; exp(-745) is the smallest
# normal double, so the mask sum stays finite without affecting values
LOG_FLOOR = -745.0

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# direct per-call densities
# ---------------------------------------------------------------------------


def strength_pdf_given_detection(y, d, zeta: int, params: ModelParams):
    """Density of received strength conditional on detection.

    Bayes form: detection-given-strength times the strength density,
    normalised by the distance-dependent detection probability.
    """
    b0, sigma = params.strength_params(zeta)
    y = np.asarray(y, dtype=float)
    mu = expected_strength(d, b0, params.beta1)
    num = expit(params.r0 + params.r1 * y) * np.exp(
        -0.5 * ((y - mu) / sigma) ** 2
    ) / (sigma * math.sqrt(2.0 * math.pi))
    den = detect_g(d, zeta, params)
    out = num / np.maximum(den, np.exp(LOG_FLOOR))
    if out.ndim == 0:
        return float(out)
    return out


def strength_vector_logpdf(call: CallRecord, x, zeta: int, params: ModelParams, array: DetectorArray) -> float:
    """Log density of all recorded strengths for one call at location x.

    Undetected microphones contribute a factor of one.
    """
    if call.J == 0:
        return 0.0
    d = np.array([float(np.hypot(*(np.asarray(x) - array.coords[m]))) for m in call.det_idx])
    vals = strength_pdf_given_detection(call.y, d, zeta, params)
    return float(np.sum(np.log(vals)))


def toa_logpdf(call: CallRecord, x, params: ModelParams, data: SurveyData) -> float:
    """Log density of the arrival times for one call at location x.

    Only arrival-time differences are informative; a single detection
    carries no information and contributes log(1) = 0.
    """
    J = call.J
    if J <= 1:
        return 0.0
    d = np.array([float(np.hypot(*(np.asarray(x) - data.array.coords[m]))) for m in call.det_idx])
    delta = call.z - d / data.speed_of_sound
    ss = float(np.sum((delta - delta.mean()) ** 2))
    sig = params.sigma_t
    return (
        0.5 * (1 - J) * (LOG_2PI + 2.0 * math.log(sig))
        - math.log(data.duration_seconds)
        - 0.5 * math.log(J)
        - ss / (2.0 * sig**2)
    )


def capture_logpdf(call: CallRecord, x, zeta: int, params: ModelParams, array: DetectorArray) -> float:
    """Log pmf of the capture history at x, conditional on detection."""
    d = distances_to_detectors(np.asarray(x, dtype=float), array)[0]
    gs = np.asarray(detect_g(d, zeta, params))
    omega = call.omega
    logp = np.where(omega, np.log(np.maximum(gs, np.exp(LOG_FLOOR))), np.log1p(-gs)).sum()
    pd = detect_p_dot(np.asarray(x, dtype=float), zeta, params, array)
    return float(logp - math.log(max(pd, np.exp(LOG_FLOOR))))


def location_logpdf(x, zeta: int, params: ModelParams, array: DetectorArray) -> float:
    """Log density of a detected source location over the mask.

    Base intensity is uniform for both classes; filtering by detection
    makes the density proportional to the at-least-one-microphone
    detection probability, normalised by its mask integral.
    """
    pd = detect_p_dot(np.asarray(x, dtype=float), zeta, params, array)
    pd_mask = detect_p_dot(array.mask.centres, zeta, params, array)
    norm = float(np.sum(pd_mask)) * array.mask.cell_area_m2
    return float(math.log(max(pd, np.exp(LOG_FLOOR))) - math.log(norm))


def call_marginal_loglik(
    call: CallRecord, zeta: int, params: ModelParams, data: SurveyData
) -> float:
    """Log marginal density of one call, integrating the latent location
    over the mask with log-sum-exp stabilisation.

    Direct composition of the four component densities; the vectorised
    evaluator computes the same quantity for all calls at once.
    """
    array = data.array
    cells = array.mask.centres
    n = cells.shape[0]
    vals = np.empty(n)
    for i in range(n):
        x = cells[i]
        vals[i] = (
            strength_vector_logpdf(call, x, zeta, params, array)
            + toa_logpdf(call, x, params, data)
            + capture_logpdf(call, x, zeta, params, array)
            + location_logpdf(x, zeta, params, array)
        )
    return _logsumexp(vals) + math.log(array.mask.cell_area_m2)


def _logsumexp(v: np.ndarray) -> float:
    vmax = np.max(v)
    if not np.isfinite(vmax):
        return -np.inf
    v = np.maximum(v, LOG_FLOOR)
    return float(vmax + np.log(np.sum(np.exp(v - vmax))))


# ---------------------------------------------------------------------------
# vectorised evaluator
# ---------------------------------------------------------------------------


class SurveyLikelihood:
    """Vectorised log-likelihood evaluator for one dataset.

    All parameter-independent structure is precomputed at construction:
    mask-to-detector distance terms, per-detection gather matrices for
    the strength density, arrival-time residual sums (which do not
    depend on any parameter), and, when ``tau`` is given, the
    per-call confidence-density terms of the random-confidence model.
    """

    def __init__(self, data: SurveyData, tau: ConfidenceDistParams | None = None):
        self.data = data
        array = data.array
        self.n_calls = data.n_calls
        self.cell_area = array.mask.cell_area_m2
        self.log_cell_area = math.log(self.cell_area)
        self.t_seconds = data.duration_seconds

        dist = distances_to_detectors(array.mask.centres, array)  # (n_cells, M)
        safe = np.maximum(dist.T, 1.0)  # (M, n_cells) orientation throughout
        n_cells = safe.shape[1]
        self.n_cells = n_cells
        self._a20 = 20.0 * np.log10(safe)  # spreading loss per (mic, cell)
        self._dm1 = safe - 1.0  # linear-decay lever arm

        # capture-history matrix, strength sums, and per-detection strength
        # values grouped by call; the detected-strength quadratic form is
        # expanded so that everything with cell dependence collapses into
        # one matmul of per-call factors against per-cell rows
        m = array.n_detectors
        omega_t = np.zeros((self.n_calls, m))
        y_omega_t = np.zeros((self.n_calls, m))
        pair_y, starts = [], []
        for j, call in enumerate(data.calls):
            omega_t[j, call.det_idx] = 1.0
            y_omega_t[j, call.det_idx] = call.y
            starts.append(len(pair_y))
            pair_y.extend(call.y.tolist())
        self._omega_t = omega_t  # (N, M)
        self._y_omega_t = y_omega_t
        self._pair_y = np.asarray(pair_y, dtype=float)
        self._pair_starts = np.asarray(starts, dtype=np.intp)
        self._J = omega_t.sum(axis=1)
        self._sy = y_omega_t.sum(axis=1)  # sum of detected strengths per call
        self._sy2 = (y_omega_t**2).sum(axis=1)

        # block layout of the fused matmul: rows [0, M) hold the
        # undetected-mic/quadratic factor, [M, 2M) the propagation loss,
        # row 2M the all-mic miss sum, row 2M+1 the per-call constant
        self._right = np.empty((2 * m + 2, n_cells))
        self._right[2 * m + 1] = 1.0
        self._left = np.empty((self.n_calls, 2 * m + 2))
        self._left[:, :m] = omega_t
        self._left[:, 2 * m] = -1.0
        self._t_buf = np.empty((m, n_cells))
        self._scratch = np.empty((self.n_calls, n_cells))

        # arrival-time residual sums per multi-detection call; these are
        # parameter-free, so sigma_t only rescales them at evaluation
        multi_rows, multi_idx, multi_j = [], [], []
        v = data.speed_of_sound
        for j, call in enumerate(data.calls):
            if call.J < 2:
                continue
            delta = call.z[None, :] - dist[:, call.det_idx] / v  # (n_cells, J)
            s1 = delta.sum(axis=1)
            s2 = (delta**2).sum(axis=1)
            multi_rows.append(s2 - s1**2 / call.J)
            multi_idx.append(j)
            multi_j.append(call.J)
        self._toa_ss = np.asarray(multi_rows) if multi_rows else np.zeros((0, dist.shape[0]))
        self._toa_idx = np.asarray(multi_idx, dtype=np.intp)
        self._toa_j = np.asarray(multi_j, dtype=float)

        self.rho_bar = np.array([mean_confidence(c) for c in data.calls]) if self.n_calls else np.zeros(0)

        self.tau = tau
        self._conf_terms = self._confidence_terms(tau) if tau is not None else None

        # spatial cores are cached on the exact parameter values they
        # depend on; finite-difference gradients then recompute only the
        # classes a perturbed coordinate actually touches, and sigma_t
        # perturbations reuse both cores (the arrival-time factor only
        # re-weights the handful of multi-detection calls)
        self._core_cache: dict[tuple, tuple[np.ndarray, float, np.ndarray]] = {}
        self._core_cache_cap = 8
        self.n_core_evals = 0

    # -- confidence terms (random-confidence model) ------------------------

    def _confidence_terms(self, tau: ConfidenceDistParams) -> tuple[np.ndarray, np.ndarray]:
        c0 = np.zeros(self.n_calls)
        c1 = np.zeros(self.n_calls)
        for j, call in enumerate(self.data.calls):
            c0[j] = float(np.sum(tau.logpdf(call.rho, 0)))
            c1[j] = float(np.sum(tau.logpdf(call.rho, 1)))
        return c0, c1

    # -- core spatial computation ------------------------------------------

    def _class_params(self, params: ModelParams, zeta: int) -> tuple[float, float]:
        b0, sigma = params.strength_params(zeta)
        if b0 is None or sigma is None:
            raise ValueError(f"missing strength parameters for class {zeta}")
        return float(b0), float(sigma)

    def _spatial_core(self, params: ModelParams, zeta: int) -> tuple[np.ndarray, float]:
        """Per-call, per-cell log contributions without the arrival-time
        factor, plus the log of the mask integral of the detection
        probability (the location normaliser).

        The detection-probability factor of each detected strength
        cancels against the capture history's detection factor, so a
        detected microphone contributes the raw strength density times
        the strength-conditional detection probability. Writing the
        total propagation loss as w(cell, mic), the detected-strength
        residual is (y - b0) + w, and expanding its square turns the sum
        over detections into matmuls against per-call strength sums.
        """
        b0, sigma = self._class_params(params, zeta)
        r0, r1, beta1 = params.r0, params.r1, params.beta1
        den = math.sqrt(1.0 + SIGMOID_NORMAL_LAMBDA * (r1 * sigma) ** 2)
        inv_var = 1.0 / (sigma * sigma)
        m = self._a20.shape[0]
        right, left, t = self._right, self._left, self._t_buf

        w = right[m : 2 * m]  # propagation loss in its matmul slot
        np.multiply(self._dm1, beta1, out=w)
        w += self._a20
        # softplus(t) = -log(1 - g) with t the moderated logistic argument
        np.multiply(w, -r1 / den, out=t)
        t += (r1 * b0 + r0) / den
        sp = np.log1p(np.exp(-np.abs(t)))
        sp += np.maximum(t, 0.0)
        sp.sum(axis=0, out=right[2 * m])  # all-mic miss sum per cell
        pdot = -np.expm1(-right[2 * m])
        log_norm = math.log(float(pdot.sum()) * self.cell_area)

        # undetected-mic part plus the quadratic (in w) piece of the
        # detected-strength densities
        np.multiply(w, w, out=right[:m])
        right[:m] *= -0.5 * inv_var
        right[:m] += sp

        # per-call factors: linear piece of the squared residuals, then
        # detection-given-strength terms, Normal normalisers, and the
        # w-free residual part as the constant column
        np.multiply(self._omega_t, -b0, out=left[:, m : 2 * m])
        left[:, m : 2 * m] += self._y_omega_t
        left[:, m : 2 * m] *= -inv_var
        lc = -np.logaddexp(0.0, -(r0 + r1 * self._pair_y))
        sum_lc = np.add.reduceat(lc, self._pair_starts) if lc.size else np.zeros(0)
        sum_c2 = self._sy2 - 2.0 * b0 * self._sy + b0 * b0 * self._J
        left[:, 2 * m + 1] = (
            sum_lc - self._J * (math.log(sigma) + 0.5 * LOG_2PI) - 0.5 * inv_var * sum_c2
        )
        v = left @ right  # (N, n_cells), fresh array kept by the core cache
        return v, log_norm

    def _core(self, params: ModelParams, zeta: int) -> dict:
        """Cached spatial core: per-call/per-cell log contributions, the
        location normaliser, the arrival-time-free log-sum over cells,
        and marginals already computed for particular sigma_t values."""
        b0, sigma = self._class_params(params, zeta)
        key = (zeta, b0, sigma, float(params.beta1), float(params.r0), float(params.r1))
        hit = self._core_cache.get(key)
        if hit is not None:
            return hit
        v, log_norm = self._spatial_core(params, zeta)
        vmax = v.max(axis=1)
        finite = np.isfinite(vmax)
        base = np.full(self.n_calls, -np.inf)
        if finite.any():
            shift = np.where(finite, vmax, 0.0)
            np.subtract(v, shift[:, None], out=self._scratch)
            np.exp(self._scratch, out=self._scratch)
            base = np.where(finite, vmax + np.log(self._scratch.sum(axis=1)), -np.inf)
        entry = {"v": v, "log_norm": log_norm, "base": base, "marginals": {}}
        if len(self._core_cache) >= self._core_cache_cap:
            self._core_cache.pop(next(iter(self._core_cache)))
        self._core_cache[key] = entry
        self.n_core_evals += 1
        return entry

    def call_marginals(self, params: ModelParams, zeta: int) -> np.ndarray:
        """Log marginal density of every call for the given class.

        Cells more than 745 nats below a call's peak underflow to zero
        in the stabilised sum, which floors their contribution exactly
        as exponentiating floored log values would.
        """
        params.require(("beta1", "sigma_t", "r0", "r1"))
        core = self._core(params, zeta)
        sig = float(params.sigma_t)
        cached = core["marginals"].get(sig)
        if cached is not None:
            return cached.copy()
        out = core["base"].copy()
        if self._toa_idx.size:
            const = (
                0.5 * (1.0 - self._toa_j) * (LOG_2PI + 2.0 * math.log(sig))
                - math.log(self.t_seconds)
                - 0.5 * np.log(self._toa_j)
            )
            vm = core["v"][self._toa_idx] + (const[:, None] - self._toa_ss / (2.0 * sig**2))
            vmax = vm.max(axis=1)
            good = np.isfinite(vmax)
            lse = np.full(vm.shape[0], -np.inf)
            if good.any():
                shift = np.where(good, vmax, 0.0)
                lse = np.where(
                    good, vmax + np.log(np.exp(vm - shift[:, None]).sum(axis=1)), -np.inf
                )
            out[self._toa_idx] = lse
        out += self.log_cell_area - core["log_norm"]
        if len(core["marginals"]) < 8:
            core["marginals"][sig] = out.copy()
        return out

    def detection_prob_mean(self, params: ModelParams, zeta: int = 1) -> float:
        """Mask-averaged probability of detection by at least one microphone."""
        b0, sigma = self._class_params(params, zeta)
        den = math.sqrt(1.0 + SIGMOID_NORMAL_LAMBDA * (params.r1 * sigma) ** 2)
        mu = b0 - self._a20 - params.beta1 * self._dm1  # (M, n_cells)
        t = (params.r1 * mu + params.r0) / den
        pdot = -np.expm1(-np.logaddexp(0.0, t).sum(axis=0))
        return float(pdot.mean())

    # -- log-likelihoods ----------------------------------------------------

    def loglik_tp(self, params: ModelParams) -> float:
        """True-positive-only conditional likelihood (no false positives)."""
        return float(self.call_marginals(params, 1).sum())

    def loglik_fp(self, params: ModelParams) -> float:
        """Same structure conditioned on every call being a false positive."""
        return float(self.call_marginals(params, 0).sum())

    def _mixture_terms(
        self, params: ModelParams, with_conf: bool
    ) -> tuple[np.ndarray, np.ndarray]:
        m1 = self.call_marginals(params, 1)
        m0 = self.call_marginals(params, 0)
        if with_conf:
            if self._conf_terms is None:
                raise ValueError("random-confidence likelihood requires tau")
            c0, c1 = self._conf_terms
            m1 = m1 + c1
            m0 = m0 + c0
        return m1, m0

    def loglik_fixed(self, params: ModelParams) -> float:
        """Mixture likelihood with per-call confidence means as fixed weights."""
        m1, m0 = self._mixture_terms(params, with_conf=False)
        a, b = _mixture_branches(self.rho_bar, m1, m0)
        return float(np.logaddexp(a, b).sum())

    def loglik_random(self, params: ModelParams) -> float:
        """Mixture likelihood with confidences modelled as class-conditional
        random draws and an estimated mixing weight."""
        if params.pi is None:
            raise ValueError("random-confidence likelihood requires pi")
        m1, m0 = self._mixture_terms(params, with_conf=True)
        w = np.full(self.n_calls, float(params.pi))
        a, b = _mixture_branches(w, m1, m0)
        return float(np.logaddexp(a, b).sum())

    def loglik_pseudo(self, params: ModelParams) -> float:
        """Confidence-powered pseudo-likelihood (true-positive structure)."""
        return float((self.rho_bar * self.call_marginals(params, 1)).sum())

    def loglik(self, model: str, params: ModelParams) -> float:
        fn = {
            "tp_only": self.loglik_tp,
            "fp_only": self.loglik_fp,
            "fixed_mixture": self.loglik_fixed,
            "random_mixture": self.loglik_random,
            "pseudo": self.loglik_pseudo,
        }[model]
        return fn(params)

    # -- posterior class probabilities ---------------------------------------

    def zeta_expectations(self, model: str, params: ModelParams) -> np.ndarray:
        """Posterior probability that each call is a true positive."""
        if model == "fixed_mixture":
            m1, m0 = self._mixture_terms(params, with_conf=False)
            a, b = _mixture_branches(self.rho_bar, m1, m0)
        elif model == "random_mixture":
            if params.pi is None:
                raise ValueError("random-confidence model requires pi")
            m1, m0 = self._mixture_terms(params, with_conf=True)
            a, b = _mixture_branches(np.full(self.n_calls, float(params.pi)), m1, m0)
        else:
            raise ValueError(f"model {model!r} has no latent class indicator")
        return np.exp(a - np.logaddexp(a, b))


def _mixture_branches(w: np.ndarray, m1: np.ndarray, m0: np.ndarray):
    """Log of the weighted branch terms, exact at w = 0 and w = 1."""
    with np.errstate(divide="ignore"):
        a = np.where(w > 0.0, np.log(np.maximum(w, 1e-300)) + m1, -np.inf)
        b = np.where(w < 1.0, np.log1p(-np.minimum(w, 1.0)) + m0, -np.inf)
    return a, b


# ---------------------------------------------------------------------------
# module-level likelihood wrappers
# ---------------------------------------------------------------------------


def loglik_tp(data: SurveyData, params: ModelParams) -> float:
    return SurveyLikelihood(data).loglik_tp(params) if data.n_calls else 0.0


def loglik_fp(data: SurveyData, params: ModelParams) -> float:
    return SurveyLikelihood(data).loglik_fp(params) if data.n_calls else 0.0


def loglik_fixed_mixture(data: SurveyData, params: ModelParams) -> float:
    return SurveyLikelihood(data).loglik_fixed(params) if data.n_calls else 0.0


def loglik_random_mixture(
    data: SurveyData, params: ModelParams, tau: ConfidenceDistParams | None = None
) -> float:
    if data.n_calls == 0:
        return 0.0
    return SurveyLikelihood(data, tau=tau or params.tau).loglik_random(params)


def loglik_pseudo(data: SurveyData, params: ModelParams) -> float:
    return SurveyLikelihood(data).loglik_pseudo(params) if data.n_calls else 0.0
