"""Acoustic spatial capture-recapture density estimation.

Estimates call density from a microphone array survey, integrating
ML-detector confidence scores into the likelihood so that false
positives are handled inside the model rather than by post-hoc
correction factors.
"""

from .boot import BootConfig, BootstrapResult, bootstrap, ci_normal, ci_percentile
from .conf import (
    PlattFit,
    ValidationSample,
    fit_confidence_dist,
    fit_platt,
    map_confidence,
    mean_confidence,
)
from .detect import (
    detect_prob_given_strength,
    expected_strength,
    g,
    mean_detection_prob,
    p_dot,
    sigmoid_normal_expectation,
    strength_pdf,
)
from .domain import (
    CallRecord,
    ConfidenceDistParams,
    DetectorArray,
    LinkTransform,
    Mask,
    ModelParams,
    Region,
    SurveyData,
    SurveyValidationError,
    distance,
    load_survey,
    save_survey,
    validate_survey,
)
from .fit import (
    DetectionCurveFit,
    FitConfig,
    FitError,
    FitResult,
    canonical_estimate,
    estimate_density,
    fit_detection_curve,
    fit_model,
)
from .lik import (
    SurveyLikelihood,
    call_marginal_loglik,
    capture_logpdf,
    location_logpdf,
    loglik_fixed_mixture,
    loglik_fp,
    loglik_pseudo,
    loglik_random_mixture,
    loglik_tp,
    strength_pdf_given_detection,
    strength_vector_logpdf,
    toa_logpdf,
)
from .sim import Scenario, SimResult, simulate_survey, substream, true_positive_subset
from .study import (
    DetectionReference,
    StudyConfig,
    StudyReport,
    SyntheticDetectionModel,
    gibbon_scenario,
    make_reference,
    run_coverage_study,
    run_point_study,
)

__version__ = "0.1.0"
