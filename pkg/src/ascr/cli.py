"""Command-line front end.

Subcommands: simulate, fit, bootstrap, calibrate, study. Exit codes:
0 success, 1 usage error, 2 validation error, 3 non-convergence,
4 assertion failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import boot as boot_mod
from . import conf as conf_mod
from . import domain, fit as fit_mod, sim as sim_mod, study as study_mod

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_ASSERTION = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_scenario(path: str, seed: int | None) -> sim_mod.Scenario:
    d = json.loads(Path(path).read_text())
    scn = sim_mod.scenario_from_dict(d)
    if seed is not None:
        scn = replace(scn, seed=seed)
    return scn


def cmd_simulate(args) -> int:
    try:
        scenario = _load_scenario(args.scenario, args.seed)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"invalid scenario: {exc}", EXIT_VALIDATION)
    result = sim_mod.simulate_survey(scenario, replicate=args.replicate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    domain.save_survey(result.data, out)
    sim_mod.write_truth_csv(result.truth, out / "truth.csv")
    n_fp = int(np.sum(result.truth.zeta == 0))
    print(f"simulated {result.data.n_calls} detected calls ({n_fp} false positives) -> {out}")
    return EXIT_OK


def _load_data(args) -> domain.SurveyData:
    try:
        return domain.load_survey(args.data, mask_cell_m=args.mask_m)
    except domain.SurveyValidationError as exc:
        raise CliError(str(exc), EXIT_VALIDATION)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load survey data: {exc}", EXIT_VALIDATION)


def _print_fit(fit: fit_mod.FitResult) -> None:
    print(f"model:      {fit.model}")
    print(f"converged:  {fit.converged} ({fit.n_evals} objective evaluations)")
    print(f"loglik:     {fit.loglik:.6f}")
    print(f"p_hat:      {fit.p_hat:.6g}")
    print(f"D_c_hat:    {fit.D_c_hat:.6g} calls/ha/hour")
    print("parameters:")
    for k, v in fit.params_hat.to_dict().items():
        if k != "tau":
            print(f"  {k:10s} {v: .6g}")


def cmd_fit(args) -> int:
    data = _load_data(args)
    tau = None
    if args.tau:
        tau, _ = conf_mod.tau_from_json(args.tau)
    if args.model == "random_mixture" and tau is None:
        raise CliError("--tau is required for the random_mixture model", EXIT_USAGE)
    try:
        fit = fit_mod.fit_model(data, args.model, tau=tau, config=fit_mod.FitConfig(seed=args.seed))
    except (fit_mod.FitError, ValueError) as exc:
        raise CliError(str(exc), EXIT_VALIDATION)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fit_mod.save_fit_json(fit, out / "fit.json")
    fit_mod.write_zeta_csv(data, fit, out / "zeta.csv")
    _print_fit(fit)
    return EXIT_OK if fit.converged else EXIT_NONCONVERGENCE


def cmd_bootstrap(args) -> int:
    data = _load_data(args)
    try:
        fit = fit_mod.load_fit_json(args.fit)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load fit: {exc}", EXIT_VALIDATION)
    if not fit.converged:
        raise CliError("refusing to bootstrap an unconverged fit", EXIT_NONCONVERGENCE)
    if fit.model in ("fixed_mixture", "random_mixture"):
        # per-call class expectations are not serialised; recompute them
        ev = __import__("ascr.lik", fromlist=["SurveyLikelihood"]).SurveyLikelihood(
            data, tau=fit.params_hat.tau
        )
        fit = replace(fit, zeta_hat=ev.zeta_expectations(fit.model, fit.params_hat))
    pools_tp, pools_fp = np.array([1.0]), np.array([])
    if args.validation:
        samples = conf_mod.read_validation_csv(args.validation)
        platt = conf_mod.fit_platt(samples)
        raw = np.array([s.raw_score for s in samples if s.detected])
        lab = np.array([s.label for s in samples if s.detected])
        cal = conf_mod.map_confidence(raw, platt.a, platt.b)
        pools_tp, pools_fp = cal[lab == 1], cal[lab == 0]
    fp_params = None
    if args.fp_data:
        fp_data = domain.load_survey(args.fp_data, mask_cell_m=args.mask_m)
        fp_fit = fit_mod.fit_model(fp_data, "fp_only", config=fit_mod.FitConfig(seed=args.seed))
        if not fp_fit.converged:
            raise CliError("false-positive reference fit did not converge", EXIT_NONCONVERGENCE)
        fp_params = fp_fit.params_hat
    tau = fit.params_hat.tau
    if args.tau:
        tau, _ = conf_mod.tau_from_json(args.tau)
    cfg = boot_mod.BootConfig(
        B=args.B, seed=args.seed, level=args.level, mu_c=args.mu_c, threads=args.threads
    )
    try:
        result = boot_mod.bootstrap(
            data, fit, cfg, tau=tau, pools_tp=pools_tp, pools_fp=pools_fp, fp_params=fp_params
        )
    except (fit_mod.FitError, ValueError) as exc:
        raise CliError(str(exc), EXIT_VALIDATION)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    boot_mod.write_bootstrap_csv(result, out / "bootstrap.csv")
    boot_mod.write_intervals_json(result, out / "intervals.json")
    if "D_c" in result.intervals:
        for method, (lo, hi) in result.intervals["D_c"].items():
            print(f"D_c {method:10s} [{lo:.6g}, {hi:.6g}]")
    print(f"failed replicates: {result.n_failed}/{result.B} (unreliable: {result.unreliable})")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    try:
        samples = conf_mod.read_validation_csv(args.validation)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot read validation data: {exc}", EXIT_VALIDATION)
    if not samples:
        raise CliError("validation file is empty", EXIT_VALIDATION)
    try:
        platt = conf_mod.fit_platt(samples)
        tau = conf_mod.fit_confidence_dist(samples, args.family, platt=platt)
    except (ValueError, RuntimeError) as exc:
        raise CliError(str(exc), EXIT_VALIDATION)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tau.json").write_text(conf_mod.tau_to_json(tau, platt))
    _write_calibration_report(samples, platt, out / "calibration_report.csv")
    print(f"platt: a={platt.a:.6g} b={platt.b:.6g}")
    print(f"tau ({tau.family}): fp={tau.tau0} tp={tau.tau1}")
    return EXIT_OK


def _write_calibration_report(samples, platt, path, n_bins: int = 10) -> None:
    """Binned comparison of calibrated confidence vs. empirical
    true-positive proportion."""
    import csv as _csv

    det = [s for s in samples if s.detected]
    raw = np.array([s.raw_score for s in det])
    lab = np.array([s.label for s in det], dtype=float)
    cal = conf_mod.map_confidence(raw, platt.a, platt.b)
    edges = np.quantile(raw, np.linspace(0, 1, n_bins + 1))
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["raw_lo", "raw_hi", "n", "empirical_tp_rate", "mean_calibrated"])
        for i in range(n_bins):
            m = (raw >= edges[i]) & (raw <= edges[i + 1] if i == n_bins - 1 else raw < edges[i + 1])
            if not m.any():
                continue
            w.writerow(
                [
                    format(edges[i], ".6g"),
                    format(edges[i + 1], ".6g"),
                    int(m.sum()),
                    format(float(lab[m].mean()), ".6g"),
                    format(float(cal[m].mean()), ".6g"),
                ]
            )


_ASSERT_BANDS = {
    # estimator -> (|bias| bound or (lo, hi) band, in percent)
    "tp_free": ("abs", 3.0),
    "tp_fp": ("range", (10.0, 25.0)),
    "fixed": ("abs", 6.0),
    "random": ("abs", 6.0),
    "pseudo": ("abs", 6.0),
}


def cmd_study(args) -> int:
    try:
        cfg_d = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read study config: {exc}", EXIT_VALIDATION)
    preset = cfg_d.get("preset", "gibbon")
    if preset != "gibbon":
        raise CliError(f"unknown preset {preset!r}", EXIT_USAGE)
    estimators = tuple(cfg_d.get("estimators", study_mod.ESTIMATORS))
    bad = [e for e in estimators if e not in study_mod.ESTIMATORS]
    if bad:
        raise CliError(f"unknown estimators: {bad}", EXIT_USAGE)
    scenario, detmodel = study_mod.gibbon_scenario(
        f=cfg_d.get("false_positive_fraction", 0.15), seed=cfg_d.get("seed", 0)
    )
    ref = study_mod.make_reference(detmodel, seed=cfg_d.get("seed", 0))
    config = study_mod.StudyConfig(
        R=int(cfg_d.get("R", 200)),
        B=int(cfg_d.get("B", 100)),
        level=float(cfg_d.get("level", 0.95)),
        seed=int(cfg_d.get("seed", 0)),
        threads=args.threads,
        estimators=estimators,
        mask_cell_m=float(cfg_d.get("mask_cell_m", 100.0)),
    )
    parts = []
    if cfg_d.get("point", True):
        parts.append(study_mod.run_point_study(scenario, ref, config))
    if cfg_d.get("coverage", False):
        parts.append(study_mod.run_coverage_study(scenario, ref, config))
    if not parts:
        raise CliError("study config enables neither point nor coverage", EXIT_USAGE)
    rep = parts[0] if len(parts) == 1 else study_mod.merge_reports(parts[0], parts[1])
    study_mod.report(rep, args.out)
    failures = []
    for est, stats in rep.point.items():
        print(f"{est:10s} bias {stats.bias_pct:+7.2f}%  cv {stats.cv_pct:6.2f}%  n {stats.n_used}")
        if args.check and est in _ASSERT_BANDS:
            kind, bound = _ASSERT_BANDS[est]
            ok = abs(stats.bias_pct) < bound if kind == "abs" else bound[0] <= stats.bias_pct <= bound[1]
            if not ok:
                failures.append(f"{est} bias {stats.bias_pct:.2f}% outside target")
    for est, methods in rep.coverage.items():
        for method, s in methods.items():
            print(f"{est:10s} {method:10s} coverage {s.coverage:.3f}  n {s.n_used}")
    if failures:
        print("ASSERTION FAILURES:\n  " + "\n  ".join(failures))
        return EXIT_ASSERTION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ascr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a survey from a scenario file")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--replicate", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit a model to survey data")
    s.add_argument("--data", required=True, help="directory with detectors.csv, calls.csv, survey.json")
    s.add_argument("--model", required=True, choices=[m for m in domain.MODELS if m != "fp_only"])
    s.add_argument("--tau", default=None, help="tau.json for the random_mixture model")
    s.add_argument("--mask-m", type=float, default=None, dest="mask_m")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("bootstrap", help="parametric bootstrap of a fitted model")
    s.add_argument("--data", required=True)
    s.add_argument("--fit", required=True, help="fit.json from the fit command")
    s.add_argument("--B", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--level", type=float, default=0.95)
    s.add_argument("--mu-c", type=float, required=True, dest="mu_c", help="calls/hour per animal")
    s.add_argument("--validation", default=None, help="validation.csv for confidence pools")
    s.add_argument("--tau", default=None)
    s.add_argument("--fp-data", default=None, dest="fp_data", help="labelled false-positive survey directory (pseudo model)")
    s.add_argument("--mask-m", type=float, default=None, dest="mask_m")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("calibrate", help="fit confidence calibration and class distributions")
    s.add_argument("--validation", required=True)
    s.add_argument("--family", default="beta", choices=["beta", "gamma"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("study", help="run the simulation study")
    s.add_argument("--config", required=True, help="study.json")
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--check", action="store_true", help="exit 4 if bias targets are missed")
    s.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
