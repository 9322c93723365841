"""Generative survey simulator.

True-positive calls come from uniformly placed animals calling at a
fixed rate; detection is rejection-sampled per microphone by drawing a
latent received strength and then a Bernoulli detection given that
strength, so the marginal per-microphone detection frequency equals the
distance-dependent detection function by construction. False positives
are uniformly placed sources with their own strength distribution,
generated until a target number of them is detected.

Class labels and source locations are kept in a sidecar truth table,
never inside the survey data itself.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .detect import expected_strength
from .domain import (
    CallRecord,
    DetectorArray,
    ModelParams,
    SurveyData,
    distances_to_detectors,
)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (seed, path) pair.

    Streams are independent across paths and reproducible without
    generating any other stream first.
    """
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    )


@dataclass(frozen=True, eq=False)
class Scenario:
    """Everything needed to simulate one survey."""

    array: DetectorArray
    call_density: float  # calls per hectare per hour
    call_rate: float  # calls per hour per animal
    duration_hours: float
    params: ModelParams  # generating parameters, including fp fields when f > 0
    f: float = 0.0  # expected false-positive fraction among detections
    pools_tp: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    pools_fp: np.ndarray = field(default_factory=lambda: np.array([]))
    speed_of_sound: float = 343.0
    seed: int = 0

    def __post_init__(self):
        if self.call_density <= 0 or self.call_rate <= 0:
            raise ValueError("call density and call rate must be positive")
        if not 0.0 <= self.f < 1.0:
            raise ValueError("false-positive fraction must be in [0, 1)")

    @property
    def animal_density(self) -> float:
        """Animals per hectare implied by call density and call rate."""
        return self.call_density / self.call_rate

    @property
    def calls_per_animal(self) -> int:
        return int(round(self.call_rate * self.duration_hours))


@dataclass(frozen=True, eq=False)
class SimTruth:
    """Sidecar table mapping call ids to class labels and source locations."""

    call_ids: tuple[str, ...]
    zeta: np.ndarray
    xy: np.ndarray

    def tp_ids(self) -> list[str]:
        return [c for c, z in zip(self.call_ids, self.zeta) if z == 1]


@dataclass(frozen=True, eq=False)
class SimResult:
    data: SurveyData
    truth: SimTruth


def simulate_animals(scenario: Scenario, rng: np.random.Generator) -> np.ndarray:
    """Homogeneous-Poisson animal locations, uniform over the region."""
    region = scenario.array.region
    n = rng.poisson(scenario.animal_density * region.area_ha)
    xs = rng.uniform(region.x0, region.x1, size=n)
    ys = rng.uniform(region.y0, region.y1, size=n)
    return np.column_stack([xs, ys])


def simulate_calls(animals: np.ndarray, scenario: Scenario) -> np.ndarray:
    """Each animal emits its calls from its own location."""
    k = scenario.calls_per_animal
    if animals.size == 0 or k == 0:
        return np.zeros((0, 2))
    return np.repeat(animals, k, axis=0)


def simulate_detection(
    xy: np.ndarray,
    zeta: int,
    scenario: Scenario,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sampled detection for calls at rows of ``xy``.

    Draws a latent strength per (call, microphone) and detects with the
    strength-conditional logistic probability. Returns the boolean
    capture matrix and the strength matrix (meaningful where detected).
    """
    p = scenario.params
    b0, sigma = p.strength_params(zeta)
    d = distances_to_detectors(xy, scenario.array)
    y = expected_strength(d, b0, p.beta1) + sigma * rng.standard_normal(d.shape)
    detected = rng.random(d.shape) < expit(p.r0 + p.r1 * y)
    return detected, y


def simulate_toa(
    xy: np.ndarray,
    omega: np.ndarray,
    scenario: Scenario,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Arrival times: uniform emission, propagation delay, Gaussian error.

    Returns (z, emission_times); z is meaningful where omega is True.
    """
    t_sec = scenario.duration_hours * 3600.0
    n = xy.shape[0]
    emit = rng.uniform(0.0, t_sec, size=n)
    d = distances_to_detectors(xy, scenario.array)
    z = emit[:, None] + d / scenario.speed_of_sound + scenario.params.sigma_t * rng.standard_normal(d.shape)
    return z, emit


def attach_confidences(
    omega: np.ndarray, zeta: int, scenario: Scenario, rng: np.random.Generator
) -> np.ndarray:
    """Confidence per detected (call, microphone), resampled with
    replacement from the class-matched empirical pool."""
    pool = scenario.pools_tp if zeta == 1 else scenario.pools_fp
    pool = np.asarray(pool, dtype=float)
    if pool.size == 0:
        raise ValueError(f"empty confidence pool for class {zeta}")
    rho = np.zeros(omega.shape)
    idx = np.nonzero(omega)
    rho[idx] = pool[rng.integers(0, pool.size, size=len(idx[0]))]
    return rho


def _truncate_to_survey(omega: np.ndarray, z: np.ndarray, t_sec: float) -> np.ndarray:
    # recorders only run during the survey window; detections whose
    # arrival falls outside it are lost
    return omega & (z >= 0.0) & (z <= t_sec)


def _detected_block(
    xy: np.ndarray, zeta: int, scenario: Scenario, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Detection, strengths, arrival times and confidences for calls at
    ``xy``; drops calls detected by no microphone."""
    omega, y = simulate_detection(xy, zeta, scenario, rng)
    z, _ = simulate_toa(xy, omega, scenario, rng)
    omega = _truncate_to_survey(omega, z, scenario.duration_hours * 3600.0)
    keep = omega.any(axis=1)
    omega, y, z, xy = omega[keep], y[keep], z[keep], xy[keep]
    rho = attach_confidences(omega, zeta, scenario, rng)
    return xy, omega, y, z, rho


def simulate_false_positives(
    scenario: Scenario, n_tp_detected: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Detected false positives, targeting the configured fraction of
    all retained detections. Locations are uniform; generation repeats
    until the target count of detected sources is reached."""
    f = scenario.f
    target = int(np.round(n_tp_detected * f / (1.0 - f))) if f > 0 else 0
    region = scenario.array.region
    m = scenario.array.n_detectors
    blocks = []
    count = 0
    while count < target:
        batch = max(64, 2 * (target - count))
        xs = rng.uniform(region.x0, region.x1, size=batch)
        ys = rng.uniform(region.y0, region.y1, size=batch)
        got = _detected_block(np.column_stack([xs, ys]), 0, scenario, rng)
        blocks.append(got)
        count += got[0].shape[0]
    if not blocks:
        return (
            np.zeros((0, 2)),
            np.zeros((0, m), dtype=bool),
            np.zeros((0, m)),
            np.zeros((0, m)),
            np.zeros((0, m)),
        )
    cat = tuple(np.concatenate([b[i] for b in blocks], axis=0)[:target] for i in range(5))
    return cat


def simulate_survey(scenario: Scenario, replicate: int = 0) -> SimResult:
    """Full survey: true positives first, then false positives mixed in.

    Deterministic in (scenario.seed, replicate); replicate streams are
    independent. Undetected calls never appear in the output.
    """
    rng = substream(scenario.seed, replicate)

    animals = simulate_animals(scenario, rng)
    calls_xy = simulate_calls(animals, scenario)
    tp_xy, tp_omega, tp_y, tp_z, tp_rho = _detected_block(calls_xy, 1, scenario, rng)
    n_tp = tp_xy.shape[0]

    fp_xy, fp_omega, fp_y, fp_z, fp_rho = simulate_false_positives(scenario, n_tp, rng)
    n_fp = fp_xy.shape[0]

    xy = np.concatenate([tp_xy, fp_xy], axis=0)
    omega = np.concatenate([tp_omega, fp_omega], axis=0)
    y = np.concatenate([tp_y, fp_y], axis=0)
    z = np.concatenate([tp_z, fp_z], axis=0)
    rho = np.concatenate([tp_rho, fp_rho], axis=0)
    zeta = np.concatenate([np.ones(n_tp, dtype=int), np.zeros(n_fp, dtype=int)])

    # shuffle so ids and ordering carry no class information
    order = rng.permutation(xy.shape[0])
    xy, omega, y, z, rho, zeta = (a[order] for a in (xy, omega, y, z, rho, zeta))

    m = scenario.array.n_detectors
    calls = []
    ids = []
    for j in range(xy.shape[0]):
        det_idx = np.nonzero(omega[j])[0]
        cid = f"c{j + 1:05d}"
        ids.append(cid)
        calls.append(
            CallRecord(
                call_id=cid,
                n_detectors=m,
                det_idx=det_idx,
                y=y[j, det_idx].copy(),
                z=z[j, det_idx].copy(),
                rho=rho[j, det_idx].copy(),
            )
        )
    data = SurveyData(
        calls=tuple(calls),
        array=scenario.array,
        duration_hours=scenario.duration_hours,
        speed_of_sound=scenario.speed_of_sound,
    )
    truth = SimTruth(call_ids=tuple(ids), zeta=zeta.copy(), xy=xy.copy())
    return SimResult(data=data, truth=truth)


def true_positive_subset(result: SimResult) -> SurveyData:
    """The same survey with the false positives removed (by truth label)."""
    keep = set(result.truth.tp_ids())
    return replace(result.data, calls=tuple(c for c in result.data.calls if c.call_id in keep))


def scenario_to_dict(s: Scenario) -> dict:
    region = s.array.region
    return {
        "seed": s.seed,
        "region": {"x0": region.x0, "y0": region.y0, "x1": region.x1, "y1": region.y1},
        "detectors": [
            {"id": d, "x_m": float(x), "y_m": float(y)}
            for d, (x, y) in zip(s.array.ids, s.array.coords)
        ],
        "mask_cell_m": max(s.array.mask.cell_x_m, s.array.mask.cell_y_m),
        "call_density_per_ha_hour": s.call_density,
        "call_rate_per_hour": s.call_rate,
        "duration_hours": s.duration_hours,
        "speed_of_sound": s.speed_of_sound,
        "false_positive_fraction": s.f,
        "params": s.params.to_dict(),
        "confidence_pools": {
            "tp": np.asarray(s.pools_tp, dtype=float).tolist(),
            "fp": np.asarray(s.pools_fp, dtype=float).tolist(),
        },
    }


def scenario_from_dict(d: dict) -> Scenario:
    from .domain import Mask, Region

    region = Region(**d["region"])
    dets = d["detectors"]
    array = DetectorArray(
        ids=tuple(x["id"] for x in dets),
        coords=np.array([[x["x_m"], x["y_m"]] for x in dets]),
        region=region,
        mask=Mask.build(region, float(d["mask_cell_m"])),
    )
    pools = d.get("confidence_pools", {})
    return Scenario(
        array=array,
        call_density=float(d["call_density_per_ha_hour"]),
        call_rate=float(d["call_rate_per_hour"]),
        duration_hours=float(d["duration_hours"]),
        params=ModelParams.from_dict(d["params"]),
        f=float(d.get("false_positive_fraction", 0.0)),
        pools_tp=np.asarray(pools.get("tp", [1.0]), dtype=float),
        pools_fp=np.asarray(pools.get("fp", []), dtype=float),
        speed_of_sound=float(d.get("speed_of_sound", 343.0)),
        seed=int(d.get("seed", 0)),
    )


def write_truth_csv(truth: SimTruth, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["call_id", "zeta", "x_m", "y_m"])
        for cid, zt, (x, y) in zip(truth.call_ids, truth.zeta, truth.xy):
            w.writerow([cid, int(zt), format(float(x), ".12g"), format(float(y), ".12g")])


def read_truth_csv(path) -> SimTruth:
    ids, zeta, xy = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["call_id"])
            zeta.append(int(row["zeta"]))
            xy.append((float(row["x_m"]), float(row["y_m"])))
    return SimTruth(call_ids=tuple(ids), zeta=np.asarray(zeta), xy=np.asarray(xy))
