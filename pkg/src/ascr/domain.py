"""Core data types for acoustic spatial capture-recapture surveys.

A survey consists of a microphone array inside a rectangular region, a
regular integration mask over that region, and a set of detected calls.
Each call carries a capture history over the microphones plus received
signal strengths, arrival times, and ML confidence scores at the
microphones that detected it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

HECTARE_M2 = 10_000.0
DEFAULT_SPEED_OF_SOUND = 343.0  # m/s, dry air at ~20 C


class SurveyValidationError(ValueError):
    """Raised when survey data violate structural invariants.

    ``problems`` lists every violation found, one string per problem,
    prefixed with the offending call id where applicable.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("survey validation failed:\n" + "\n".join(self.problems))


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangular survey region, coordinates in metres."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("region must have positive width and height")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area_m2(self) -> float:
        return self.width * self.height

    @property
    def area_ha(self) -> float:
        return self.area_m2 / HECTARE_M2

    def contains(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        return (
            (xy[:, 0] >= self.x0)
            & (xy[:, 0] <= self.x1)
            & (xy[:, 1] >= self.y0)
            & (xy[:, 1] <= self.y1)
        )


@dataclass(frozen=True, eq=False)
class Mask:
    """Regular grid of cell centres tiling a region exactly.

    The requested cell side is rounded so that an integer number of
    cells spans each axis; the realised per-axis cell sides therefore
    tile the region with zero residual area for any requested
    resolution.
    """

    centres: np.ndarray  # (n_cells, 2)
    cell_x_m: float
    cell_y_m: float
    nx: int
    ny: int

    @property
    def n_cells(self) -> int:
        return self.centres.shape[0]

    @property
    def cell_area_m2(self) -> float:
        return self.cell_x_m * self.cell_y_m

    @property
    def total_area_m2(self) -> float:
        return self.n_cells * self.cell_area_m2

    @classmethod
    def build(cls, region: Region, cell_m: float) -> "Mask":
        if cell_m <= 0:
            raise ValueError("cell_m must be positive")
        nx = max(1, round(region.width / cell_m))
        ny = max(1, round(region.height / cell_m))
        hx = region.width / nx
        hy = region.height / ny
        cx = region.x0 + hx * (np.arange(nx) + 0.5)
        cy = region.y0 + hy * (np.arange(ny) + 0.5)
        gx, gy = np.meshgrid(cx, cy, indexing="ij")
        centres = np.column_stack([gx.ravel(), gy.ravel()])
        return cls(centres=centres, cell_x_m=hx, cell_y_m=hy, nx=nx, ny=ny)


@dataclass(frozen=True, eq=False)
class DetectorArray:
    """Microphone locations plus the survey region and integration mask."""

    ids: tuple[str, ...]
    coords: np.ndarray  # (M, 2) metres
    region: Region
    mask: Mask

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        object.__setattr__(self, "coords", coords)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
            raise ValueError("coords must be a non-empty (M, 2) array")
        if len(self.ids) != coords.shape[0]:
            raise ValueError("ids and coords length mismatch")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("detector ids must be unique")
        if not self.region.contains(coords).all():
            raise ValueError("all detectors must lie inside the region")
        rel = abs(self.mask.total_area_m2 - self.region.area_m2) / self.region.area_m2
        if rel > 1e-9:
            raise ValueError("mask does not tile the region")

    @property
    def n_detectors(self) -> int:
        return self.coords.shape[0]

    def with_mask(self, cell_m: float) -> "DetectorArray":
        """Same array with the mask rebuilt at a new resolution."""
        return replace(self, mask=Mask.build(self.region, cell_m))

    @classmethod
    def grid(
        cls,
        nx: int,
        ny: int,
        spacing_m: float,
        buffer_m: float,
        mask_cell_m: float,
        origin: tuple[float, float] = (0.0, 0.0),
    ) -> "DetectorArray":
        """Regular nx-by-ny detector grid with a rectangular buffer."""
        ox, oy = origin
        xs = ox + spacing_m * np.arange(nx)
        ys = oy + spacing_m * np.arange(ny)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        coords = np.column_stack([gx.ravel(), gy.ravel()])
        region = Region(
            x0=float(xs[0] - buffer_m),
            y0=float(ys[0] - buffer_m),
            x1=float(xs[-1] + buffer_m),
            y1=float(ys[-1] + buffer_m),
        )
        ids = tuple(f"m{i:02d}" for i in range(coords.shape[0]))
        return cls(ids=ids, coords=coords, region=region, mask=Mask.build(region, mask_cell_m))


def distance(x, detector_index: int, array: DetectorArray) -> float:
    """Euclidean distance from location ``x`` to one detector."""
    if not 0 <= detector_index < array.n_detectors:
        raise IndexError(f"detector index {detector_index} out of range")
    x = np.asarray(x, dtype=float)
    return float(np.hypot(*(x - array.coords[detector_index])))


def distances_to_detectors(xy, array: DetectorArray) -> np.ndarray:
    """Distances from locations (n, 2) to every detector, shape (n, M)."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    diff = xy[:, None, :] - array.coords[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


@dataclass(frozen=True, eq=False)
class CallRecord:
    """One detected call: capture history plus per-detection measurements.

    ``y`` (dBFS), ``z`` (seconds from survey start) and ``rho``
    (confidence in (0, 1]) are stored compactly, aligned with
    ``det_idx``, the sorted indices of detecting microphones. There are
    no sentinel values for undetected microphones.
    """

    call_id: str
    n_detectors: int
    det_idx: np.ndarray  # sorted detector indices with omega = 1
    y: np.ndarray
    z: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for name in ("det_idx", "y", "z", "rho"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        object.__setattr__(self, "det_idx", self.det_idx.astype(int))

    @property
    def J(self) -> int:
        return int(self.det_idx.size)

    @property
    def omega(self) -> np.ndarray:
        w = np.zeros(self.n_detectors, dtype=bool)
        w[self.det_idx] = True
        return w

    def problems(self, duration_seconds: float | None = None) -> list[str]:
        """Structural violations for this record (empty when valid)."""
        out = []
        tag = f"call {self.call_id}:"
        if self.J == 0:
            out.append(f"{tag} undetected call (capture history all zero)")
        if np.any(self.det_idx < 0) or np.any(self.det_idx >= self.n_detectors):
            out.append(f"{tag} detector index out of range")
        if len(np.unique(self.det_idx)) != self.J:
            out.append(f"{tag} duplicate detector indices")
        for name, arr in (("y", self.y), ("z", self.z), ("rho", self.rho)):
            if arr.size != self.J:
                out.append(f"{tag} {name} length {arr.size} != number of detections {self.J}")
            elif not np.all(np.isfinite(arr.astype(float))):
                out.append(f"{tag} non-finite {name} value")
        if self.rho.size == self.J and self.J > 0:
            if np.any(self.rho <= 0) or np.any(self.rho > 1):
                out.append(f"{tag} confidence out of range (0, 1]")
        if duration_seconds is not None and self.z.size == self.J and self.J > 0:
            if np.any(self.z < 0) or np.any(self.z > duration_seconds):
                out.append(f"{tag} arrival time outside [0, T]")
        return out


@dataclass(frozen=True, eq=False)
class SurveyData:
    """All observations from one survey plus the array geometry."""

    calls: tuple[CallRecord, ...]
    array: DetectorArray
    duration_hours: float
    speed_of_sound: float = DEFAULT_SPEED_OF_SOUND

    @property
    def n_calls(self) -> int:
        return len(self.calls)

    @property
    def duration_seconds(self) -> float:
        return self.duration_hours * 3600.0

    def with_mask(self, cell_m: float) -> "SurveyData":
        return replace(self, array=self.array.with_mask(cell_m))

    def subset(self, call_ids) -> "SurveyData":
        keep = set(call_ids)
        return replace(self, calls=tuple(c for c in self.calls if c.call_id in keep))


def validate_survey(data: SurveyData) -> SurveyData:
    """Check all structural invariants, returning the data unchanged.

    Raises ``SurveyValidationError`` listing every violated invariant
    across all calls rather than stopping at the first.
    """
    problems: list[str] = []
    if data.duration_hours <= 0:
        problems.append("survey: duration must be positive")
    if data.speed_of_sound <= 0:
        problems.append("survey: speed of sound must be positive")
    ids = [c.call_id for c in data.calls]
    if len(set(ids)) != len(ids):
        problems.append("survey: duplicate call ids")
    t_sec = data.duration_seconds if data.duration_hours > 0 else None
    for call in data.calls:
        if call.n_detectors != data.array.n_detectors:
            problems.append(
                f"call {call.call_id}: capture history length {call.n_detectors} "
                f"!= array size {data.array.n_detectors}"
            )
        problems.extend(call.problems(duration_seconds=t_sec))
    if problems:
        raise SurveyValidationError(problems)
    return data


# ---------------------------------------------------------------------------
# model parameters and link transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceDistParams:
    """Per-class confidence distributions, fixed during fitting.

    ``family`` is "beta" (confidences in (0, 1]) or "gamma" (raw scores
    in (0, inf)). ``tau0``/``tau1`` are the (shape, shape) Beta pairs or
    (shape, rate) Gamma pairs for false and true positives.
    """

    family: str
    tau0: tuple[float, float]
    tau1: tuple[float, float]

    def __post_init__(self):
        if self.family not in ("beta", "gamma"):
            raise ValueError(f"unknown confidence family {self.family!r}")
        for pair in (self.tau0, self.tau1):
            if len(pair) != 2 or min(pair) <= 0:
                raise ValueError("confidence distribution parameters must be positive pairs")

    def logpdf(self, x, zeta: int) -> np.ndarray:
        from scipy.stats import beta as _beta, gamma as _gamma

        a, b = self.tau1 if zeta == 1 else self.tau0
        x = np.asarray(x, dtype=float)
        if self.family == "beta":
            return _beta.logpdf(np.clip(x, 1e-6, 1.0 - 1e-6), a, b)
        return _gamma.logpdf(x, a, scale=1.0 / b)


@dataclass(frozen=True)
class ModelParams:
    """Estimable model parameters on the natural scale.

    Fields not used by a given model may be None. ``tau`` holds the
    confidence-distribution parameters used by the random-confidence
    mixture; it is fixed during fitting.
    """

    beta0: float | None = None  # dBFS source strength, true positives
    beta0_fp: float | None = None  # dBFS source strength, false positives
    beta1: float | None = None  # dB/m linear decay, shared between classes
    sigma_s: float | None = None  # dB, strength sd, true positives
    sigma_s_fp: float | None = None  # dB, strength sd, false positives
    sigma_t: float | None = None  # seconds, arrival-time error sd
    r0: float | None = None  # logistic intercept of detection given strength
    r1: float | None = None  # logistic slope per dB
    pi: float | None = None  # unconditional true-positive probability
    tau: ConfidenceDistParams | None = None

    def __post_init__(self):
        for name in ("sigma_s", "sigma_s_fp", "sigma_t"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pi is not None and not (0.0 < self.pi < 1.0):
            raise ValueError("pi must be in (0, 1)")

    def require(self, names) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ValueError(f"missing parameters: {', '.join(missing)}")

    def strength_params(self, zeta: int) -> tuple[float, float]:
        """(source strength, strength sd) for the given class."""
        if zeta == 1:
            return self.beta0, self.sigma_s
        return self.beta0_fp, self.sigma_s_fp

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in (
                "beta0",
                "beta0_fp",
                "beta1",
                "sigma_s",
                "sigma_s_fp",
                "sigma_t",
                "r0",
                "r1",
                "pi",
            )
            if getattr(self, k) is not None
        }
        if self.tau is not None:
            d["tau"] = {
                "family": self.tau.family,
                "tau0": list(self.tau.tau0),
                "tau1": list(self.tau.tau1),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        d = dict(d)
        tau = d.pop("tau", None)
        if tau is not None:
            tau = ConfidenceDistParams(
                family=tau["family"], tau0=tuple(tau["tau0"]), tau1=tuple(tau["tau1"])
            )
        return cls(tau=tau, **d)


MODELS = ("tp_only", "fixed_mixture", "random_mixture", "pseudo", "fp_only")

MODEL_PARAM_NAMES: dict[str, tuple[str, ...]] = {
    "tp_only": ("beta0", "beta1", "sigma_s", "sigma_t", "r0", "r1"),
    "pseudo": ("beta0", "beta1", "sigma_s", "sigma_t", "r0", "r1"),
    "fixed_mixture": (
        "beta0",
        "beta0_fp",
        "beta1",
        "sigma_s",
        "sigma_s_fp",
        "sigma_t",
        "r0",
        "r1",
    ),
    "random_mixture": (
        "beta0",
        "beta0_fp",
        "beta1",
        "sigma_s",
        "sigma_s_fp",
        "sigma_t",
        "r0",
        "r1",
        "pi",
    ),
    "fp_only": ("beta0_fp", "beta1", "sigma_s_fp", "sigma_t", "r0", "r1"),
}

_LOG_PARAMS = frozenset({"sigma_s", "sigma_s_fp", "sigma_t"})
_LOGIT_PARAMS = frozenset({"pi"})

# optimizer box constraints on the unconstrained scale, generous but
# excluding degenerate regions (e.g. collapsing strength sds)
_UNCONSTRAINED_BOUNDS = {
    "beta0": (-200.0, 100.0),
    "beta0_fp": (-200.0, 100.0),
    "beta1": (-1.0, 2.0),
    "sigma_s": (math.log(0.05), math.log(300.0)),
    "sigma_s_fp": (math.log(0.05), math.log(300.0)),
    "sigma_t": (math.log(1e-3), math.log(3600.0)),
    "r0": (-60.0, 80.0),
    "r1": (-2.0, 5.0),
    "pi": (-13.8, 13.8),
}


@dataclass(frozen=True)
class LinkTransform:
    """Maps between natural parameters and unconstrained optimizer coordinates.

    Standard-deviation parameters use a log link, mixture weights a
    logit link, everything else identity.
    """

    names: tuple[str, ...]

    @classmethod
    def for_model(cls, model: str) -> "LinkTransform":
        if model not in MODEL_PARAM_NAMES:
            raise ValueError(f"unknown model {model!r}")
        return cls(names=MODEL_PARAM_NAMES[model])

    @property
    def n_params(self) -> int:
        return len(self.names)

    def forward(self, params: ModelParams) -> np.ndarray:
        """Natural scale to unconstrained vector."""
        params.require(self.names)
        u = np.empty(self.n_params)
        for i, name in enumerate(self.names):
            v = getattr(params, name)
            if name in _LOG_PARAMS:
                u[i] = math.log(v)
            elif name in _LOGIT_PARAMS:
                u[i] = logit(v)
            else:
                u[i] = v
        return u

    def inverse(self, u: np.ndarray, template: ModelParams) -> ModelParams:
        """Unconstrained vector back to natural scale, keeping unlisted fields."""
        updates = {}
        for i, name in enumerate(self.names):
            if name in _LOG_PARAMS:
                updates[name] = math.exp(u[i])
            elif name in _LOGIT_PARAMS:
                updates[name] = float(expit(u[i]))
            else:
                updates[name] = float(u[i])
        return replace(template, **updates)

    def bounds(self) -> list[tuple[float, float]]:
        return [_UNCONSTRAINED_BOUNDS[name] for name in self.names]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".12g")


def write_detectors_csv(array: DetectorArray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x_m", "y_m"])
        for det_id, (x, y) in zip(array.ids, array.coords):
            w.writerow([det_id, _fmt(x), _fmt(y)])


def read_detectors_csv(path) -> tuple[tuple[str, ...], np.ndarray]:
    ids, coords = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["id"])
            coords.append((float(row["x_m"]), float(row["y_m"])))
    if not ids:
        raise SurveyValidationError(["detectors.csv: no detectors"])
    return tuple(ids), np.asarray(coords)


def write_calls_csv(data: SurveyData, path) -> None:
    """Long format: one row per (call, detecting microphone)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["call_id", "detector_id", "y_dbfs", "z_s", "rho"])
        for call in data.calls:
            for k, m in enumerate(call.det_idx):
                w.writerow(
                    [
                        call.call_id,
                        data.array.ids[m],
                        _fmt(call.y[k]),
                        _fmt(call.z[k]),
                        _fmt(call.rho[k]),
                    ]
                )


def read_calls_csv(path, array: DetectorArray) -> list[CallRecord]:
    id_to_index = {d: i for i, d in enumerate(array.ids)}
    rows_by_call: dict[str, list] = {}
    problems = []
    with open(path, newline="") as fh:
        for ln, row in enumerate(csv.DictReader(fh), start=2):
            cid = row["call_id"]
            det = row["detector_id"]
            if det not in id_to_index:
                problems.append(f"calls.csv line {ln}: unknown detector id {det!r}")
                continue
            try:
                vals = (id_to_index[det], float(row["y_dbfs"]), float(row["z_s"]), float(row["rho"]))
            except ValueError:
                problems.append(f"calls.csv line {ln}: non-numeric field")
                continue
            rows_by_call.setdefault(cid, []).append(vals)
    if problems:
        raise SurveyValidationError(problems)
    calls = []
    for cid, rows in rows_by_call.items():
        rows.sort(key=lambda r: r[0])
        det_idx = np.array([r[0] for r in rows])
        calls.append(
            CallRecord(
                call_id=cid,
                n_detectors=array.n_detectors,
                det_idx=det_idx,
                y=np.array([r[1] for r in rows]),
                z=np.array([r[2] for r in rows]),
                rho=np.array([r[3] for r in rows]),
            )
        )
    return calls


def write_survey_json(data: SurveyData, path, mask_cell_m: float | None = None) -> None:
    region = data.array.region
    cfg = {
        "region": {"x0": region.x0, "y0": region.y0, "x1": region.x1, "y1": region.y1},
        "mask_cell_m": mask_cell_m
        if mask_cell_m is not None
        else max(data.array.mask.cell_x_m, data.array.mask.cell_y_m),
        "duration_hours": data.duration_hours,
        "speed_of_sound": data.speed_of_sound,
    }
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def save_survey(data: SurveyData, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_detectors_csv(data.array, out / "detectors.csv")
    write_calls_csv(data, out / "calls.csv")
    write_survey_json(data, out / "survey.json")


def load_survey(in_dir, mask_cell_m: float | None = None) -> SurveyData:
    """Load detectors.csv, calls.csv and survey.json from a directory."""
    src = Path(in_dir)
    cfg = json.loads((src / "survey.json").read_text())
    region = Region(**cfg["region"])
    cell = mask_cell_m if mask_cell_m is not None else float(cfg["mask_cell_m"])
    ids, coords = read_detectors_csv(src / "detectors.csv")
    array = DetectorArray(ids=ids, coords=coords, region=region, mask=Mask.build(region, cell))
    calls = read_calls_csv(src / "calls.csv", array)
    data = SurveyData(
        calls=tuple(calls),
        array=array,
        duration_hours=float(cfg["duration_hours"]),
        speed_of_sound=float(cfg.get("speed_of_sound", DEFAULT_SPEED_OF_SOUND)),
    )
    return validate_survey(data)
