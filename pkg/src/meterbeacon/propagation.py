"""Signal-strength models fitted to measured data: an indoor multi-floor
stairwell survey (bundled fixture) and an outdoor dense-urban range
calibration. Answers reachability questions: how many floors a gateway
covers, how far an outdoor link carries.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lora import SENSITIVITY_DBM_125KHZ

FIXTURE_NAME = "indoor_rssi_snr.csv"

# Free-space loss at 868 MHz over 1 m is ~31.5 dB; the default reference
# adds 8.5 dB building-exit allowance because the calibration gateway sat
# indoors. Exposed as a parameter for outdoor-mounted gateways.
DEFAULT_REFERENCE_LOSS_DB = 40.0


class FitError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class IndoorSample:
    distance_m: float
    floor: str
    sf: int
    rssi_dbm: float
    snr_db: float


@dataclass(frozen=True)
class IndoorDataset:
    """19 survey points per SF in {7, 9, 11} up a 6-floor stairwell (~20 m)."""

    samples: tuple[IndoorSample, ...]

    def __post_init__(self):
        for s in self.samples:
            if not 0 <= s.distance_m <= 20:
                raise ValueError(f"distance out of survey range: {s.distance_m}")
            if not -120 <= s.rssi_dbm <= -50:
                raise ValueError(f"RSSI out of survey range: {s.rssi_dbm}")
            if not -4 <= s.snr_db <= 12:
                raise ValueError(f"SNR out of survey range: {s.snr_db}")
            if s.sf not in (7, 9, 11):
                raise ValueError(f"survey covers SF 7/9/11 only, got {s.sf}")

    def select(self, sf: int) -> tuple[IndoorSample, ...]:
        return tuple(s for s in self.samples if s.sf == sf)

    @property
    def spreading_factors(self) -> tuple[int, ...]:
        return tuple(sorted({s.sf for s in self.samples}))


def load_indoor_dataset(path: str | Path | None = None) -> IndoorDataset:
    """Load the survey fixture (bundled copy by default)."""
    if path is None:
        source = resources.files("meterbeacon").joinpath("data").joinpath(FIXTURE_NAME)
        text = source.read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    samples = []
    for row in csv.DictReader(text.splitlines()):
        samples.append(IndoorSample(
            distance_m=float(row["distance_m"]), floor=row["floor"],
            sf=int(row["sf"]), rssi_dbm=float(row["rssi_dbm"]),
            snr_db=float(row["snr_db"])))
    return IndoorDataset(samples=tuple(samples))


@dataclass(frozen=True)
class PathLossModel:
    """Mean received power versus distance.

    ``linear``: rssi = intercept + slope * d (dB per meter; suits the
    short, obstructed vertical path of a stairwell).
    ``log-distance``: rssi = intercept - 10 * n * log10(d / d0).
    """

    kind: str
    intercept_dbm: float
    slope_db_per_m: float = 0.0
    exponent: float = 0.0
    reference_distance_m: float = 1.0
    residual_rmse_db: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "log-distance"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.residual_rmse_db < 0:
            raise ValueError("residual RMSE must be nonnegative")
        if self.kind == "log-distance" and self.reference_distance_m <= 0:
            raise ValueError("log-distance model needs a positive reference distance")

    def predict(self, distance_m: float) -> float:
        return predict_rssi(self, distance_m)


def fit_model(samples: Iterable[IndoorSample], kind: str = "linear") -> PathLossModel:
    """Least-squares fit minimizing squared dBm residuals.

    d=0 rows are kept for linear fits and dropped from log-distance fits
    (the logarithm is undefined there).
    """
    pts = [(s.distance_m, s.rssi_dbm) for s in samples]
    if kind == "log-distance":
        pts = [(d, r) for d, r in pts if d > 0]
    if len(pts) < 2:
        raise FitError(f"need at least 2 usable points, got {len(pts)}")
    d = np.array([p[0] for p in pts])
    r = np.array([p[1] for p in pts])
    if np.all(d == d[0]):
        raise FitError("all points share one distance; no fit possible")

    if kind == "linear":
        slope, intercept = np.polyfit(d, r, 1)
        predicted = intercept + slope * d
        rmse = float(np.sqrt(np.mean((r - predicted) ** 2)))
        return PathLossModel(kind="linear", intercept_dbm=float(intercept),
                             slope_db_per_m=float(slope), residual_rmse_db=rmse)
    if kind == "log-distance":
        x = np.log10(d)    # reference distance 1 m
        coef, intercept = np.polyfit(x, r, 1)
        predicted = intercept + coef * x
        rmse = float(np.sqrt(np.mean((r - predicted) ** 2)))
        return PathLossModel(kind="log-distance", intercept_dbm=float(intercept),
                             exponent=float(-coef / 10.0), reference_distance_m=1.0,
                             residual_rmse_db=rmse)
    raise FitError(f"unknown model kind {kind!r}")


def predict_rssi(model: PathLossModel, distance_m: float) -> float:
    if model.kind == "linear":
        if distance_m < 0:
            raise ValueError(f"distance must be nonnegative, got {distance_m}")
        return model.intercept_dbm + model.slope_db_per_m * distance_m
    if distance_m < model.reference_distance_m:
        raise ValueError(
            f"log-distance model is defined for d >= {model.reference_distance_m} m, got {distance_m}")
    return model.intercept_dbm - 10.0 * model.exponent * math.log10(
        distance_m / model.reference_distance_m)


def attenuation_over(model: PathLossModel, d1: float, d2: float) -> float:
    """Signal drop between two distances: predict(d1) - predict(d2)."""
    if d2 == d1:
        return 0.0
    return predict_rssi(model, d1) - predict_rssi(model, d2)


def max_range_m(model: PathLossModel, sensitivity_dbm: float) -> float:
    """Distance at which the predicted RSSI falls to the sensitivity."""
    if model.kind == "linear":
        if model.slope_db_per_m >= 0:
            raise CalibrationError("non-attenuating linear model has no range limit")
        return (sensitivity_dbm - model.intercept_dbm) / model.slope_db_per_m
    if model.exponent <= 0:
        raise CalibrationError("non-attenuating log-distance model has no range limit")
    return model.reference_distance_m * 10.0 ** (
        (model.intercept_dbm - sensitivity_dbm) / (10.0 * model.exponent))


@dataclass(frozen=True)
class BuildingGeometry:
    """Per-floor heights above ground and slab thicknesses of the surveyed
    stairwell; heights drive the cumulative distance per floor."""

    heights_m: tuple[float, ...]
    ceiling_thickness_cm: tuple[float, ...] = ()

    def __post_init__(self):
        hs = self.heights_m
        if any(hs[i] >= hs[i + 1] for i in range(len(hs) - 1)):
            raise ValueError("floor heights must be strictly increasing")

    @classmethod
    def uniform(cls, floors: int = 6, total_height_m: float = 20.0) -> "BuildingGeometry":
        step = total_height_m / floors
        return cls(heights_m=tuple(step * (i + 1) for i in range(floors)))

    @property
    def floors(self) -> int:
        return len(self.heights_m)

    def distance_to_floor(self, floor_count: int) -> float:
        """Cumulative vertical distance across ``floor_count`` floors;
        extrapolates beyond the surveyed building at the mean spacing."""
        if floor_count <= 0:
            return 0.0
        if floor_count <= self.floors:
            return self.heights_m[floor_count - 1]
        mean_step = self.heights_m[-1] / self.floors
        return self.heights_m[-1] + mean_step * (floor_count - self.floors)


def max_floors(model: PathLossModel, start_rssi_dbm: float,
               sensitivity_dbm: float | tuple[float, float],
               geometry: BuildingGeometry | None = None,
               cap: int = 100) -> int | tuple[int, int] | None:
    """Largest floor count whose predicted RSSI still meets the sensitivity.

    The prediction anchors at ``start_rssi_dbm`` (same-floor measurement)
    and extrapolates the model's attenuation over the cumulative per-floor
    distance. A (low, high) sensitivity band yields a (min, max) floor
    range. Returns None when the model does not attenuate.
    """
    if isinstance(sensitivity_dbm, tuple):
        lo, hi = min(sensitivity_dbm), max(sensitivity_dbm)
        at_hi = max_floors(model, start_rssi_dbm, hi, geometry, cap)
        at_lo = max_floors(model, start_rssi_dbm, lo, geometry, cap)
        if at_hi is None or at_lo is None:
            return None
        return (at_hi, at_lo)

    if model.kind == "linear":
        if model.slope_db_per_m >= 0:
            return None
    else:
        if model.exponent <= 0:
            return None
        warnings.warn("log-distance extrapolation underestimates per-floor loss indoors; "
                      "the linear dB/m model reproduces the survey", stacklevel=2)

    geometry = geometry or BuildingGeometry.uniform()
    floors = 0
    while floors < cap:
        d = geometry.distance_to_floor(floors + 1)
        if model.kind == "linear":
            predicted = start_rssi_dbm + model.slope_db_per_m * d
        else:
            drop = 10.0 * model.exponent * math.log10(max(d, model.reference_distance_m)
                                                      / model.reference_distance_m)
            predicted = start_rssi_dbm - drop
        if predicted < sensitivity_dbm:
            break
        floors += 1
    return floors


def calibrate_outdoor(eirp_dbm: float, sensitivity_dbm: float, observed_range_m: float,
                      reference_loss_db: float = DEFAULT_REFERENCE_LOSS_DB,
                      reference_distance_m: float = 1.0) -> PathLossModel:
    """Log-distance model whose path loss at the observed maximum range
    equals the full link budget, with the 1 m reference loss fixed."""
    if observed_range_m <= reference_distance_m:
        raise CalibrationError(
            f"observed range {observed_range_m} m must exceed the {reference_distance_m} m reference")
    budget = eirp_dbm - sensitivity_dbm
    n = (budget - reference_loss_db) / (10.0 * math.log10(observed_range_m / reference_distance_m))
    if n <= 0:
        raise CalibrationError(
            f"inconsistent inputs: link budget {budget:.2f} dB below the reference loss "
            f"{reference_loss_db:.2f} dB")
    return PathLossModel(kind="log-distance", intercept_dbm=eirp_dbm - reference_loss_db,
                         exponent=n, reference_distance_m=reference_distance_m)


def reachable(rssi_dbm: float, sf: int, sensitivity_table: dict[int, float] | None = None) -> bool:
    """True when the RSSI meets the receiver sensitivity for the SF
    (boundary inclusive)."""
    table = sensitivity_table if sensitivity_table is not None else SENSITIVITY_DBM_125KHZ
    if sf not in table:
        raise ValueError(f"no sensitivity entry for SF{sf}")
    return rssi_dbm >= table[sf]


@dataclass(frozen=True)
class SnrModel:
    """SNR as RSSI above a fitted noise floor, clamped at the demodulator's
    reporting ceiling (taken from the survey maximum)."""

    noise_floor_dbm: float
    ceiling_db: float

    def predict(self, rssi_dbm: float) -> float:
        return min(rssi_dbm - self.noise_floor_dbm, self.ceiling_db)


def fit_snr_model(samples: Sequence[IndoorSample]) -> SnrModel:
    if not samples:
        raise FitError("no samples to fit an SNR model")
    noise = sum(s.rssi_dbm - s.snr_db for s in samples) / len(samples)
    return SnrModel(noise_floor_dbm=noise, ceiling_db=max(s.snr_db for s in samples))
