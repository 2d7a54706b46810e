"""Kinematic tracker giving the grid-resolution first guess of a storm centre.

A candidate position is obtained by extrapolating the recent track with a
blend of persistence motion and the environmental steering flow; the
candidate is then pulled onto the local sea-level pressure minimum with a
shrinking search box. The output is always a grid node.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    EmptyHistory,
    FlatField,
    MissingVariable,
    NonFiniteInput,
    OutOfBounds,
    PlausibilityViolation,
)
from .geo import KM_PER_DEG, great_circle_deg, lon_diff, wrap_lon
from .gridstore import PRESSURE_LEVELS, FieldCube, GridSpec, Var, latlon_to_fractional_index

MAX_FIX_GAP = timedelta(hours=12)
MAX_STEP_DEG_PER_6H = 5.0


class FixSource(enum.Enum):
    BestTrack = "BestTrack"
    Kinematic = "Kinematic"
    Refined = "Refined"


@dataclass(frozen=True)
class Fix:
    timestamp: datetime
    lat: float
    lon: float

    @property
    def latlon(self) -> tuple[float, float]:
        return (self.lat, self.lon)


@dataclass(frozen=True)
class TrackState:
    storm_id: str
    fixes: tuple = ()
    source: FixSource = FixSource.BestTrack

    def __post_init__(self):
        fixes = tuple(self.fixes)
        for a, b in zip(fixes, fixes[1:]):
            gap = b.timestamp - a.timestamp
            if gap <= timedelta(0):
                raise DataError(f"{self.storm_id}: fix times not strictly increasing at {b.timestamp}")
            if gap > MAX_FIX_GAP:
                raise DataError(f"{self.storm_id}: {gap} between fixes exceeds 12 h")
            check_plausible(a, b)
        object.__setattr__(self, "fixes", fixes)

    @property
    def last(self) -> Fix:
        if not self.fixes:
            raise EmptyHistory(f"{self.storm_id}: track has no fixes")
        return self.fixes[-1]

    def extended(self, fix: Fix, source: FixSource) -> "TrackState":
        return TrackState(self.storm_id, self.fixes + (fix,), source)


def check_plausible(a: Fix, b: Fix) -> None:
    hours = (b.timestamp - a.timestamp).total_seconds() / 3600.0
    limit = MAX_STEP_DEG_PER_6H * max(hours, 6.0) / 6.0
    step = float(great_circle_deg(a.lat, a.lon, b.lat, b.lon))
    if step > limit:
        raise PlausibilityViolation(
            f"displacement {step:.3f} deg in {hours:g} h exceeds {limit:.3f} deg"
        )


@dataclass(frozen=True)
class SteeringVector:
    u_mean: float
    v_mean: float
    radius_deg: float
    level_weights: tuple = (0.25, 0.35, 0.40)

    def __post_init__(self):
        w = np.asarray(self.level_weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DataError(f"level weights {self.level_weights} must be nonnegative and sum to 1")


@dataclass(frozen=True)
class TrackerConfig:
    steering_radius_deg: float = 5.0
    steering_weights: tuple = (0.25, 0.35, 0.40)
    alpha: float = 0.5
    box_schedule: tuple = (3.0, 1.5, 0.75)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError(f"alpha must lie in [0, 1], got {self.alpha}")
        sched = tuple(float(b) for b in self.box_schedule)
        if not sched or any(b <= 0 for b in sched) or any(b >= a for a, b in zip(sched, sched[1:])):
            raise DataError(f"box schedule {sched} must be positive and strictly decreasing")
        object.__setattr__(self, "box_schedule", sched)
        object.__setattr__(self, "steering_weights", tuple(float(w) for w in self.steering_weights))


def _check_disk_fits(spec: GridSpec, center, radius_deg: float) -> None:
    lo, hi = spec.lat_range
    if center[0] - radius_deg < lo - 1e-9 or center[0] + radius_deg > hi + 1e-9:
        raise OutOfBounds(f"{radius_deg} deg around lat {center[0]} leaves grid [{lo}, {hi}]")
    if spec.is_global:
        return
    coslat = np.cos(np.radians(min(abs(center[0]) + radius_deg, 89.0)))
    half = radius_deg / coslat
    west = lon_diff(center[1], spec.lon0)
    east = (spec.nlon - 1) * spec.dlon - west
    if west - half < -1e-9 or east - half < -1e-9:
        raise OutOfBounds(f"{radius_deg} deg around lon {center[1]} leaves grid columns")


def steering_flow(cube: FieldCube, center, radius_deg: float = 5.0,
                  level_weights: Sequence[float] = (0.25, 0.35, 0.40)) -> SteeringVector:
    """Level-weighted mean of U/V at 500/700/850 hPa over a great-circle disk."""
    weights = tuple(float(w) for w in level_weights)
    if len(weights) != len(PRESSURE_LEVELS):
        raise DataError(f"need {len(PRESSURE_LEVELS)} level weights, got {len(weights)}")
    for kind in ("U", "V"):
        for level in PRESSURE_LEVELS:
            if not cube.has(Var.at_level(kind, level)):
                raise MissingVariable(f"steering flow needs {kind}{level}")
    _check_disk_fits(cube.spec, center, radius_deg)
    spec = cube.spec
    d = great_circle_deg(spec.lats[:, None], spec.lons[None, :], center[0], center[1])
    disk = d <= radius_deg
    if not disk.any():
        raise OutOfBounds("steering disk contains no grid cells")
    u = v = 0.0
    for w, level in zip(weights, PRESSURE_LEVELS):
        u += w * float(np.mean(cube.field(Var.at_level("U", level))[disk], dtype=np.float64))
        v += w * float(np.mean(cube.field(Var.at_level("V", level))[disk], dtype=np.float64))
    return SteeringVector(u, v, radius_deg, weights)


def extrapolate(history: TrackState, steer: SteeringVector, dt: float, alpha: float = 0.5):
    """Advance the last fix by ``dt`` seconds.

    The velocity is ``alpha * persistence + (1 - alpha) * steering``;
    persistence comes from the last two fixes, or equals the steering
    velocity when only one fix exists. Degrees and kilometres are related on
    the local tangent plane at the last fix.
    """
    if not history.fixes:
        raise EmptyHistory(f"{history.storm_id}: cannot extrapolate an empty track")
    last = history.fixes[-1]
    coslat = np.cos(np.radians(last.lat))
    vs = np.array([steer.u_mean, steer.v_mean])  # m/s east, north
    if len(history.fixes) >= 2:
        prev = history.fixes[-2]
        span = (last.timestamp - prev.timestamp).total_seconds()
        dx_km = lon_diff(last.lon, prev.lon) * KM_PER_DEG * coslat
        dy_km = (last.lat - prev.lat) * KM_PER_DEG
        vp = np.array([dx_km, dy_km]) * 1000.0 / span
    else:
        vp = vs
    vel = alpha * vp + (1.0 - alpha) * vs
    dlat = vel[1] * dt / (KM_PER_DEG * 1000.0)
    dlon = vel[0] * dt / (KM_PER_DEG * 1000.0 * coslat) if coslat > 1e-12 else 0.0
    return float(last.lat + dlat), wrap_lon(float(last.lon + dlon))


def _box_mask(spec: GridSpec, center, half_width: float) -> np.ndarray:
    lo, hi = spec.lat_range
    if center[0] - half_width < lo - 1e-9 or center[0] + half_width > hi + 1e-9:
        raise OutOfBounds(f"search box {half_width} deg around {center} leaves grid rows")
    dl = lon_diff(spec.lons, center[1])
    if not spec.is_global:
        west = lon_diff(center[1], spec.lon0)
        east = (spec.nlon - 1) * spec.dlon - west
        if west < half_width - 1e-9 or east < half_width - 1e-9:
            raise OutOfBounds(f"search box {half_width} deg around {center} leaves grid columns")
    rows = np.abs(spec.lats - center[0]) <= half_width + 1e-9
    cols = np.abs(dl) <= half_width + 1e-9
    return rows[:, None] & cols[None, :]


def refine_pressure_min_index(msl: np.ndarray, spec: GridSpec, candidate,
                              box_schedule: Sequence[float] = (3.0, 1.5, 0.75)):
    """Shrinking-box MSL minimum search; returns the final node ``(i, j)``.

    Each stage re-centres the box on the previous stage's argmin. Equal
    minima resolve to the lowest row, then the lowest column.
    """
    msl = np.asarray(msl)
    if msl.shape != spec.shape:
        raise DataError(f"MSL shape {msl.shape} does not match grid {spec.shape}")
    sched = [float(b) for b in box_schedule]
    if not sched or any(b >= a for a, b in zip(sched, sched[1:])):
        raise DataError(f"box schedule {sched} must be nonempty and strictly decreasing")
    center = (float(candidate[0]), float(candidate[1]))
    ij = None
    for half_width in sched:
        mask = _box_mask(spec, center, half_width)
        vals = msl[mask]
        if vals.size == 0:
            raise OutOfBounds(f"search box around {center} holds no cells")
        if not np.all(np.isfinite(vals)):
            raise NonFiniteInput("MSL field contains non-finite values")
        if vals.size > 1 and vals.min() == vals.max():
            raise FlatField(f"MSL is constant inside the {half_width} deg box around {center}")
        flat = np.where(mask, msl, np.inf)
        i, j = np.unravel_index(int(np.argmin(flat)), flat.shape)
        ij = (int(i), int(j))
        center = spec.node(*ij)
    return ij


def refine_pressure_min(msl: np.ndarray, spec: GridSpec, candidate,
                        box_schedule: Sequence[float] = (3.0, 1.5, 0.75)) -> tuple[float, float]:
    return spec.node(*refine_pressure_min_index(msl, spec, candidate, box_schedule))


def track_step(cube: FieldCube, history: TrackState, cfg: TrackerConfig = TrackerConfig()) -> TrackState:
    """Append one kinematic fix valid at ``cube.timestamp``."""
    last = history.last
    dt = (cube.timestamp - last.timestamp).total_seconds()
    if dt <= 0:
        raise DataError(f"cube time {cube.timestamp} is not after last fix {last.timestamp}")
    steer = steering_flow(cube, last.latlon, cfg.steering_radius_deg, cfg.steering_weights)
    candidate = extrapolate(history, steer, dt, cfg.alpha)
    latlon_to_fractional_index(candidate, cube.spec)
    node = refine_pressure_min(cube.field(Var.MSL), cube.spec, candidate, cfg.box_schedule)
    fix = Fix(cube.timestamp, *node)
    check_plausible(last, fix)
    return history.extended(fix, FixSource.Kinematic)
