"""Synthetic tropical-cyclone world with analytically known truth.

Each storm is a Holland-type vortex whose parameters and centre follow a
keyframed script. Fields are rendered point-wise on any grid; datasets are
rendered on a fine grid and area-averaged down to the working resolution,
which reproduces the peak-wind smoothing of coarse reanalysis grids.

Closed forms, with ``r`` the great-circle distance to a storm centre (km),
``x = (r_max / r) ** b`` and sums running over storms::

    MSL  = ambient - sum(deficit * (1 - exp(-x)))                  [hPa -> Pa]
    Vt   = v_max * sqrt(x * exp(1 - x))      (cyclonic; 0 at the centre)
    U10, V10 = background + sum(tangential wind)
    U_L, V_L = background + sum(c_L * tangential wind)
               c = {850: 0.80, 700: 0.60, 500: 0.35}
    T_L  = T0_L - 0.4 (|lat| - 20) + sum(warm_L * deficit/50 * exp(-(r / 3 r_max)^2))
    Z_L  = g H_L - sum(k_L * 100 deficit (1 - exp(-x)) / 1.2)
    W_L  = sum(w_L * v_max/50 * exp(-((r - r_max) / r_max)^2))
    Q_L  = q0_L (1 - 0.01 (|lat| - 20)) (1 + sum(0.3 exp(-(r / 4 r_max)^2)))
    T2M  = 300 - 0.3 (|lat| - 20) - sum(1.5 exp(-(r / 2 r_max)^2))
    D2M  = T2M - 3 + sum(2 exp(-(r / 4 r_max)^2))
    SP   = MSL
    TCW  = 45 - 0.5 (|lat| - 20) + sum(25 exp(-(r / 5 r_max)^2)),  TCWV = 0.97 TCW

The background flow of the first storm in a script is the environmental
flow of the whole scene.

In multi-storm scenes each pressure perturbation (MSL, SP and Z) is faded
to zero by half the distance ``R`` to the nearest other storm, with a
smoothstep running from ``R/2`` to ``R``. The Holland core is flat to
machine precision, so without the fade a neighbour's far-field gradient
moves the pressure minimum off the scripted centre by up to ~0.15 deg.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import read_multi
from .errors import DataError, IndivisibleFactor, OutOfSpan
from .geo import KM_PER_DEG, haversine_km, haversine_km_array, lon_diff, wrap_lon
from .gridstore import (
    ALL_VARS,
    BestTrackRecord,
    FieldCube,
    GridSpec,
    Var,
    format_time,
    index_to_latlon,
    parse_time,
    read_besttrack_csv,
    read_grid_file,
    write_besttrack_csv,
    write_grid_file,
)
from .tracker import Fix, FixSource, TrackState

SCENARIOS = ("straight", "recurve", "stall", "twin", "reintensify")
DEFAULT_MIX = {"straight": 0.3, "recurve": 0.2, "stall": 0.15, "twin": 0.15, "reintensify": 0.2}
RHO_AIR = 1.15
G = 9.80665

LEVEL_COUPLING = {850: 0.80, 700: 0.60, 500: 0.35}
_T0 = {500: 266.0, 700: 282.0, 850: 290.0}
_WARM = {500: 4.0, 700: 2.5, 850: 1.5}
_HEIGHT = {500: 5880.0, 700: 3150.0, 850: 1500.0}
_W = {500: 1.0, 700: 0.8, 850: 0.5}
_Q0 = {500: 0.003, 700: 0.008, 850: 0.014}


@dataclass(frozen=True)
class VortexParams:
    lat: float
    lon: float
    v_max: float
    r_max: float
    shape_b: float = 1.5
    ambient_pressure: float = 1010.0
    central_pressure_deficit: float = 50.0
    background_flow: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.v_max > 0:
            raise DataError(f"v_max must be positive, got {self.v_max}")
        if not self.r_max > 0:
            raise DataError(f"r_max must be positive, got {self.r_max}")
        if not self.central_pressure_deficit > 0:
            raise DataError(f"pressure deficit must be positive, got {self.central_pressure_deficit}")
        if not 1.0 <= self.shape_b <= 2.5:
            raise DataError(f"shape_b {self.shape_b} outside [1, 2.5]")
        object.__setattr__(self, "lon", wrap_lon(float(self.lon)))
        object.__setattr__(self, "background_flow", tuple(float(x) for x in self.background_flow))

    @property
    def center(self) -> tuple[float, float]:
        return (self.lat, self.lon)

    @property
    def central_pressure(self) -> float:
        return self.ambient_pressure - self.central_pressure_deficit

    @property
    def peak_wind(self) -> float:
        """Exact maximum of |vortex + background| over the plane."""
        return self.v_max + math.hypot(*self.background_flow)


def holland_deficit(v_max: float, shape_b: float) -> float:
    """Pressure deficit (hPa) consistent with ``v_max`` under cyclostrophic balance."""
    return RHO_AIR * math.e * v_max ** 2 / shape_b / 100.0


@dataclass(frozen=True)
class StormScript:
    storm_id: str
    basin: str
    keyframes: tuple  # ((t_hours, VortexParams), ...)

    def __post_init__(self):
        kf = tuple((float(t), p) for t, p in self.keyframes)
        if not kf:
            raise DataError(f"{self.storm_id}: no keyframes")
        if any(b[0] <= a[0] for a, b in zip(kf, kf[1:])):
            raise DataError(f"{self.storm_id}: keyframe times must strictly increase")
        object.__setattr__(self, "keyframes", kf)

    @property
    def span(self) -> tuple[float, float]:
        return self.keyframes[0][0], self.keyframes[-1][0]

    def at(self, t_hours: float) -> VortexParams:
        t0, t1 = self.span
        if not t0 - 1e-9 <= t_hours <= t1 + 1e-9:
            raise OutOfSpan(f"{self.storm_id}: t={t_hours} h outside [{t0}, {t1}]")
        times = [t for t, _ in self.keyframes]
        k = int(np.searchsorted(times, t_hours, side="right")) - 1
        k = min(max(k, 0), len(times) - 1)
        ta, a = self.keyframes[k]
        if k == len(times) - 1 or abs(t_hours - ta) < 1e-12:
            return a
        tb, b = self.keyframes[k + 1]
        f = (t_hours - ta) / (tb - ta)

        def mix(x, y):
            return x + f * (y - x)

        return VortexParams(
            lat=mix(a.lat, b.lat),
            lon=a.lon + f * lon_diff(b.lon, a.lon),
            v_max=mix(a.v_max, b.v_max),
            r_max=mix(a.r_max, b.r_max),
            shape_b=mix(a.shape_b, b.shape_b),
            ambient_pressure=mix(a.ambient_pressure, b.ambient_pressure),
            central_pressure_deficit=mix(a.central_pressure_deficit, b.central_pressure_deficit),
            background_flow=tuple(mix(x, y) for x, y in zip(a.background_flow, b.background_flow)),
        )


@dataclass(frozen=True)
class ScenarioScript:
    """One scene: a primary storm, optionally a twin, and rendering settings."""

    name: str
    scenario: str
    storms: tuple
    t0: datetime
    lead_hours: tuple = tuple(range(6, 73, 6))
    domain_cells: int = 81
    cell_deg: float = 0.25
    render_factor: int = 5

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise DataError(f"unknown scenario {self.scenario!r}")
        if not self.storms:
            raise DataError("scenario has no storms")
        leads = tuple(int(h) for h in self.lead_hours)
        if any(b <= a for a, b in zip(leads, leads[1:])):
            raise DataError("lead hours must strictly increase")
        object.__setattr__(self, "storms", tuple(self.storms))
        object.__setattr__(self, "lead_hours", leads)

    @property
    def primary(self) -> StormScript:
        return self.storms[0]

    def time(self, t_hours: float) -> datetime:
        return self.t0 + timedelta(hours=t_hours)

    def hours(self, when) -> float:
        if isinstance(when, datetime):
            return (when - self.t0).total_seconds() / 3600.0
        return float(when)

    def params_at(self, t_hours: float) -> list[VortexParams]:
        out = []
        for k, s in enumerate(self.storms):
            t0, t1 = s.span
            if k > 0 and not t0 - 1e-9 <= t_hours <= t1 + 1e-9:
                continue
            out.append(s.at(t_hours))
        return out


# --- rendering ----------------------------------------------------------------

def _profile_terms(p: VortexParams, lats, lons):
    r = haversine_km_array(lats[:, None], lons[None, :], p.lat, p.lon)
    with np.errstate(divide="ignore", over="ignore"):
        x = np.where(r > 0, (p.r_max / np.maximum(r, 1e-300)) ** p.shape_b, np.inf)
    ex = np.exp(-x)
    with np.errstate(invalid="ignore", over="ignore"):
        vt = p.v_max * np.sqrt(np.where(np.isfinite(x), x * np.exp(np.minimum(1.0 - x, 700.0)), 0.0))
    vt = np.where(np.isfinite(vt), vt, 0.0)
    dx = lon_diff(lons, p.lon)[None, :] * KM_PER_DEG * math.cos(math.radians(p.lat))
    dy = (lats - p.lat)[:, None] * KM_PER_DEG
    dx, dy = np.broadcast_arrays(dx, dy)
    rr = np.hypot(dx, dy)
    s = 1.0 if p.lat >= 0 else -1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        ut = np.where(rr > 0, -s * vt * dy / rr, 0.0)
        vtn = np.where(rr > 0, s * vt * dx / rr, 0.0)
    return r, x, ex, ut, vtn


def _pressure_fade(r, storms, k):
    if len(storms) < 2:
        return 1.0
    p = storms[k]
    R = 0.5 * min(haversine_km(p.center, q.center) for j, q in enumerate(storms) if j != k)
    s = np.clip((r - 0.5 * R) / (0.5 * R), 0.0, 1.0)
    return 1.0 - s * s * (3.0 - 2.0 * s)


def render_field(script: ScenarioScript, t, spec: GridSpec, variables: Sequence[Var] = ALL_VARS) -> FieldCube:
    """Point-sample the scene at time ``t`` (hours after ``t0`` or a datetime)."""
    t_h = script.hours(t)
    storms = script.params_at(t_h)
    lats = spec.lats
    lons = spec.lons
    alat = np.abs(lats)[:, None] * np.ones((1, spec.nlon))
    bg = storms[0].background_flow
    amb = float(storms[0].ambient_pressure)

    shape = spec.shape
    msl = np.full(shape, amb)
    u10 = np.full(shape, bg[0])
    v10 = np.full(shape, bg[1])
    up = {L: np.full(shape, bg[0]) for L in LEVEL_COUPLING}
    vp = {L: np.full(shape, bg[1]) for L in LEVEL_COUPLING}
    warm = {L: np.zeros(shape) for L in _T0}
    dz = {L: np.zeros(shape) for L in _T0}
    w = {L: np.zeros(shape) for L in _T0}
    moist = np.zeros(shape)
    cool = np.zeros(shape)
    dew = np.zeros(shape)
    tcw = np.zeros(shape)

    for k, p in enumerate(storms):
        r, x, ex, ut, vt = _profile_terms(p, lats, lons)
        drop = p.central_pressure_deficit * (1.0 - ex) * _pressure_fade(r, storms, k)
        msl -= drop
        u10 += ut
        v10 += vt
        for L, c in LEVEL_COUPLING.items():
            up[L] += c * ut
            vp[L] += c * vt
        core3 = np.exp(-((r / (3.0 * p.r_max)) ** 2))
        for L in _T0:
            warm[L] += _WARM[L] * p.central_pressure_deficit / 50.0 * core3
            dz[L] += LEVEL_COUPLING[L] * 100.0 * drop / 1.2
            w[L] += _W[L] * p.v_max / 50.0 * np.exp(-(((r - p.r_max) / p.r_max) ** 2))
        core4 = np.exp(-((r / (4.0 * p.r_max)) ** 2))
        moist += 0.3 * core4
        cool += 1.5 * np.exp(-((r / (2.0 * p.r_max)) ** 2))
        dew += 2.0 * core4
        tcw += 25.0 * np.exp(-((r / (5.0 * p.r_max)) ** 2))

    t2m = 300.0 - 0.3 * (alat - 20.0) - cool
    tcw_total = 45.0 - 0.5 * (alat - 20.0) + tcw
    out = {
        Var.MSL: msl * 100.0,
        Var.SP: msl * 100.0,
        Var.U10: u10,
        Var.V10: v10,
        Var.T2M: t2m,
        Var.D2M: t2m - 3.0 + dew,
        Var.TCW: tcw_total,
        Var.TCWV: 0.97 * tcw_total,
    }
    for L in _T0:
        out[Var.at_level("U", L)] = up[L]
        out[Var.at_level("V", L)] = vp[L]
        out[Var.at_level("T", L)] = _T0[L] - 0.4 * (alat - 20.0) + warm[L]
        out[Var.at_level("Z", L)] = G * _HEIGHT[L] - dz[L]
        out[Var.at_level("W", L)] = w[L]
        out[Var.at_level("Q", L)] = _Q0[L] * (1.0 - 0.01 * (alat - 20.0)) * (1.0 + moist)
    variables = tuple(variables)
    data = np.stack([out[v] for v in variables])
    return FieldCube(spec, variables, data, script.time(t_h))


def fine_spec(coarse: GridSpec, factor: int) -> GridSpec:
    """Grid whose ``factor x factor`` blocks average onto ``coarse`` cells."""
    f = int(factor)
    df = coarse.dlat / f
    dlonf = coarse.dlon / f
    half = (f - 1) / 2.0
    sign = -1.0 if coarse.north_first else 1.0
    return GridSpec(coarse.lat0 - sign * half * df, coarse.lon0 - half * dlonf, df, dlonf,
                    coarse.nlat * f, coarse.nlon * f, coarse.north_first)


def downsample(cube: FieldCube, factor: int) -> FieldCube:
    """Area-mean pooling over ``factor x factor`` blocks."""
    f = int(factor)
    spec = cube.spec
    if f < 1 or spec.nlat % f or spec.nlon % f:
        raise IndivisibleFactor(f"factor {factor} does not divide grid {spec.shape}")
    if f == 1:
        return cube
    nv = len(cube.variables)
    blocks = cube.data.astype(np.float64).reshape(nv, spec.nlat // f, f, spec.nlon // f, f)
    data = blocks.mean(axis=(2, 4))
    lat0, lon0 = index_to_latlon(((f - 1) / 2.0, (f - 1) / 2.0), spec)
    coarse = GridSpec(lat0, lon0, spec.dlat * f, spec.dlon * f, spec.nlat // f, spec.nlon // f, spec.north_first)
    return FieldCube(coarse, cube.variables, data, cube.timestamp)


def wind_speed(cube: FieldCube) -> np.ndarray:
    u = cube.field(Var.U10).astype(np.float64)
    v = cube.field(Var.V10).astype(np.float64)
    return np.hypot(u, v)


# --- scenario generation ------------------------------------------------------

def _advance(lat, lon, u, v, hours):
    dlat = v * hours * 3600.0 / (KM_PER_DEG * 1000.0)
    dlon = u * hours * 3600.0 / (KM_PER_DEG * 1000.0 * math.cos(math.radians(lat)))
    return lat + dlat, wrap_lon(lon + dlon)


_BASIN_GENESIS = {
    "WP": ((10.0, 25.0), (125.0, 160.0), 1.0),
    "EP": ((10.0, 20.0), (220.0, 250.0), 1.0),
    "NA": ((12.0, 28.0), (290.0, 320.0), 1.0),
    "NI": ((10.0, 20.0), (60.0, 90.0), 1.0),
    "SI": ((-25.0, -10.0), (55.0, 100.0), -1.0),
    "SP": ((-25.0, -12.0), (160.0, 200.0), -1.0),
}


def _make_storm(rng: np.random.Generator, storm_id: str, basin: str, scenario: str,
                times: Sequence[float], start=None) -> StormScript:
    (la, lb), (oa, ob), hemi = _BASIN_GENESIS[basin]
    if start is None:
        lat = float(rng.uniform(la, lb))
        lon = float(rng.uniform(oa, ob))
    else:
        lat, lon = start
    v0 = float(rng.uniform(25.0, 60.0))
    r_max = float(rng.uniform(25.0, 70.0))
    b = float(rng.uniform(1.2, 2.0))
    speed = float(rng.uniform(2.0, 7.0))
    heading = float(rng.uniform(100.0, 160.0))  # degrees counter-clockwise from east
    turn = 0.0
    if scenario == "recurve":
        turn = float(rng.uniform(-1.6, -1.0))  # deg/h clockwise toward the northeast
    elif scenario == "stall":
        speed = float(rng.uniform(0.3, 1.5))
    meander = float(rng.uniform(0.0, 2 * math.pi))

    frames = []
    for k, t in enumerate(times):
        if scenario == "reintensify":
            # weaken to 70% by +36 h, then recover to 120% by +72 h
            f = 1.0 - 0.3 * min(max(t, 0.0), 36.0) / 36.0 + 0.5 * max(t - 36.0, 0.0) / 36.0
        else:
            f = 1.0 + 0.003 * t
        v_max = max(v0 * f, 15.0)
        hdg = heading + turn * (t - times[0])
        if scenario == "stall":
            hdg = heading + 120.0 * math.sin(meander + t / 12.0)
        u = speed * math.cos(math.radians(hdg))
        v = hemi * speed * math.sin(math.radians(hdg))
        frames.append((t, VortexParams(
            lat=lat, lon=lon, v_max=v_max, r_max=r_max, shape_b=b,
            ambient_pressure=1010.0,
            central_pressure_deficit=holland_deficit(v_max, b),
            background_flow=(u, v),
        )))
        if k + 1 < len(times):
            lat, lon = _advance(lat, lon, u, v, times[k + 1] - t)
    return StormScript(storm_id, basin, tuple(frames))


def make_scenario(rng: np.random.Generator, index: int, scenario: str, basin: str = "WP",
                  t0: datetime | None = None, lead_hours=tuple(range(6, 73, 6)),
                  domain_cells: int = 81, cell_deg: float = 0.25, render_factor: int = 5) -> ScenarioScript:
    if t0 is None:
        t0 = datetime(2024, 6, 1, tzinfo=timezone.utc) + timedelta(hours=6 * index)
    times = [-6.0, 0.0] + [float(h) for h in lead_hours]
    sid = f"SYN{index:04d}"
    storms = [_make_storm(rng, sid, basin, scenario, times)]
    if scenario == "twin":
        first = storms[0].keyframes[0][1]
        # separations straddle the smallest twin distance on record for WP
        sep = float(rng.uniform(2.0, 5.0))
        bearing = float(rng.uniform(0.0, 2 * math.pi))
        lat2 = first.lat + sep * math.sin(bearing)
        lon2 = first.lon + sep * math.cos(bearing) / math.cos(math.radians(first.lat))
        twin = _make_storm(rng, sid + "B", basin, "straight", times, start=(lat2, lon2))
        # the companion drifts with the primary's environment
        frames = []
        for (t, p), (_, q) in zip(twin.keyframes, storms[0].keyframes):
            dlat = q.lat - first.lat
            dlon = lon_diff(q.lon, first.lon)
            frames.append((t, replace(p, lat=lat2 + dlat, lon=lon2 + dlon, background_flow=q.background_flow)))
        storms.append(StormScript(sid + "B", basin, tuple(frames)))
    return ScenarioScript(sid, scenario, tuple(storms), t0, tuple(lead_hours), domain_cells, cell_deg, render_factor)


# --- scenario text format ---------------------------------------------------------

_KF_FIELDS = ("t_h", "lat", "lon", "v_max", "r_max", "shape_b", "ambient_hpa", "deficit_hpa", "bg_u", "bg_v")


def format_scenario(script: ScenarioScript) -> str:
    lines = [
        "# synthetic cyclone scenario",
        f"# keyframe = {' '.join(_KF_FIELDS)}",
        f"name = {script.name}",
        f"scenario = {script.scenario}",
        f"t0 = {format_time(script.t0)}",
        f"lead_hours = {','.join(str(h) for h in script.lead_hours)}",
        f"domain_cells = {script.domain_cells}",
        f"cell_deg = {script.cell_deg!r}",
        f"render_factor = {script.render_factor}",
    ]
    for k, s in enumerate(script.storms):
        lines.append(f"storm.{k}.id = {s.storm_id}")
        lines.append(f"storm.{k}.basin = {s.basin}")
        for t, p in s.keyframes:
            vals = (t, p.lat, p.lon, p.v_max, p.r_max, p.shape_b, p.ambient_pressure,
                    p.central_pressure_deficit, *p.background_flow)
            lines.append(f"storm.{k}.keyframe = " + " ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def parse_scenario(pairs: Sequence[tuple[str, str]]) -> ScenarioScript:
    top = {}
    storms: dict[int, dict] = {}
    for key, value in pairs:
        if key.startswith("storm."):
            try:
                _, idx, attr = key.split(".", 2)
                idx = int(idx)
            except ValueError:
                raise DataError(f"bad scenario key {key!r}") from None
            entry = storms.setdefault(idx, {"keyframes": []})
            if attr == "keyframe":
                vals = [float(x) for x in value.split()]
                if len(vals) != len(_KF_FIELDS):
                    raise DataError(f"keyframe needs {len(_KF_FIELDS)} numbers, got {len(vals)}")
                t, lat, lon, vm, rm, b, amb, dp, bu, bv = vals
                entry["keyframes"].append((t, VortexParams(lat, lon, vm, rm, b, amb, dp, (bu, bv))))
            else:
                entry[attr] = value
        else:
            if key in top:
                raise DataError(f"duplicate scenario key {key!r}")
            top[key] = value
    try:
        scripts = tuple(
            StormScript(storms[k]["id"], storms[k].get("basin", "WP"), tuple(storms[k]["keyframes"]))
            for k in sorted(storms)
        )
        return ScenarioScript(
            name=top["name"],
            scenario=top["scenario"],
            storms=scripts,
            t0=parse_time(top["t0"]),
            lead_hours=tuple(int(x) for x in top.get("lead_hours", "").split(",") if x.strip()),
            domain_cells=int(top.get("domain_cells", 81)),
            cell_deg=float(top.get("cell_deg", 0.25)),
            render_factor=int(top.get("render_factor", 5)),
        )
    except KeyError as exc:
        raise DataError(f"scenario missing key {exc}") from None


def read_scenario(path) -> ScenarioScript:
    return parse_scenario(read_multi(path))


def read_mix(path) -> dict[str, float]:
    mix = {k: float(v) for k, v in read_multi(path)}
    validate_mix(mix)
    return mix


def validate_mix(mix: Mapping[str, float]) -> None:
    unknown = set(mix) - set(SCENARIOS)
    if unknown:
        raise DataError(f"unknown scenarios in mix: {sorted(unknown)}")
    if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
        raise DataError(f"mix weights must be nonnegative and sum to 1, got {dict(mix)}")


# --- datasets -------------------------------------------------------------------

@dataclass
class SyntheticStorm:
    script: ScenarioScript
    index: int

    @property
    def storm_id(self) -> str:
        return self.script.primary.storm_id

    @property
    def basin(self) -> str:
        return self.script.primary.basin

    @property
    def times(self) -> list[float]:
        return [t for t, _ in self.script.primary.keyframes]

    def truth(self, t_hours: float) -> VortexParams:
        return self.script.primary.at(t_hours)

    def track(self) -> TrackState:
        fixes = tuple(Fix(self.script.time(t), p.lat, p.lon) for t, p in self.script.primary.keyframes)
        return TrackState(self.storm_id, fixes, FixSource.BestTrack)

    def records(self) -> list[BestTrackRecord]:
        out = []
        for s in self.script.storms:
            for t, p in s.keyframes:
                out.append(BestTrackRecord(s.storm_id, s.basin, self.script.time(t), p.lat, p.lon,
                                           p.peak_wind, p.central_pressure))
        return out


def domain_spec(script: ScenarioScript, t_hours: float, jitter_seed: int = 0) -> GridSpec:
    """Storm-following working grid at time ``t_hours``.

    The domain is aligned to the global ``cell_deg`` lattice and centred a
    few cells away from the node nearest the primary storm.
    """
    p = script.primary.at(t_hours)
    c = script.cell_deg
    n = script.domain_cells
    rng = np.random.default_rng([jitter_seed, int(round(t_hours * 60)) + 10_000])
    ji, jj = (int(x) for x in rng.integers(-2, 3, size=2))
    ci = round(p.lat / c) + ji
    cj = round(p.lon / c) + jj
    lat0 = (ci + n // 2) * c
    lon0 = (cj - n // 2) * c
    return GridSpec(lat0, lon0, c, c, n, n, north_first=True)


def render_domain(script: ScenarioScript, t_hours: float, jitter_seed: int = 0,
                  spec: GridSpec | None = None) -> FieldCube:
    """Render on a fine grid and pool down to the working resolution."""
    spec = spec or domain_spec(script, t_hours, jitter_seed)
    f = script.render_factor
    fine = render_field(script, t_hours, fine_spec(spec, f))
    return downsample(fine, f)


class CubeSequence(Sequence):
    """Lazily rendered cubes of one storm, indexed like ``storm.times``."""

    def __init__(self, storm: SyntheticStorm, jitter_seed: int):
        self.storm = storm
        self.jitter_seed = jitter_seed

    def __len__(self):
        return len(self.storm.times)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        return render_domain(self.storm.script, self.storm.times[k], self.jitter_seed)


@dataclass
class SyntheticDataset:
    seed: int
    storms: list
    mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))

    def __len__(self):
        return len(self.storms)

    @property
    def storm_ids(self) -> list[str]:
        return [s.storm_id for s in self.storms]

    def storm(self, storm_id: str) -> SyntheticStorm:
        for s in self.storms:
            if s.storm_id == storm_id:
                return s
        raise KeyError(storm_id)

    def jitter_seed(self, storm: SyntheticStorm) -> int:
        return self.seed * 100_003 + storm.index

    def cubes(self, storm_id: str) -> CubeSequence:
        s = self.storm(storm_id)
        return CubeSequence(s, self.jitter_seed(s))

    def cube(self, storm_id: str, t_hours: float) -> FieldCube:
        s = self.storm(storm_id)
        return render_domain(s.script, t_hours, self.jitter_seed(s))

    def truth_tracks(self) -> list[TrackState]:
        return [s.track() for s in self.storms]

    def intensity_truth(self) -> dict[tuple[str, float], float]:
        return {(s.storm_id, t): s.truth(t).peak_wind for s in self.storms for t in s.times}

    def records(self) -> list[BestTrackRecord]:
        return [r for s in self.storms for r in s.records()]

    def sub_cell_offsets(self, t_hours: float = 0.0) -> np.ndarray:
        """Truth offsets from the nearest node, in cells, shape (n, 2)."""
        out = []
        for s in self.storms:
            p = s.truth(t_hours)
            c = s.script.cell_deg
            out.append((p.lat / c - round(p.lat / c), p.lon / c - round(p.lon / c)))
        return np.array(out).reshape(-1, 2)


def gen_dataset(seed: int, n_storms: int, mix: Mapping[str, float] | None = None, basin: str = "WP",
                lead_hours=tuple(range(6, 73, 6)), domain_cells: int = 81, cell_deg: float = 0.25,
                render_factor: int = 5) -> SyntheticDataset:
    """Deterministic synthetic dataset; fields are rendered on demand."""
    mix = dict(DEFAULT_MIX if mix is None else mix)
    validate_mix(mix)
    names = [k for k in SCENARIOS if mix.get(k, 0.0) > 0]
    probs = np.array([mix[k] for k in names])
    probs = probs / probs.sum()
    root = np.random.SeedSequence(seed)
    choose = np.random.default_rng(root.spawn(1)[0])
    children = root.spawn(n_storms) if n_storms else []
    storms = []
    for k in range(n_storms):
        scenario = names[int(choose.choice(len(names), p=probs))]
        rng = np.random.default_rng(children[k])
        script = make_scenario(rng, k, scenario, basin=basin, lead_hours=lead_hours,
                               domain_cells=domain_cells, cell_deg=cell_deg, render_factor=render_factor)
        storms.append(SyntheticStorm(script, k))
    return SyntheticDataset(seed, storms, mix)


# --- on-disk layout -------------------------------------------------------------

def cube_filename(storm_id: str, t_hours: float) -> str:
    return f"{storm_id}_{int(round(t_hours)):+04d}h.bgc"


def write_dataset(ds: SyntheticDataset, out_dir) -> None:
    """Write BGC1 fields, a best-track CSV, scenario scripts and an index."""
    out = Path(out_dir)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    (out / "scenarios").mkdir(exist_ok=True)
    index = {"seed": ds.seed, "mix": {k: ds.mix[k] for k in sorted(ds.mix)}, "storms": []}
    for s in ds.storms:
        (out / "scenarios" / f"{s.storm_id}.txt").write_text(format_scenario(s.script), encoding="utf-8")
        files = {}
        for t in s.times:
            if t < 0:
                continue
            name = cube_filename(s.storm_id, t)
            write_grid_file(ds.cube(s.storm_id, t), out / "fields" / name)
            files[str(int(round(t)))] = f"fields/{name}"
        index["storms"].append({
            "storm_id": s.storm_id,
            "basin": s.basin,
            "scenario": s.script.scenario,
            "t0": format_time(s.script.t0),
            "lead_hours": list(s.script.lead_hours),
            "fields": files,
        })
    write_besttrack_csv(ds.records(), out / "besttrack.csv")
    (out / "dataset.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")


class DatasetDir:
    """Read-side view of a directory written by :func:`write_dataset`."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.index = json.loads((self.path / "dataset.json").read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"{self.path} is not a dataset directory (no dataset.json)") from None
        self._records = None
        self._entries = {e["storm_id"]: e for e in self.index["storms"]}

    @property
    def storm_ids(self) -> list[str]:
        return [e["storm_id"] for e in self.index["storms"]]

    def entry(self, storm_id: str) -> dict:
        return self._entries[storm_id]

    def t0(self, storm_id: str) -> datetime:
        return parse_time(self._entries[storm_id]["t0"])

    def lead_hours(self, storm_id: str) -> list[int]:
        return list(self._entries[storm_id]["lead_hours"])

    def cube(self, storm_id: str, t_hours: float) -> FieldCube:
        rel = self._entries[storm_id]["fields"].get(str(int(round(t_hours))))
        if rel is None:
            raise OutOfSpan(f"{storm_id}: no field at t={t_hours} h")
        return read_grid_file(self.path / rel)

    def records(self) -> list[BestTrackRecord]:
        if self._records is None:
            self._records = read_besttrack_csv(self.path / "besttrack.csv")
        return self._records

    def track(self, storm_id: str) -> TrackState:
        recs = [r for r in self.records() if r.storm_id == storm_id]
        return TrackState(storm_id, tuple(Fix(r.timestamp, r.lat, r.lon) for r in recs), FixSource.BestTrack)

    def truth_at(self, storm_id: str, t_hours: float) -> BestTrackRecord:
        when = self.t0(storm_id) + timedelta(hours=t_hours)
        for r in self.records():
            if r.storm_id == storm_id and r.timestamp == when:
                return r
        raise OutOfSpan(f"{storm_id}: no best-track fix at {format_time(when)}")

    def scenario(self, storm_id: str) -> ScenarioScript:
        return read_scenario(self.path / "scenarios" / f"{storm_id}.txt")


def dataset_hash(path) -> str:
    """SHA-256 over every file below ``path`` (relative name + bytes), sorted."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json"):
        h.update(str(f.relative_to(root)).encode("utf-8") + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def dataset_digest(ds: SyntheticDataset) -> str:
    """In-memory hash of scripts (and therefore of every rendered field)."""
    h = hashlib.sha256()
    for s in ds.storms:
        h.update(format_scenario(s.script).encode("utf-8"))
    return h.hexdigest()
