"""Gridded atmospheric fields, storm-centred windows and best-track records.

Grids are regular in latitude/longitude. ``dlat`` is always a positive
magnitude; the ``north_first`` flag records whether row 0 is the northern
edge (the usual reanalysis layout) or the southern one. Longitudes are kept
in [0, 360) and windows may wrap across the 0 meridian on global grids.

Two on-disk formats live here:

* the BGC1 binary grid container (little-endian), and
* a best-track CSV profile with the exact header
  ``storm_id,basin,timestamp,lat,lon,max_wind_ms,min_pres_hpa``.
"""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DataError,
    DimMismatch,
    DuplicateFix,
    FormatError,
    MissingVariable,
    NonFiniteInput,
    OutOfBounds,
    ParseError,
    TruncatedPayload,
    UnknownVariable,
)
from .geo import wrap_lon

PRESSURE_LEVELS = (500, 700, 850)
BASINS = ("WP", "EP", "NA", "NI", "SI", "SP")


class Var(enum.IntEnum):
    """Closed variable catalog. The integer value is the on-disk u16 tag."""

    Z500 = 101
    Z700 = 102
    Z850 = 103
    T500 = 111
    T700 = 112
    T850 = 113
    U500 = 121
    U700 = 122
    U850 = 123
    V500 = 131
    V700 = 132
    V850 = 133
    W500 = 141
    W700 = 142
    W850 = 143
    Q500 = 151
    Q700 = 152
    Q850 = 153
    T2M = 201
    D2M = 202
    U10 = 203
    V10 = 204
    MSL = 205
    SP = 206
    TCW = 207
    TCWV = 208

    @classmethod
    def parse(cls, name: str) -> "Var":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise UnknownVariable(f"unknown variable {name!r}") from None

    @classmethod
    def from_tag(cls, tag: int) -> "Var":
        try:
            return cls(tag)
        except ValueError:
            raise UnknownVariable(f"unknown variable tag {tag}") from None

    @classmethod
    def at_level(cls, kind: str, level: int) -> "Var":
        return cls.parse(f"{kind}{level}")


ALL_VARS = tuple(Var)


@dataclass(frozen=True)
class GridSpec:
    lat0: float
    lon0: float
    dlat: float
    dlon: float
    nlat: int
    nlon: int
    north_first: bool = True

    def __post_init__(self):
        if not (self.dlat > 0 and self.dlon > 0):
            raise DataError(f"grid steps must be positive, got dlat={self.dlat}, dlon={self.dlon}")
        if self.nlat < 2 or self.nlon < 2:
            raise DataError(f"grid needs at least 2x2 cells, got {self.nlat}x{self.nlon}")
        if self.nlon * self.dlon > 360.0 + 1e-9:
            raise DataError("longitude extent exceeds 360 degrees")
        last = self.lat0 + self._lat_sign * (self.nlat - 1) * self.dlat
        if not (-90.0 <= self.lat0 <= 90.0 and -90.0 <= last <= 90.0):
            raise DataError(f"grid latitudes [{self.lat0}, {last}] leave [-90, 90]")
        object.__setattr__(self, "lat0", float(self.lat0))
        object.__setattr__(self, "lon0", wrap_lon(float(self.lon0)))
        object.__setattr__(self, "dlat", float(self.dlat))
        object.__setattr__(self, "dlon", float(self.dlon))
        object.__setattr__(self, "nlat", int(self.nlat))
        object.__setattr__(self, "nlon", int(self.nlon))
        object.__setattr__(self, "north_first", bool(self.north_first))

    @property
    def _lat_sign(self) -> float:
        return -1.0 if self.north_first else 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nlat, self.nlon)

    @property
    def is_global(self) -> bool:
        return abs(self.nlon * self.dlon - 360.0) < 1e-9

    @property
    def lats(self) -> np.ndarray:
        return self.lat0 + self._lat_sign * self.dlat * np.arange(self.nlat)

    @property
    def lons(self) -> np.ndarray:
        return wrap_lon(self.lon0 + self.dlon * np.arange(self.nlon))

    @property
    def lat_range(self) -> tuple[float, float]:
        lats = self.lats
        return float(lats.min()), float(lats.max())

    def node(self, i: int, j: int) -> tuple[float, float]:
        return index_to_latlon((i, j), self)

    def shifted(self, di: int, dj: int) -> "GridSpec":
        """Same grid geometry with the origin moved by whole cells."""
        lat0, lon0 = index_to_latlon((di, dj), self)
        return GridSpec(lat0, lon0, self.dlat, self.dlon, self.nlat, self.nlon, self.north_first)


def index_to_latlon(idx, spec: GridSpec) -> tuple[float, float]:
    fi, fj = idx
    lat = spec.lat0 + spec._lat_sign * fi * spec.dlat
    lon = wrap_lon(spec.lon0 + fj * spec.dlon)
    return float(lat), float(lon)


def latlon_to_fractional_index(p, spec: GridSpec) -> tuple[float, float]:
    """Fractional ``(row, col)`` of a lat/lon point; nodes sit at integers.

    Points up to half a cell outside the node extent are accepted, anything
    further raises :class:`OutOfBounds`.
    """
    lat, lon = float(p[0]), float(p[1])
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise OutOfBounds(f"non-finite point {p}")
    fi = spec._lat_sign * (lat - spec.lat0) / spec.dlat
    d = float(np.mod(lon - spec.lon0, 360.0))
    fj = d / spec.dlon
    if spec.is_global:
        if fj > spec.nlon - 0.5:
            fj -= spec.nlon
    elif fj > spec.nlon - 0.5 and (d - 360.0) / spec.dlon >= -0.5 - 1e-12:
        fj = (d - 360.0) / spec.dlon
    if not (-0.5 - 1e-12 <= fi <= spec.nlat - 0.5 + 1e-12):
        raise OutOfBounds(f"latitude {lat} outside grid rows")
    if not (-0.5 - 1e-12 <= fj <= spec.nlon - 0.5 + 1e-12):
        raise OutOfBounds(f"longitude {lon} outside grid columns")
    return fi, fj


def nearest_node_index(p, spec: GridSpec) -> tuple[int, int]:
    fi, fj = latlon_to_fractional_index(p, spec)
    i, j = int(math.floor(fi + 0.5)), int(math.floor(fj + 0.5))
    if spec.is_global:
        j %= spec.nlon
    return min(max(i, 0), spec.nlat - 1), min(max(j, 0), spec.nlon - 1)


def snap_to_node(p, spec: GridSpec) -> tuple[float, float]:
    return index_to_latlon(nearest_node_index(p, spec), spec)


@dataclass(frozen=True, eq=False)
class FieldCube:
    """Multi-variable gridded state, ``data[var][row][col]`` in SI units.

    Values are held as float32, the precision of the BGC1 payload, and the
    array is made read-only.
    """

    spec: GridSpec
    variables: tuple
    data: np.ndarray
    timestamp: datetime = field(default_factory=lambda: datetime(1970, 1, 1, tzinfo=timezone.utc))

    def __post_init__(self):
        variables = tuple(v if isinstance(v, Var) else Var.parse(str(v)) for v in self.variables)
        if len(set(variables)) != len(variables):
            raise DataError("duplicate variables in cube")
        data = np.array(self.data, dtype=np.float32, copy=True, order="C")
        expected = (len(variables), self.spec.nlat, self.spec.nlon)
        if data.shape != expected:
            raise DataError(f"data shape {data.shape} does not match {expected}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteInput("cube contains NaN or Inf")
        data.flags.writeable = False
        ts = self.timestamp
        if ts.tzinfo is None:
            ts = ts.replace(tzinfo=timezone.utc)
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "timestamp", ts.astimezone(timezone.utc))

    @property
    def epoch_seconds(self) -> int:
        return int(self.timestamp.timestamp())

    def index(self, var) -> int:
        var = var if isinstance(var, Var) else Var.parse(str(var))
        try:
            return self.variables.index(var)
        except ValueError:
            raise MissingVariable(f"variable {var.name} not in cube") from None

    def field(self, var) -> np.ndarray:
        return self.data[self.index(var)]

    def has(self, var) -> bool:
        return (var if isinstance(var, Var) else Var.parse(str(var))) in self.variables

    def select(self, variables: Iterable) -> "FieldCube":
        variables = [v if isinstance(v, Var) else Var.parse(str(v)) for v in variables]
        idx = [self.index(v) for v in variables]
        return FieldCube(self.spec, tuple(variables), self.data[idx], self.timestamp)

    def __eq__(self, other):
        if not isinstance(other, FieldCube):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.variables == other.variables
            and self.timestamp == other.timestamp
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def crop_box(cube: FieldCube, center, nrows: int, ncols: int) -> FieldCube:
    """Crop an ``nrows x ncols`` window around the node nearest ``center``.

    The snapped node lands at local index ``(nrows // 2, ncols // 2)``.
    Columns wrap on global grids; rows never wrap.
    """
    spec = cube.spec
    if nrows < 1 or ncols < 1:
        raise DataError("window must have at least one cell")
    ci, cj = nearest_node_index(center, spec)
    i0 = ci - nrows // 2
    j0 = cj - ncols // 2
    if i0 < 0 or i0 + nrows > spec.nlat:
        raise OutOfBounds(f"window rows [{i0}, {i0 + nrows}) leave grid of {spec.nlat} rows")
    cols = np.arange(j0, j0 + ncols)
    if spec.is_global:
        if ncols > spec.nlon:
            raise OutOfBounds("window wider than the globe")
        cols = np.mod(cols, spec.nlon)
    elif j0 < 0 or j0 + ncols > spec.nlon:
        raise OutOfBounds(f"window cols [{j0}, {j0 + ncols}) leave grid of {spec.nlon} cols")
    data = cube.data[:, i0:i0 + nrows][:, :, cols]
    lat0, lon0 = index_to_latlon((i0, j0), spec)
    # 1-row/1-col windows are legal crops but not legal GridSpecs on their own
    new_spec = _window_spec(lat0, lon0, spec, nrows, ncols)
    return FieldCube(new_spec, cube.variables, data, cube.timestamp)


def _window_spec(lat0, lon0, spec, nrows, ncols):
    if nrows >= 2 and ncols >= 2:
        return GridSpec(lat0, lon0, spec.dlat, spec.dlon, nrows, ncols, spec.north_first)
    return _DegenerateSpec(lat0, lon0, spec.dlat, spec.dlon, nrows, ncols, spec.north_first)


@dataclass(frozen=True)
class _DegenerateSpec(GridSpec):
    """Window spec allowed to be a single row or column."""

    def __post_init__(self):
        object.__setattr__(self, "lon0", wrap_lon(float(self.lon0)))


def crop_window(cube: FieldCube, center, half_cells: int) -> FieldCube:
    """Square ``(2*half_cells + 1)``-cell window centred on the nearest node."""
    n = 2 * int(half_cells) + 1
    return crop_box(cube, center, n, n)


# --- BGC1 container ---------------------------------------------------------

BGC1_MAGIC = b"BGC1"
BGC1_VERSION = 1
_HEADER = struct.Struct("<4sIIIIB7xddddq")


def encode_grid(cube: FieldCube) -> bytes:
    spec = cube.spec
    header = _HEADER.pack(
        BGC1_MAGIC,
        BGC1_VERSION,
        len(cube.variables),
        spec.nlat,
        spec.nlon,
        0 if spec.north_first else 1,
        spec.lat0,
        spec.lon0,
        spec.dlat,
        spec.dlon,
        cube.epoch_seconds,
    )
    tags = struct.pack(f"<{len(cube.variables)}H", *[int(v) for v in cube.variables])
    return header + tags + cube.data.astype("<f4").tobytes()


def decode_grid(buf: bytes) -> FieldCube:
    if len(buf) < 4 or buf[:4] != BGC1_MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[:4])!r}", 0)
    if len(buf) < _HEADER.size:
        raise TruncatedPayload(f"header needs {_HEADER.size} bytes, file has {len(buf)}", len(buf))
    (_, version, nvars, nlat, nlon, orient, lat0, lon0, dlat, dlon, ts) = _HEADER.unpack_from(buf, 0)
    if version != BGC1_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if nvars < 1 or nlat < 2 or nlon < 2:
        raise DimMismatch(f"invalid dimensions nvars={nvars} nlat={nlat} nlon={nlon}", 8)
    if orient not in (0, 1):
        raise DimMismatch(f"invalid orientation flag {orient}", 20)
    off = _HEADER.size
    tag_end = off + 2 * nvars
    if len(buf) < tag_end:
        raise TruncatedPayload("variable tag table truncated", len(buf))
    tags = struct.unpack_from(f"<{nvars}H", buf, off)
    variables = []
    for k, tag in enumerate(tags):
        try:
            variables.append(Var.from_tag(tag))
        except UnknownVariable:
            raise UnknownVariable(f"unknown variable tag {tag} at byte offset {off + 2 * k}") from None
    n = nvars * nlat * nlon
    end = tag_end + 4 * n
    if len(buf) < end:
        raise TruncatedPayload(
            f"payload needs {4 * n} bytes, found {len(buf) - tag_end}", len(buf)
        )
    if len(buf) > end:
        raise DimMismatch(f"{len(buf) - end} trailing bytes after payload", end)
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=tag_end).reshape(nvars, nlat, nlon)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise NonFiniteInput(f"non-finite value at byte offset {tag_end + 4 * bad}")
    try:
        spec = GridSpec(lat0, lon0, dlat, dlon, nlat, nlon, north_first=(orient == 0))
    except DataError as exc:
        raise DimMismatch(f"invalid grid geometry: {exc}", 24) from None
    stamp = datetime.fromtimestamp(ts, tz=timezone.utc)
    return FieldCube(spec, tuple(variables), data, stamp)


def write_grid_file(cube: FieldCube, path) -> None:
    Path(path).write_bytes(encode_grid(cube))


def read_grid_file(path) -> FieldCube:
    return decode_grid(Path(path).read_bytes())


# --- best track ---------------------------------------------------------------

BESTTRACK_HEADER = ("storm_id", "basin", "timestamp", "lat", "lon", "max_wind_ms", "min_pres_hpa")
TIME_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


def format_time(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(TIME_FORMAT)


def parse_time(text: str) -> datetime:
    return datetime.strptime(text.strip(), TIME_FORMAT).replace(tzinfo=timezone.utc)


@dataclass(frozen=True)
class BestTrackRecord:
    storm_id: str
    basin: str
    timestamp: datetime
    lat: float
    lon: float
    max_wind: float
    min_pressure: Optional[float] = None

    def __post_init__(self):
        if not self.storm_id:
            raise DataError("empty storm_id")
        if self.basin not in BASINS:
            raise DataError(f"unknown basin {self.basin!r}")
        if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
            raise DataError(f"latitude {self.lat} outside [-90, 90]")
        if not math.isfinite(self.lon):
            raise DataError(f"non-finite longitude {self.lon}")
        if not (math.isfinite(self.max_wind) and self.max_wind >= 0):
            raise DataError(f"max wind {self.max_wind} must be >= 0")
        if self.min_pressure is not None and not (800.0 < self.min_pressure < 1100.0):
            raise DataError(f"min pressure {self.min_pressure} outside (800, 1100) hPa")
        object.__setattr__(self, "lon", wrap_lon(float(self.lon)))

    @property
    def key(self):
        return (self.storm_id, self.timestamp)


def read_besttrack_csv(path) -> list[BestTrackRecord]:
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != BESTTRACK_HEADER:
            raise ParseError(f"header must be {','.join(BESTTRACK_HEADER)}", 1)
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(BESTTRACK_HEADER):
                raise ParseError(f"expected {len(BESTTRACK_HEADER)} columns, got {len(row)}", row_no)
            sid, basin, ts, lat, lon, wind, pres = (c.strip() for c in row)
            try:
                rec = BestTrackRecord(
                    storm_id=sid,
                    basin=basin,
                    timestamp=parse_time(ts),
                    lat=float(lat),
                    lon=float(lon),
                    max_wind=float(wind),
                    min_pressure=float(pres) if pres else None,
                )
            except (ValueError, DataError) as exc:
                raise ParseError(str(exc), row_no) from None
            if rec.key in seen:
                raise DuplicateFix(f"row {row_no}: duplicate fix {sid} at {ts}")
            seen.add(rec.key)
            records.append(rec)
    records.sort(key=lambda r: (r.storm_id, r.timestamp))
    return records


def write_besttrack_csv(records: Sequence[BestTrackRecord], path) -> None:
    rows = sorted(records, key=lambda r: (r.storm_id, r.timestamp))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BESTTRACK_HEADER)
        for r in rows:
            w.writerow([
                r.storm_id,
                r.basin,
                format_time(r.timestamp),
                repr(float(r.lat)),
                repr(float(r.lon)),
                repr(float(r.max_wind)),
                "" if r.min_pressure is None else repr(float(r.min_pressure)),
            ])

