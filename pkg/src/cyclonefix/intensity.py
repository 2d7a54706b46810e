"""Region-aware maximum-wind prediction.

A storm window of ``H x W`` cells is partitioned into square regions of
``2**N * p`` cells, matching what ``N`` patch-merging stages after a
``p``-cell patch embedding would produce. A model predicts the maximum
sustained wind of every region; the final intensity is read from the region
that contains the (refined) storm centre.

Region sides must stay below a third of the smallest distance ever observed
between two simultaneous storms in the basin, so one region never holds two
cyclones.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .correction.model import (
    NormStats,
    TrainConfig,
    TrainResult,
    load_checkpoint,
    train_arrays,
)
from .correction.nn import ConvStackConfig, Parameters, init_params, layer_table, net_forward
from .errors import (
    DataError,
    DegenerateFit,
    IndivisibleWindow,
    MissingVariable,
    OutOfBounds,
    OutOfWindow,
    RegionTooLarge,
    ShapeMismatch,
)
from .gridstore import FieldCube, GridSpec, Var, crop_box, latlon_to_fractional_index

# smallest separation (deg) between simultaneous storms, 2000-2023; None = never observed
MIN_INTER_TC_DISTANCE = {"WP": 3.37, "EP": 1.20, "NA": None, "NI": 16.37, "SI": 4.70, "SP": 5.92}

# (p, N) defaults on a 0.25 deg grid; EP's 0.40 deg limit forces single-cell regions
DEFAULT_PARTITION = {"WP": (4, 0), "EP": (1, 0), "NA": (4, 0), "NI": (4, 0), "SI": (4, 0), "SP": (4, 0)}
DEFAULT_WINDOW_CELLS = 64


@dataclass(frozen=True)
class BasinStats:
    basin: str
    min_inter_tc_distance_deg: Optional[float]
    calibration: tuple = (1.0, 0.0)

    def __post_init__(self):
        a, b = self.calibration
        if not a > 0:
            raise DataError(f"calibration slope must be positive, got {a}")
        object.__setattr__(self, "calibration", (float(a), float(b)))

    @property
    def region_limit_deg(self) -> Optional[float]:
        d = self.min_inter_tc_distance_deg
        if d is None or d < 0:
            return None
        return d / 3.0


def basin_stats(basin: str, calibration=(1.0, 0.0)) -> BasinStats:
    if basin not in MIN_INTER_TC_DISTANCE:
        raise DataError(f"unknown basin {basin!r}")
    return BasinStats(basin, MIN_INTER_TC_DISTANCE[basin], calibration)


@dataclass(frozen=True)
class RegionPartition:
    p: int
    N: int
    H: int
    W: int
    cell_size_deg: float

    @property
    def region_cells(self) -> int:
        return (2 ** self.N) * self.p

    @property
    def rows(self) -> int:
        return self.H // self.region_cells

    @property
    def cols(self) -> int:
        return self.W // self.region_cells

    @property
    def region_extent_deg(self) -> float:
        return self.region_cells * self.cell_size_deg


def make_partition(H: int, W: int, p: int, N: int, cell_size_deg: float,
                   basin: Optional[BasinStats] = None) -> RegionPartition:
    if p < 1 or N < 0 or H < 1 or W < 1:
        raise DataError(f"invalid partition arguments H={H} W={W} p={p} N={N}")
    side = (2 ** N) * p
    if H % side or W % side:
        raise IndivisibleWindow(f"2^{N}*{p} = {side} does not divide {H}x{W}")
    part = RegionPartition(int(p), int(N), int(H), int(W), float(cell_size_deg))
    if basin is not None:
        limit = basin.region_limit_deg
        if limit is not None and not part.region_extent_deg < limit:
            raise RegionTooLarge(part.region_extent_deg, limit)
    return part


def default_partition(basin: str, window_cells: int = DEFAULT_WINDOW_CELLS, cell_size_deg: float = 0.25):
    p, N = DEFAULT_PARTITION[basin]
    return make_partition(window_cells, window_cells, p, N, cell_size_deg, basin_stats(basin))


@dataclass(frozen=True, eq=False)
class RegionIntensityMap:
    partition: RegionPartition
    values: np.ndarray
    spec: Optional[GridSpec] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.shape != (self.partition.rows, self.partition.cols):
            raise ShapeMismatch(f"values {v.shape} do not match {self.partition.rows}x{self.partition.cols} regions")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DataError("region intensities must be finite and nonnegative")
        if self.spec is not None and self.spec.shape != (self.partition.H, self.partition.W):
            raise ShapeMismatch("window grid does not match the partition")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def _window_wind(cube: FieldCube) -> np.ndarray:
    for v in (Var.U10, Var.V10):
        if not cube.has(v):
            raise MissingVariable(f"region truth needs {v.name}")
    return np.hypot(cube.field(Var.U10).astype(np.float64), cube.field(Var.V10).astype(np.float64))


def region_max(values: np.ndarray, part: RegionPartition) -> np.ndarray:
    R = part.region_cells
    return values.reshape(part.rows, R, part.cols, R).max(axis=(1, 3))


def region_truth(cube: FieldCube, part: RegionPartition) -> RegionIntensityMap:
    """Per-region maximum of the 10 m wind speed."""
    if cube.spec.shape != (part.H, part.W):
        raise ShapeMismatch(f"window {cube.spec.shape} does not match partition {part.H}x{part.W}")
    return RegionIntensityMap(part, region_max(_window_wind(cube), part), cube.spec)


def calibrate(pairs: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares ``best_track ~ a * grid_diagnosed + b``."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    x, y = arr[:, 0], arr[:, 1]
    if len(np.unique(x)) < 2:
        raise DegenerateFit("need at least two distinct grid-diagnosed winds")
    A = np.column_stack([x, np.ones_like(x)])
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(a), float(b)


def apply_calibration(values, calibration) -> np.ndarray:
    a, b = calibration
    return np.maximum(a * np.asarray(values, dtype=np.float64) + b, 0.0)


def write_calibration_csv(path, rows: Sequence[tuple[str, float, float, int]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["basin", "a", "b", "n_pairs"])
        for basin, a, b, n in rows:
            w.writerow([basin, repr(float(a)), repr(float(b)), int(n)])


def read_calibration_csv(path) -> dict[str, tuple[float, float, int]]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["basin", "a", "b", "n_pairs"]:
            raise DataError(f"{path}: header must be basin,a,b,n_pairs")
        for row in reader:
            out[row["basin"]] = (float(row["a"]), float(row["b"]), int(row["n_pairs"]))
    return out


def region_of(center, part: RegionPartition, spec: GridSpec) -> tuple[int, int]:
    """Region ``(row, col)`` containing ``center``.

    Cells are half-open, so a point on a region boundary belongs to the
    region with the larger index; the far window edge stays in the last
    region.
    """
    try:
        fi, fj = latlon_to_fractional_index(center, spec)
    except OutOfBounds as exc:
        raise OutOfWindow(str(exc)) from None
    R = part.region_cells
    r = min(int(math.floor((fi + 0.5) / R)), part.rows - 1)
    c = min(int(math.floor((fj + 0.5) / R)), part.cols - 1)
    return max(r, 0), max(c, 0)


def coupled_lookup(center, imap: RegionIntensityMap) -> float:
    if imap.spec is None:
        raise DataError("intensity map carries no window grid")
    r, c = region_of(center, imap.partition, imap.spec)
    return float(imap.values[r, c])


# --- model --------------------------------------------------------------------------

@dataclass(frozen=True)
class IntensityConfig:
    net: ConvStackConfig
    stats: NormStats
    partition: RegionPartition
    basin: str = "WP"
    calibration: tuple = (1.0, 0.0)
    calibrate_labels: bool = True

    def __post_init__(self):
        if self.net.head != "region" or self.net.region_size != self.partition.region_cells:
            raise DataError("intensity net needs a region head sized to the partition")
        if self.net.in_channels != len(self.stats.variables):
            raise ShapeMismatch("net input channels must match the variable list")

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "stats": self.stats.to_dict(),
            "partition": asdict(self.partition),
            "basin": self.basin,
            "calibration": list(self.calibration),
            "calibrate_labels": self.calibrate_labels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityConfig":
        return cls(ConvStackConfig.from_dict(d["net"]), NormStats.from_dict(d["stats"]),
                   RegionPartition(**d["partition"]), d["basin"], tuple(d["calibration"]),
                   bool(d.get("calibrate_labels", True)))


def intensity_net(n_variables: int, part: RegionPartition, hidden=((16, 3), (32, 3), (16, 3)),
                  pool: str = "max") -> ConvStackConfig:
    return ConvStackConfig(in_channels=n_variables, hidden=hidden, activation="relu", head="region",
                           region_size=part.region_cells, pool=pool)


def crop_intensity_window(cube: FieldCube, center, part: RegionPartition) -> FieldCube:
    return crop_box(cube, center, part.H, part.W)


def intensity_labels(cfg: IntensityConfig, window: FieldCube) -> np.ndarray:
    raw = region_truth(window, cfg.partition).values
    return apply_calibration(raw, cfg.calibration) if cfg.calibrate_labels else raw


def mae_loss(out: np.ndarray, target: np.ndarray):
    diff = out - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def predict_intensity(params: Parameters, cfg: IntensityConfig, features: FieldCube,
                      part: Optional[RegionPartition] = None) -> RegionIntensityMap:
    part = part or cfg.partition
    if part != cfg.partition:
        raise ShapeMismatch("partition differs from the one the model was built for")
    if features.spec.shape != (part.H, part.W):
        raise ShapeMismatch(f"window {features.spec.shape} does not match partition {part.H}x{part.W}")
    out, _ = net_forward(params, cfg.net, cfg.stats.apply(features)[None])
    values = out[0]
    if not cfg.calibrate_labels:
        values = apply_calibration(values, cfg.calibration)
    return RegionIntensityMap(part, values, features.spec)


def predict_batch(params: Parameters, cfg: IntensityConfig, windows: Sequence[FieldCube], chunk: int = 32):
    maps = []
    for a in range(0, len(windows), chunk):
        part = windows[a:a + chunk]
        out, _ = net_forward(params, cfg.net, np.stack([cfg.stats.apply(w) for w in part]))
        for w, o in zip(part, out):
            v = o if cfg.calibrate_labels else apply_calibration(o, cfg.calibration)
            maps.append(RegionIntensityMap(cfg.partition, v, w.spec))
    return maps


def train_intensity(windows: Sequence[FieldCube], cfg: IntensityConfig, tc: TrainConfig,
                    val_windows: Sequence[FieldCube] = ()) -> TrainResult:
    """Per-region MAE training; the output bias starts at the mean label."""
    if not windows:
        raise DataError("no training windows")
    x = np.stack([cfg.stats.apply(w) for w in windows])
    y = np.stack([intensity_labels(cfg, w) for w in windows])
    init = init_params(cfg.net, tc.seed)
    init.views()["head.b"][...] = float(y.mean())
    xv = yv = None
    if val_windows:
        xv = np.stack([cfg.stats.apply(w) for w in val_windows])
        yv = np.stack([intensity_labels(cfg, w) for w in val_windows])
    return train_arrays(cfg.net, x, y, tc, xv, yv, init=init, loss_fn=mae_loss)


def intensity_metadata(cfg: IntensityConfig, tc: Optional[TrainConfig] = None, **extra) -> dict:
    meta = {"kind": "intensity", "config": cfg.to_dict()}
    if tc is not None:
        meta["train"] = asdict(tc)
        meta["rng_seed"] = tc.seed
    meta.update(extra)
    return meta


def load_intensity(path) -> tuple[Parameters, IntensityConfig, dict]:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "intensity":
        raise DataError(f"{path} is not an intensity checkpoint")
    cfg = IntensityConfig.from_dict(meta["config"])
    if [tuple(s) for _, s in layer_table(cfg.net)] != [tuple(s) for _, s in params.table]:
        raise ShapeMismatch("checkpoint layers do not match its configuration")
    return params, cfg, meta
