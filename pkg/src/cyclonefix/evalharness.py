"""Verification: track error, wind MAE, lead-time tables and run comparisons.

Predictions are matched to truth at exact valid times only; anything without
a truth record is counted as unmatched and kept out of the averages.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .density import KernelParams, decode_argmax, decode_expectation, encode_center
from .errors import CoverageMismatch, DataError, EmptySet
from .geo import haversine_km, haversine_km_array, lon_diff, wrap_lon
from .gridstore import GridSpec

__all__ = [
    "haversine_km", "wind_mae", "grid_locking_study", "GridLockResult", "Prediction", "Truth",
    "ForecastRun", "ErrorRow", "ErrorTable", "error_table", "compare_runs", "table_csv",
    "table_text", "comparison_csv", "write_report",
]

TABLE_HEADER = ("lead_h", "n", "track_km", "wind_mae_ms")
COMPARISON_HEADER = ("lead_h", "metric", "improvement_pct")


def wind_mae(preds, truths) -> float:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.size == 0:
        raise EmptySet("wind MAE of an empty set")
    if p.shape != t.shape:
        raise DataError(f"{p.size} predictions vs {t.size} truths")
    return float(np.mean(np.abs(p - t)))


# --- grid locking -------------------------------------------------------------------

@dataclass(frozen=True)
class GridLockResult:
    decoder: str
    n: int
    cell_deg: float
    mean_km: float
    mean_abs_dlat_deg: float
    mean_abs_dlon_deg: float
    mean_err_deg: float

    @property
    def mean_axis_deg(self) -> float:
        return 0.5 * (self.mean_abs_dlat_deg + self.mean_abs_dlon_deg)


def grid_locking_study(n_samples: int, cell_size: float = 0.25, decoder: str = "argmax", seed: int = 0,
                       base=(15.0, 130.0), offset_scale: float = 1.0,
                       kernel: KernelParams = KernelParams(), metric: str = "greatcircle") -> GridLockResult:
    """Decode exact encodings of centres with uniform sub-cell offsets.

    Each true centre sits at ``node + U(-1/2, 1/2) * cell`` (times
    ``offset_scale``) inside a small window large enough to hold the whole
    truncation disk, so the expectation decoder sees no edge clipping.
    """
    if decoder not in ("argmax", "expectation"):
        raise DataError(f"decoder must be argmax or expectation, got {decoder!r}")
    if n_samples < 1:
        raise EmptySet("grid-locking study needs at least one sample")
    rng = np.random.default_rng(seed)
    off = rng.uniform(-0.5, 0.5, size=(n_samples, 2)) * offset_scale
    half = int(math.ceil(kernel.radius / cell_size)) + 2
    n = 2 * half + 1
    lat_c = round(base[0] / cell_size) * cell_size
    lon_c = round(base[1] / cell_size) * cell_size
    spec = GridSpec(lat_c + half * cell_size, lon_c - half * cell_size, cell_size, cell_size, n, n)
    dec = decode_argmax if decoder == "argmax" else decode_expectation
    truth = np.empty((n_samples, 2))
    got = np.empty((n_samples, 2))
    for k in range(n_samples):
        t = (lat_c + off[k, 0] * cell_size, wrap_lon(lon_c + off[k, 1] * cell_size))
        truth[k] = t
        got[k] = dec(encode_center(t, spec, kernel, metric))
    dlat = np.abs(got[:, 0] - truth[:, 0])
    dlon = np.abs(lon_diff(got[:, 1], truth[:, 1]))
    km = haversine_km_array(got[:, 0], got[:, 1], truth[:, 0], truth[:, 1])
    return GridLockResult(decoder, n_samples, cell_size, float(km.mean()), float(dlat.mean()),
                          float(dlon.mean()), float(np.mean(km) * 180.0 / (math.pi * 6371.0)))


# --- runs -------------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    storm_id: str
    lead_h: int
    valid_time: str
    lat: float
    lon: float
    max_wind: Optional[float] = None

    def to_dict(self) -> dict:
        return {"storm_id": self.storm_id, "lead_h": int(self.lead_h), "valid_time": self.valid_time,
                "lat": float(self.lat), "lon": float(self.lon),
                "max_wind": None if self.max_wind is None else float(self.max_wind)}


@dataclass(frozen=True)
class Truth:
    storm_id: str
    valid_time: str
    lat: float
    lon: float
    max_wind: Optional[float] = None

    def to_dict(self) -> dict:
        return {"storm_id": self.storm_id, "valid_time": self.valid_time, "lat": float(self.lat),
                "lon": float(self.lon), "max_wind": None if self.max_wind is None else float(self.max_wind)}


@dataclass
class ForecastRun:
    run_id: str
    config: dict = field(default_factory=dict)
    predictions: list = field(default_factory=list)
    truths: list = field(default_factory=list)

    def truth_index(self) -> dict:
        idx = {}
        for t in self.truths:
            key = (t.storm_id, t.valid_time)
            if key in idx:
                raise DataError(f"duplicate truth for {key}")
            idx[key] = t
        return idx

    def matched(self) -> tuple[list[tuple[Prediction, Truth]], list[Prediction]]:
        idx = self.truth_index()
        pairs, unmatched = [], []
        seen = set()
        for p in self.predictions:
            key = (p.storm_id, p.valid_time)
            if key in seen:
                raise DataError(f"duplicate prediction for {key}")
            seen.add(key)
            t = idx.get(key)
            if t is None:
                unmatched.append(p)
            else:
                pairs.append((p, t))
        return pairs, unmatched

    def to_json(self) -> str:
        doc = {
            "run_id": self.run_id,
            "config": {k: self.config[k] for k in sorted(self.config)},
            "predictions": [p.to_dict() for p in sorted(self.predictions, key=lambda p: (p.storm_id, p.lead_h))],
            "truth": [t.to_dict() for t in sorted(self.truths, key=lambda t: (t.storm_id, t.valid_time))],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ForecastRun":
        try:
            doc = json.loads(text)
            preds = [Prediction(**d) for d in doc["predictions"]]
            truths = [Truth(**d) for d in doc.get("truth", [])]
            return cls(doc["run_id"], dict(doc.get("config", {})), preds, truths)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed run file: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ForecastRun":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


# --- tables ---------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorRow:
    lead_h: int
    n: int
    track_km: float
    wind_mae_ms: float
    unmatched: int = 0


@dataclass
class ErrorTable:
    rows: list
    unmatched: int = 0

    def row(self, lead_h: int) -> ErrorRow:
        for r in self.rows:
            if r.lead_h == lead_h:
                return r
        raise KeyError(lead_h)

    def count_increases(self) -> list[int]:
        """Leads whose sample count exceeds the previous lead's."""
        return [b.lead_h for a, b in zip(self.rows, self.rows[1:]) if b.n > a.n]


def _pair_errors(pairs):
    km = np.array([haversine_km((p.lat, p.lon), (t.lat, t.lon)) for p, t in pairs])
    w = [(p.max_wind, t.max_wind) for p, t in pairs if p.max_wind is not None and t.max_wind is not None]
    return km, w


def error_table(run: ForecastRun) -> ErrorTable:
    pairs, unmatched = run.matched()
    leads = sorted({p.lead_h for p in run.predictions})
    rows = []
    for lead in leads:
        sub = [(p, t) for p, t in pairs if p.lead_h == lead]
        um = sum(1 for p in unmatched if p.lead_h == lead)
        if not sub:
            rows.append(ErrorRow(lead, 0, math.nan, math.nan, um))
            continue
        km, w = _pair_errors(sub)
        mae = wind_mae([a for a, _ in w], [b for _, b in w]) if w else math.nan
        rows.append(ErrorRow(lead, len(sub), float(km.mean()), mae, um))
    return ErrorTable(rows, len(unmatched))


def _coverage(run: ForecastRun):
    pairs, _ = run.matched()
    return {(p.storm_id, p.lead_h) for p, _ in pairs}


def compare_runs(a: ForecastRun, b: ForecastRun) -> list[tuple[int, str, float]]:
    """Per-lead ``100 * (err_b - err_a) / err_b``; positive favours ``a``."""
    if _coverage(a) != _coverage(b):
        raise CoverageMismatch("runs cover different (storm, lead) pairs")
    ta, tb = error_table(a), error_table(b)
    out = []
    for ra in ta.rows:
        if ra.n == 0:
            continue
        rb = tb.row(ra.lead_h)
        for metric in ("track_km", "wind_mae_ms"):
            ea, eb = getattr(ra, metric), getattr(rb, metric)
            if math.isnan(ea) or math.isnan(eb):
                continue
            if eb == 0.0:
                pct = 0.0 if ea == 0.0 else -math.inf
            else:
                pct = 100.0 * (eb - ea) / eb
            out.append((ra.lead_h, metric, pct))
    return out


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def table_csv(table: ErrorTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for r in table.rows:
        w.writerow([r.lead_h, r.n, _fmt(r.track_km), _fmt(r.wind_mae_ms)])
    return buf.getvalue()


def table_text(table: ErrorTable) -> str:
    head = ("lead_h", "n", "track_km", "wind_mae_ms", "unmatched")
    body = [(str(r.lead_h), str(r.n), _fmt(r.track_km)[:-3], _fmt(r.wind_mae_ms)[:-3], str(r.unmatched))
            for r in table.rows]
    widths = [max(len(h), *(len(row[k]) for row in body)) if body else len(h) for k, h in enumerate(head)]
    lines = ["  ".join(h.rjust(wd) for h, wd in zip(head, widths))]
    lines += ["  ".join(c.rjust(wd) for c, wd in zip(row, widths)) for row in body]
    lines.append(f"unmatched predictions: {table.unmatched}")
    return "\n".join(lines) + "\n"


def comparison_csv(rows: Sequence[tuple[int, str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_HEADER)
    for lead, metric, pct in rows:
        w.writerow([lead, metric, _fmt(pct)])
    return buf.getvalue()


def write_report(out_dir, run: ForecastRun, baseline: Optional[ForecastRun] = None) -> dict:
    """Write ``errors.csv``, ``errors.txt`` and, with a baseline, ``comparison.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = error_table(run)
    written = {"errors.csv": table_csv(table), "errors.txt": table_text(table)}
    if baseline is not None:
        written["comparison.csv"] = comparison_csv(compare_runs(run, baseline))
    for name, text in written.items():
        (out / name).write_text(text, encoding="utf-8")
    return written
