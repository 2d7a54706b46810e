"""Seeded synthetic benchmarks for the correction and intensity models.

Both benchmarks render small storm-centred windows straight from the
scenario scripts instead of cropping full working domains, which keeps a
200-storm run inside a few minutes on one core.

The tracker in the correction benchmark is an emulation: the prior fix is
the grid node nearest ``truth + bias + noise`` on each axis, i.e. a
grid-locked kinematic tracker with a known systematic error. Every lead
uses the same error model, so all leads are "24 h equivalent".
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .correction.model import (
    CorrectionConfig,
    NormStats,
    TrackSample,
    TrainConfig,
    default_net,
    refine_batch,
    split_by_storm,
    train,
)
from .errors import EmptySet
from .geo import haversine_km, lon_diff, wrap_lon
from .gridstore import ALL_VARS, FieldCube, GridSpec, Var
from .intensity import (
    IntensityConfig,
    RegionPartition,
    calibrate,
    coupled_lookup,
    intensity_labels,
    intensity_net,
    make_partition,
    predict_batch,
    region_of,
    train_intensity,
)
from .synth import SyntheticDataset, gen_dataset, render_domain


def node_window_spec(center_node, half_cells: int, cell: float) -> GridSpec:
    """Odd ``2*half+1`` window whose middle node is ``center_node``."""
    n = 2 * half_cells + 1
    return GridSpec(center_node[0] + half_cells * cell, wrap_lon(center_node[1] - half_cells * cell),
                    cell, cell, n, n)


def even_window_spec(center_node, cells: int, cell: float) -> GridSpec:
    """Even ``cells`` window with ``center_node`` at index ``cells // 2``."""
    h = cells // 2
    return GridSpec(center_node[0] + h * cell, wrap_lon(center_node[1] - h * cell), cell, cell, cells, cells)


def snap(lat: float, lon: float, cell: float) -> tuple[float, float]:
    return round(lat / cell) * cell, wrap_lon(round(lon / cell) * cell)


# --- correction -------------------------------------------------------------------

@dataclass(frozen=True)
class TrackBenchmark:
    seed: int = 7
    n_storms: int = 200
    bias_deg: float = 0.2
    noise_deg: float = 0.1
    half_cells: int = 8
    val_frac: float = 0.3
    epochs: int = 15
    lr: float = 1e-3
    batch: int = 16
    leads: Optional[tuple] = None


@dataclass
class TrackBenchmarkResult:
    head: str
    n_train: int
    n_test: int
    raw_km: float
    refined_km: float
    bias_lat_deg: float
    bias_lon_deg: float
    by_lead: dict
    train_seconds: float
    params: object = field(repr=False, default=None)
    cfg: object = field(repr=False, default=None)

    @property
    def improvement_pct(self) -> float:
        return 100.0 * (self.raw_km - self.refined_km) / self.raw_km

    @property
    def bias_deg(self) -> float:
        return float(np.hypot(self.bias_lat_deg, self.bias_lon_deg))


def biased_prior(truth, bias: float, noise: float, rng, cell: float):
    return snap(truth[0] + bias + rng.normal(0.0, noise), truth[1] + bias + rng.normal(0.0, noise), cell)


def track_samples(ds: SyntheticDataset, bench: TrackBenchmark, variables=ALL_VARS) -> list[TrackSample]:
    rng = np.random.default_rng([bench.seed, 1])
    out = []
    for s in ds.storms:
        cell = s.script.cell_deg
        for lead in (bench.leads or s.script.lead_hours):
            p = s.truth(lead)
            prior = biased_prior((p.lat, p.lon), bench.bias_deg, bench.noise_deg, rng, cell)
            spec = node_window_spec(prior, bench.half_cells, cell)
            cube = render_domain(s.script, lead, spec=spec).select(variables)
            out.append(TrackSample(s.storm_id, float(lead), cube, spec.node(bench.half_cells, bench.half_cells),
                                   (p.lat, p.lon)))
    return out


def split_samples(samples, val_frac: float, seed: int):
    tr_ids, te_ids = split_by_storm([s.storm_id for s in samples], val_frac, seed)
    tr_ids = set(tr_ids)
    return [s for s in samples if s.storm_id in tr_ids], [s for s in samples if s.storm_id not in tr_ids]


def evaluate_refinement(points, samples) -> dict:
    if not samples:
        raise EmptySet("no evaluation samples")
    raw = np.array([haversine_km(s.prior, s.truth) for s in samples])
    ref = np.array([haversine_km(q, s.truth) for q, s in zip(points, samples)])
    dlat = np.array([q[0] - s.truth[0] for q, s in zip(points, samples)])
    dlon = np.array([lon_diff(q[1], s.truth[1]) for q, s in zip(points, samples)])
    leads = np.array([s.lead_h for s in samples])
    by_lead = {int(l): (int((leads == l).sum()), float(raw[leads == l].mean()), float(ref[leads == l].mean()))
               for l in sorted(set(leads.tolist()))}
    return {"raw_km": float(raw.mean()), "refined_km": float(ref.mean()), "bias_lat_deg": float(dlat.mean()),
            "bias_lon_deg": float(dlon.mean()), "by_lead": by_lead}


def run_track_benchmark(bench: TrackBenchmark = TrackBenchmark(), head: str = "density",
                        samples: Optional[tuple] = None) -> TrackBenchmarkResult:
    """Train one head on the training storms and score it on held-out storms.

    ``samples`` may pass a precomputed ``(train, test)`` split so several
    heads share identical data.
    """
    if samples is None:
        ds = gen_dataset(bench.seed, bench.n_storms)
        samples = split_samples(track_samples(ds, bench), bench.val_frac, bench.seed)
    trs, tes = samples
    stats = NormStats.fit([s.window for s in trs], trs[0].window.variables)
    cfg = CorrectionConfig(default_net(len(stats.variables), head), stats, bench.half_cells)
    tc = TrainConfig(lr=bench.lr, epochs=bench.epochs, batch=bench.batch, seed=bench.seed)
    t0 = time.perf_counter()
    res = train(trs, cfg, tc, tes)
    dt = time.perf_counter() - t0
    ev = evaluate_refinement(refine_batch(res.params, cfg, tes), tes)
    return TrackBenchmarkResult(head, len(trs), len(tes), train_seconds=dt, params=res.params, cfg=cfg, **ev)


# --- intensity coupling -------------------------------------------------------------

INTENSITY_VARS = (Var.U10, Var.V10, Var.MSL, Var.U850, Var.V850, Var.T2M, Var.TCWV)


@dataclass(frozen=True)
class CouplingBenchmark:
    seed: int = 11
    n_storms: int = 60
    window_cells: int = 32
    p: int = 4
    N: int = 0
    unrefined_bias_deg: float = 0.4
    unrefined_noise_deg: float = 0.15
    refined_noise_deg: float = 0.03
    val_frac: float = 0.3
    epochs: int = 20
    lr: float = 2e-3
    batch: int = 16
    hidden: tuple = ((8, 3), (16, 3), (8, 3))


@dataclass(frozen=True)
class IntensitySample:
    storm_id: str
    lead_h: float
    window: FieldCube
    truth: tuple
    truth_wind: float
    unrefined: tuple
    refined: tuple


@dataclass
class CouplingResult:
    n_train: int
    n_test: int
    frac_different: float
    coupled_mae: float
    decoupled_mae: float
    region_mae: float
    baseline_region_mae: float
    calibration: tuple
    train_seconds: float

    @property
    def region_gain_pct(self) -> float:
        return 100.0 * (self.baseline_region_mae - self.region_mae) / self.baseline_region_mae


def coupling_samples(ds: SyntheticDataset, bench: CouplingBenchmark, variables=INTENSITY_VARS):
    rng = np.random.default_rng([bench.seed, 2])
    out = []
    for s in ds.storms:
        cell = s.script.cell_deg
        for lead in s.script.lead_hours:
            p = s.truth(lead)
            unref = biased_prior((p.lat, p.lon), bench.unrefined_bias_deg, bench.unrefined_noise_deg, rng, cell)
            ref = (p.lat + rng.normal(0.0, bench.refined_noise_deg),
                   wrap_lon(p.lon + rng.normal(0.0, bench.refined_noise_deg)))
            spec = even_window_spec(unref, bench.window_cells, cell)
            cube = render_domain(s.script, lead, spec=spec).select(variables)
            out.append(IntensitySample(s.storm_id, float(lead), cube, (p.lat, p.lon), p.peak_wind, unref, ref))
    return out


def run_coupling_benchmark(bench: CouplingBenchmark = CouplingBenchmark()) -> CouplingResult:
    """Coupled (refined-centre) vs decoupled (tracker-node) region lookup."""
    ds = gen_dataset(bench.seed, bench.n_storms)
    samples = coupling_samples(ds, bench)
    trs, tes = split_samples(samples, bench.val_frac, bench.seed)
    part = make_partition(bench.window_cells, bench.window_cells, bench.p, bench.N, ds.storms[0].script.cell_deg)
    diag = [float(np.hypot(s.window.field(Var.U10), s.window.field(Var.V10)).max()) for s in trs]
    cal = calibrate(list(zip(diag, [s.truth_wind for s in trs])))
    stats = NormStats.fit([s.window for s in trs], trs[0].window.variables)
    cfg = IntensityConfig(intensity_net(len(stats.variables), part, bench.hidden), stats, part,
                          calibration=cal)
    tc = TrainConfig(lr=bench.lr, epochs=bench.epochs, batch=bench.batch, seed=bench.seed)
    t0 = time.perf_counter()
    res = train_intensity([s.window for s in trs], cfg, tc, [s.window for s in tes])
    dt = time.perf_counter() - t0
    maps = predict_batch(res.params, cfg, [s.window for s in tes])

    labels = np.stack([intensity_labels(cfg, s.window) for s in tes])
    pred = np.stack([m.values for m in maps])
    train_mean = float(np.mean([intensity_labels(cfg, s.window) for s in trs]))
    region_mae = float(np.mean(np.abs(pred - labels)))
    baseline = float(np.mean(np.abs(train_mean - labels)))

    diff = [region_of(s.refined, part, m.spec) != region_of(s.unrefined, part, m.spec) for s, m in zip(tes, maps)]
    coupled = [abs(coupled_lookup(s.refined, m) - s.truth_wind) for s, m in zip(tes, maps)]
    decoupled = [abs(coupled_lookup(s.unrefined, m) - s.truth_wind) for s, m in zip(tes, maps)]
    return CouplingResult(len(trs), len(tes), float(np.mean(diff)), float(np.mean(coupled)),
                          float(np.mean(decoupled)), region_mae, baseline, cal, dt)
