"""Acceptance criteria AC-1 .. AC-10.

Each test records one ``AC-n PASS|FAIL <detail>`` line. The lines are
printed as they are produced (visible with ``-s``) and repeated in the
terminal summary, then the test asserts the criterion.
"""

import math
import time
from datetime import datetime, timezone

import numpy as np
import pytest

from conftest import AC_LINES
from cyclonefix.benchmark import CouplingBenchmark, TrackBenchmark, run_coupling_benchmark, run_track_benchmark
from cyclonefix.benchmark import split_samples, track_samples
from cyclonefix.correction.model import (
    NormStats,
    TrainConfig,
    decode_checkpoint,
    encode_checkpoint,
    train_arrays,
)
from cyclonefix.correction.nn import ConvStackConfig, Parameters, init_params, net_backward, net_forward
from cyclonefix.density import (
    DensityField,
    KernelParams,
    decode_expectation,
    encode_center,
    kl_divergence,
    softmax_normalize,
)
from cyclonefix.errors import RegionTooLarge
from cyclonefix.evalharness import ForecastRun, Prediction, Truth, error_table, grid_locking_study, haversine_km
from cyclonefix.evalharness import table_csv, write_report
from cyclonefix.gridstore import GridSpec, Var, decode_grid, encode_grid
from cyclonefix.intensity import basin_stats, make_partition
from cyclonefix.synth import (
    ScenarioScript,
    StormScript,
    VortexParams,
    dataset_hash,
    downsample,
    fine_spec,
    gen_dataset,
    render_field,
    wind_speed,
    write_dataset,
)
from test_correction import NET_CASES, max_rel_err, numeric_grad


def record(ac: str, ok: bool, detail: str) -> None:
    line = f"{ac} {'PASS' if ok else 'FAIL'} {detail}"
    AC_LINES.append(line)
    print(line)
    assert ok, line


# --- AC-1 ---------------------------------------------------------------------------

def test_ac1_metric_fidelity():
    a = haversine_km((0.0, 0.0), (1.0, 0.0))
    b = haversine_km((0.0, 0.0), (0.0, 90.0))
    ea = abs(a - 6371 * math.pi / 180) / (6371 * math.pi / 180)
    eb = abs(b - 6371 * math.pi / 2) / (6371 * math.pi / 2)
    ok = ea < 1e-9 and eb < 1e-9 and round(a, 3) == 111.195 and round(b, 3) == 10007.543
    record("AC-1", ok, f"1deg arc {a:.6f} km (rel {ea:.1e}), quarter circle {b:.6f} km (rel {eb:.1e})")


# --- AC-2 ---------------------------------------------------------------------------

def test_ac2_grid_locking():
    t0 = time.perf_counter()
    am = grid_locking_study(10_000, 0.25, "argmax", seed=0)
    ex = grid_locking_study(10_000, 0.25, "expectation", seed=0)
    dt = time.perf_counter() - t0
    ok_axes = all(abs(v - 0.0625) <= 0.05 * 0.0625 for v in (am.mean_abs_dlat_deg, am.mean_abs_dlon_deg))
    ok = ok_axes and ex.mean_err_deg < 0.005 and dt < 10
    record("AC-2", ok, f"argmax per-axis {am.mean_abs_dlat_deg:.5f}/{am.mean_abs_dlon_deg:.5f} deg, "
                       f"expectation {ex.mean_err_deg:.5f} deg, {dt:.1f} s")


# --- AC-3 / AC-4 ----------------------------------------------------------------------

BENCH = TrackBenchmark()


@pytest.fixture(scope="module")
def track_bench():
    t0 = time.perf_counter()
    ds = gen_dataset(BENCH.seed, BENCH.n_storms)
    samples = split_samples(track_samples(ds, BENCH), BENCH.val_frac, BENCH.seed)
    prep = time.perf_counter() - t0
    results = {}
    for head in ("density", "residual"):
        t = time.perf_counter()
        results[head] = run_track_benchmark(BENCH, head, samples)
        results[head].wall = prep + time.perf_counter() - t
    return results


@pytest.mark.slow
def test_ac3_learned_correction(track_bench):
    r = track_bench["density"]
    ok = r.improvement_pct >= 20.0 and r.bias_deg < 0.05 and r.wall < 600
    record("AC-3", ok, f"density head {r.raw_km:.1f} -> {r.refined_km:.1f} km ({r.improvement_pct:.1f}% better), "
                       f"residual bias {r.bias_deg:.4f} deg, {r.n_test} test samples, {r.wall:.0f} s")


@pytest.mark.slow
def test_ac4_ablation_directionality(track_bench):
    d, s = track_bench["density"], track_bench["residual"]
    dk, sk = d.by_lead[24][2], s.by_lead[24][2]
    margins = ", ".join(f"{lead}h {d.by_lead[lead][2]:.1f}/{s.by_lead[lead][2]:.1f}" for lead in (6, 24, 48, 72))
    record("AC-4", dk <= sk, f"24 h prob {dk:.2f} km <= res {sk:.2f} km (prob/res: {margins})")


# --- AC-5 ---------------------------------------------------------------------------

def test_ac5_gradient_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(0)
    for kw in NET_CASES:
        cfg = ConvStackConfig(in_channels=2, hidden=((3, 3), (2, 3)), **kw)
        params = init_params(cfg, 1)
        if cfg.head == "region":
            params.vector[-1] = 2.0
        x = rng.normal(size=(2, 2, 6, 6))
        out, cache = net_forward(params, cfg, x)
        R = rng.normal(size=out.shape)
        a = net_backward(params, cfg, cache, R)
        n = numeric_grad(lambda t: float(np.sum(net_forward(Parameters(t, params.table), cfg, x)[0] * R)),
                         params.vector.copy())
        worst = max(worst, max_rel_err(a, n))
    dt = time.perf_counter() - t0
    record("AC-5", worst < 1e-4 and dt < 30,
           f"max relative error {worst:.2e} over {len(NET_CASES)} layer/head configurations, {dt:.1f} s")


# --- AC-6 ---------------------------------------------------------------------------

def test_ac6_density_properties():
    rng = np.random.default_rng(6)
    spec = GridSpec(20.0, 130.0, 0.25, 0.25, 9, 9)
    sums, kls, selfs, shifts = [], [], [], []
    for _ in range(200):
        a, b = rng.normal(size=spec.shape) * 3, rng.normal(size=spec.shape) * 3
        p, q = softmax_normalize(a, spec), softmax_normalize(b, spec)
        sums.append(abs(p.w.sum() - 1))
        kls.append(kl_divergence(p, q))
        selfs.append(kl_divergence(p, p))
        shifts.append(np.abs(softmax_normalize(a + rng.uniform(-500, 500), spec).w - p.w).max())
        t = spec.node(4, 4)
        sums.append(abs(encode_center((t[0] + rng.uniform(-0.1, 0.1), t[1]), spec).w.sum() - 1))
    w = np.zeros(spec.shape)
    w[4, 4] = w[4, 5] = 0.5
    lat, lon = decode_expectation(DensityField(spec, w))
    mid = 0.5 * (spec.node(4, 4)[1] + spec.node(4, 5)[1])
    ok = (max(sums) < 1e-9 and min(kls) >= 0 and max(selfs) == 0.0 and max(shifts) < 1e-12
          and abs(lon - mid) < 1e-9 and abs(lat - spec.node(4, 4)[0]) < 1e-12)
    record("AC-6", ok, f"max |sum-1| {max(sums):.1e}, min KL {min(kls):.3f}, max KL(P,P) {max(selfs)}, "
                       f"max shift change {max(shifts):.1e}, midpoint error {abs(lon - mid):.1e} deg")


# --- AC-7 ---------------------------------------------------------------------------

def test_ac7_partition_law():
    ok_dims = all(
        make_partition(a * 2 ** N * p, b * 2 ** N * p, p, N, 0.25).rows == a
        and make_partition(a * 2 ** N * p, b * 2 ** N * p, p, N, 0.25).cols == b
        for p in (1, 2, 4, 8) for N in (0, 1, 2, 3) for a in (1, 2, 4) for b in (1, 3)
    )
    ok_ex = make_partition(64, 64, 4, 2, 0.25).rows == 4
    limits = {}
    ok_lim = True
    for basin, expected in (("WP", 1.1233), ("EP", 0.40), ("NI", 5.4567)):
        lim = basin_stats(basin).region_limit_deg
        limits[basin] = lim
        ok_lim &= abs(lim - expected) < 5e-5
        cell = lim / 4
        try:
            make_partition(8, 8, 4, 0, cell, basin_stats(basin))
            ok_lim = False
        except RegionTooLarge:
            pass
        make_partition(8, 8, 4, 0, cell * (1 - 1e-12), basin_stats(basin))
    detail = ", ".join(f"{b} {v:.4f} deg" for b, v in limits.items())
    record("AC-7", ok_dims and ok_ex and ok_lim, f"H/(2^N p) holds on 96 cases, 64/4/2 -> 4, limits {detail}")


# --- AC-8 ---------------------------------------------------------------------------

def smoothing_drop(b: float, off) -> float:
    p = VortexParams(15.0 + off[0], 130.0 + off[1], 50.0, 30.0, b, 1010.0, 50.0)
    script = ScenarioScript("v", "straight", (StormScript("A", "WP", ((0.0, p), (6.0, p))),),
                            datetime(2024, 1, 1, tzinfo=timezone.utc), (6,))
    spec = GridSpec(17.0, 128.0, 0.25, 0.25, 16, 16)
    fine = render_field(script, 0.0, fine_spec(spec, 5), (Var.U10, Var.V10))
    return 1.0 - wind_speed(downsample(fine, 5)).max() / wind_speed(fine).max()


def test_ac8_smoothing_direction():
    offs = [(0.0, 0.0), (0.1, 0.08), (-0.07, 0.12), (0.125, -0.125), (0.03, -0.05)]
    drops = [smoothing_drop(2.5, o) for o in offs]
    flat = [smoothing_drop(1.0, o) for o in offs]
    record("AC-8", min(drops) > 0.10,
           f"r_max 30 km, b 2.5: max-wind drop {100 * min(drops):.1f}-{100 * max(drops):.1f}% over 5 positions "
           f"(b 1.0 for reference: {100 * min(flat):.1f}-{100 * max(flat):.1f}%)")


# --- AC-9 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_ac9_coupling_benefit():
    t0 = time.perf_counter()
    r = run_coupling_benchmark(CouplingBenchmark())
    dt = time.perf_counter() - t0
    ok = r.frac_different >= 0.30 and r.coupled_mae <= r.decoupled_mae and dt < 300
    record("AC-9", ok, f"{100 * r.frac_different:.0f}% of {r.n_test} samples switch region, coupled MAE "
                       f"{r.coupled_mae:.2f} <= decoupled {r.decoupled_mae:.2f} m/s; region model "
                       f"{r.region_gain_pct:.0f}% below global mean, {dt:.0f} s")


# --- AC-10 --------------------------------------------------------------------------

def test_ac10_determinism_and_formats(tmp_path):
    write_dataset(gen_dataset(13, 3, lead_hours=(6, 12)), tmp_path / "a")
    write_dataset(gen_dataset(13, 3, lead_hours=(6, 12)), tmp_path / "b")
    same_data = dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")

    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(6, 3, 7, 7)), rng.normal(size=(6, 2)) * 0.1
    net = ConvStackConfig(in_channels=3, hidden=((4, 3),), head="residual")
    tc = TrainConfig(epochs=3, batch=2, seed=4)
    ck = [encode_checkpoint(train_arrays(net, x, y, tc).params, {"seed": 4}) for _ in range(2)]
    same_ckpt = ck[0] == ck[1]
    ckpt_rt = encode_checkpoint(*decode_checkpoint(ck[0])) == ck[0]

    run = ForecastRun("r", {}, [Prediction("S", 6, "2024-01-01T06:00:00Z", 15.1, 130.2, 33.0)],
                      [Truth("S", "2024-01-01T06:00:00Z", 15.0, 130.0, 35.0)])
    write_report(tmp_path / "r1", run, run)
    write_report(tmp_path / "r2", run, run)
    same_csv = all((tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
                   for f in ("errors.csv", "comparison.csv"))

    bgc = sorted((tmp_path / "a").rglob("*.bgc"))
    bgc_rt = all(encode_grid(decode_grid(p.read_bytes())) == p.read_bytes() for p in bgc)
    ok = same_data and same_ckpt and ckpt_rt and same_csv and bgc_rt and bool(bgc)
    record("AC-10", ok, f"dataset hash equal {same_data}, checkpoint bytes equal {same_ckpt}, CSV bytes equal "
                        f"{same_csv}, BGC1 round trip {bgc_rt} ({len(bgc)} files), checkpoint round trip {ckpt_rt}")
