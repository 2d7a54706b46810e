from dataclasses import replace
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclonefix.correction.model import NormStats, TrainConfig, save_checkpoint
from cyclonefix.correction.nn import zero_params
from cyclonefix.errors import (
    DataError,
    DegenerateFit,
    IndivisibleWindow,
    MissingVariable,
    OutOfWindow,
    RegionTooLarge,
    ShapeMismatch,
)
from cyclonefix.geo import haversine_km
from cyclonefix.gridstore import FieldCube, GridSpec, Var
from cyclonefix.intensity import (
    DEFAULT_PARTITION,
    MIN_INTER_TC_DISTANCE,
    IntensityConfig,
    RegionIntensityMap,
    apply_calibration,
    basin_stats,
    calibrate,
    coupled_lookup,
    default_partition,
    intensity_metadata,
    intensity_net,
    load_intensity,
    make_partition,
    predict_batch,
    predict_intensity,
    read_calibration_csv,
    region_of,
    region_truth,
    train_intensity,
    write_calibration_csv,
)
from cyclonefix.synth import ScenarioScript, StormScript, VortexParams, downsample, fine_spec, render_field
CELL = 0.25


def wind_cube(speed: np.ndarray, lat0=20.0, lon0=120.0):
    n, m = speed.shape
    spec = GridSpec(lat0, lon0, CELL, CELL, n, m)
    return FieldCube(spec, (Var.U10, Var.V10), np.stack([speed, np.zeros_like(speed)]))


# --- partition ------------------------------------------------------------------

def test_partition_formula_examples():
    part = make_partition(64, 64, 4, 2, CELL)
    assert (part.rows, part.cols, part.region_cells) == (4, 4, 16)
    with pytest.raises(RegionTooLarge) as e:
        make_partition(64, 64, 4, 2, CELL, basin_stats("WP"))
    assert e.value.extent == pytest.approx(4.0) and e.value.limit == pytest.approx(3.37 / 3)
    ok = make_partition(32, 32, 4, 0, CELL, basin_stats("WP"))
    assert ok.region_extent_deg == 1.0 < 3.37 / 3
    with pytest.raises(IndivisibleWindow):
        make_partition(30, 32, 4, 0, CELL)


def test_basin_distances():
    assert MIN_INTER_TC_DISTANCE == {"WP": 3.37, "EP": 1.20, "NA": None, "NI": 16.37, "SI": 4.70, "SP": 5.92}
    assert basin_stats("NA").region_limit_deg is None
    with pytest.raises(DataError):
        basin_stats("XX")
    with pytest.raises(DataError):
        basin_stats("WP", (0.0, 1.0))


@pytest.mark.parametrize("basin", [b for b, d in MIN_INTER_TC_DISTANCE.items() if d is not None])
def test_region_too_large_exactly_at_limit(basin):
    d = MIN_INTER_TC_DISTANCE[basin]
    cell = d / 3 / 4  # four cells reach the limit exactly
    with pytest.raises(RegionTooLarge):
        make_partition(8, 8, 4, 0, cell, basin_stats(basin))
    make_partition(8, 8, 4, 0, cell * (1 - 1e-9), basin_stats(basin))


def test_no_twin_basin_never_constrained():
    make_partition(256, 256, 64, 2, 1.0, basin_stats("NA"))


def test_default_partitions_valid():
    for basin in MIN_INTER_TC_DISTANCE:
        part = default_partition(basin)
        assert (part.p, part.N) == DEFAULT_PARTITION[basin]
    assert default_partition("EP").region_extent_deg == 0.25


@settings(max_examples=100, deadline=None)
@given(p=st.integers(1, 8), N=st.integers(0, 3), a=st.integers(1, 4), b=st.integers(1, 4))
def test_partition_dims_property(p, N, a, b):
    side = 2 ** N * p
    part = make_partition(a * side, b * side, p, N, CELL)
    assert part.rows == a * side // (2 ** N * p) and part.cols == b
    assert part.region_extent_deg == pytest.approx(side * CELL)


# --- region truth -------------------------------------------------------------------

def test_region_truth_uniform_and_spike():
    part = make_partition(64, 64, 4, 2, CELL)
    assert np.all(region_truth(wind_cube(np.full((64, 64), 20.0)), part).values == 20.0)
    s = np.zeros((64, 64))
    s[16 + 5, 32 + 7] = 45.0
    v = region_truth(wind_cube(s), part).values
    assert v[1, 2] == 45.0 and np.count_nonzero(v) == 1


def test_region_truth_errors():
    part = make_partition(8, 8, 4, 0, CELL)
    spec = GridSpec(20.0, 120.0, CELL, CELL, 8, 8)
    with pytest.raises(MissingVariable):
        region_truth(FieldCube(spec, (Var.MSL,), np.zeros((1, 8, 8))), part)
    with pytest.raises(ShapeMismatch):
        region_truth(wind_cube(np.zeros((8, 16))), part)


def test_region_truth_vortex_max_in_rmax_region():
    p = VortexParams(16.0 - 0.4, 124.0 + 0.3, 45.0, 40.0, 1.6, 1010.0, 50.0)
    script = ScenarioScript("v", "straight", (StormScript("A", "WP", ((0.0, p), (6.0, p))),),
                            datetime(2024, 1, 1, tzinfo=timezone.utc), (6,))
    spec = GridSpec(20.0, 120.0, CELL, CELL, 32, 32)
    cube = render_field(script, 0.0, spec, (Var.U10, Var.V10))
    part = make_partition(32, 32, 4, 0, CELL)
    v = region_truth(cube, part).values
    w = np.hypot(cube.field(Var.U10), cube.field(Var.V10))
    i, j = np.unravel_index(np.argmax(w), w.shape)
    assert v[i // 4, j // 4] == v.max() == pytest.approx(w.max())
    lat, lon = spec.node(int(i), int(j))
    assert abs(haversine_km((lat, lon), p.center) - p.r_max) < 0.75 * CELL * 111.2


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(0, 63), bump=st.floats(0, 30))
def test_region_truth_permutation_and_monotone(seed, k, bump):
    rng = np.random.default_rng(seed)
    part = make_partition(8, 8, 4, 0, CELL)
    s = rng.uniform(0, 40, (8, 8))
    base = region_truth(wind_cube(s), part).values
    perm = s.copy()
    blk = perm[:4, 4:].ravel()
    perm[:4, 4:] = rng.permutation(blk).reshape(4, 4)
    assert np.array_equal(region_truth(wind_cube(perm), part).values, base)
    up = s.copy()
    up.flat[k] += bump
    assert np.all(region_truth(wind_cube(up), part).values >= base)


# --- calibration -------------------------------------------------------------------

def test_calibrate_examples():
    x = np.linspace(10, 60, 20)
    a, b = calibrate(list(zip(x, 1.3 * x + 2.0)))
    assert a == pytest.approx(1.3, abs=1e-9) and b == pytest.approx(2.0, abs=1e-9)
    a, b = calibrate(list(zip(x, x)))
    assert (a, b) == pytest.approx((1.0, 0.0), abs=1e-9)
    with pytest.raises(DegenerateFit):
        calibrate([(30.0, 31.0), (30.0, 40.0)])
    assert apply_calibration([-10.0, 10.0], (1.0, 0.0)).tolist() == [0.0, 10.0]


def test_calibration_reduces_mae_on_fit_set():
    rng = np.random.default_rng(3)
    x = rng.uniform(15, 50, 40)
    y = 1.25 * x + 1.0 + rng.normal(0, 1.0, 40)
    cal = calibrate(list(zip(x, y)))
    assert np.mean(np.abs(apply_calibration(x, cal) - y)) < np.mean(np.abs(x - y))


def test_calibrate_smoothed_vortex_slope_above_one():
    pairs = []
    spec = GridSpec(17.0, 128.0, CELL, CELL, 16, 16)
    for k, v_max in enumerate(np.linspace(25, 65, 9)):
        p = VortexParams(15.1 + 0.02 * k, 130.07 - 0.015 * k, float(v_max), 25.0, 2.0, 1010.0, 50.0)
        script = ScenarioScript("v", "straight", (StormScript("A", "WP", ((0.0, p), (6.0, p))),),
                                datetime(2024, 1, 1, tzinfo=timezone.utc), (6,))
        coarse = downsample(render_field(script, 0.0, fine_spec(spec, 5), (Var.U10, Var.V10)), 5)
        diag = float(np.hypot(coarse.field(Var.U10), coarse.field(Var.V10)).max())
        assert diag < v_max
        pairs.append((diag, float(v_max)))
    a, b = calibrate(pairs)
    assert a > 1.0


def test_calibration_csv_roundtrip(tmp_path):
    rows = [("WP", 1.2345678901234567, -0.5, 40), ("EP", 0.9, 1e-17, 3)]
    write_calibration_csv(tmp_path / "c.csv", rows)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "basin,a,b,n_pairs"
    back = read_calibration_csv(tmp_path / "c.csv")
    assert back == {b: (a, c, n) for b, a, c, n in rows}
    (tmp_path / "bad.csv").write_text("basin,slope\n")
    with pytest.raises(DataError):
        read_calibration_csv(tmp_path / "bad.csv")


# --- lookup ----------------------------------------------------------------------

def lookup_map():
    part = make_partition(64, 64, 4, 2, CELL)
    spec = GridSpec(20.0, 120.0, CELL, CELL, 64, 64)
    return RegionIntensityMap(part, np.arange(16, dtype=float).reshape(4, 4), spec)


def test_lookup_window_middle_goes_to_2_2():
    m = lookup_map()
    mid = (m.spec.lats.mean(), m.spec.lons.mean())
    assert region_of(mid, m.partition, m.spec) == (2, 2)
    assert coupled_lookup(mid, m) == 10.0


def test_lookup_inside_region_0_3_and_edges():
    m = lookup_map()
    assert coupled_lookup(m.spec.node(5, 55), m) == 3.0
    far = (m.spec.lat0 - 63.5 * CELL, m.spec.lon0 + 63.5 * CELL)
    assert region_of(far, m.partition, m.spec) == (3, 3)
    near = (m.spec.lat0 + 0.5 * CELL, m.spec.lon0 - 0.5 * CELL)
    assert region_of(near, m.partition, m.spec) == (0, 0)
    with pytest.raises(OutOfWindow):
        coupled_lookup((m.spec.lat0 + 1.0, m.spec.lon0), m)


def test_lookup_displacement_switches_region():
    m = lookup_map()
    unrefined = m.spec.node(15, 20)
    refined = m.spec.node(16, 20)
    assert coupled_lookup(refined, m) != coupled_lookup(unrefined, m)
    assert coupled_lookup(refined, m) == m.values[1, 1]


@settings(max_examples=100, deadline=None)
@given(fi=st.floats(-0.5, 63.5), fj=st.floats(-0.5, 63.5))
def test_lookup_total_and_deterministic(fi, fj):
    m = lookup_map()
    c = (m.spec.lat0 - fi * CELL, m.spec.lon0 + fj * CELL)
    r = region_of(c, m.partition, m.spec)
    assert 0 <= r[0] < 4 and 0 <= r[1] < 4
    assert region_of(c, m.partition, m.spec) == r


def test_map_invariants():
    part = make_partition(8, 8, 4, 0, CELL)
    with pytest.raises(DataError):
        RegionIntensityMap(part, np.array([[1.0, -1.0], [0, 0]]))
    with pytest.raises(ShapeMismatch):
        RegionIntensityMap(part, np.zeros((3, 2)))


# --- model -----------------------------------------------------------------------

def small_windows(n=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        levels = rng.uniform(5, 40, (2, 2))  # one wind level per region
        speed = np.kron(levels, np.ones((4, 4))) * rng.uniform(0.8, 1.0, (8, 8))
        spec = GridSpec(20.0, 120.0 + k, CELL, CELL, 8, 8)
        out.append(FieldCube(spec, (Var.U10, Var.V10, Var.MSL),
                             np.stack([speed, np.zeros((8, 8)), 1e5 - 100 * speed])))
    return out


def small_cfg(wins, calibration=(1.0, 0.0)):
    part = make_partition(8, 8, 4, 0, CELL)
    stats = NormStats.fit(wins, (Var.U10, Var.V10, Var.MSL))
    return IntensityConfig(intensity_net(3, part, ((4, 3), (4, 3))), stats, part, calibration=calibration)


def test_zero_net_predicts_zero():
    wins = small_windows()
    cfg = small_cfg(wins)
    m = predict_intensity(zero_params(cfg.net), cfg, wins[0])
    assert np.all(m.values == 0.0)
    with pytest.raises(ShapeMismatch):
        predict_intensity(zero_params(cfg.net), cfg, wind_cube(np.zeros((16, 16))))


def test_training_beats_global_mean_and_is_deterministic():
    wins = small_windows(24)
    cfg = small_cfg(wins)
    tc = TrainConfig(lr=5e-3, epochs=40, batch=8, seed=3)
    a = train_intensity(wins[:18], cfg, tc, wins[18:])
    b = train_intensity(wins[:18], cfg, tc, wins[18:])
    assert a.params.vector.tobytes() == b.params.vector.tobytes()
    maps = predict_batch(a.params, cfg, wins[18:])
    again = predict_batch(b.params, cfg, wins[18:])
    assert all(np.array_equal(x.values, y.values) for x, y in zip(maps, again))
    labels = np.stack([region_truth(w, cfg.partition).values for w in wins[18:]])
    mean = np.mean([region_truth(w, cfg.partition).values for w in wins[:18]])
    pred = np.stack([m.values for m in maps])
    assert np.mean(np.abs(pred - labels)) < 0.7 * np.mean(np.abs(mean - labels))


def test_calibrated_labels_vs_post_hoc():
    wins = small_windows(2)
    cfg = small_cfg(wins, calibration=(2.0, 1.0))
    post = replace(cfg, calibrate_labels=False)
    params = zero_params(cfg.net)
    params.views()["head.b"][...] = 3.0
    assert np.all(predict_intensity(params, cfg, wins[0]).values == 3.0)
    assert np.all(predict_intensity(params, post, wins[0]).values == 7.0)


def test_intensity_checkpoint_roundtrip(tmp_path):
    wins = small_windows(2)
    cfg = small_cfg(wins, calibration=(1.1, 0.5))
    params = zero_params(cfg.net)
    save_checkpoint(tmp_path / "i.bgp", params, intensity_metadata(cfg, TrainConfig(seed=2)))
    p2, cfg2, meta = load_intensity(tmp_path / "i.bgp")
    assert cfg2 == cfg and meta["rng_seed"] == 2
