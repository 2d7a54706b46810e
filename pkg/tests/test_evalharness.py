import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cyclonefix.errors import CoverageMismatch, DataError, EmptySet, InvalidCoordinate
from cyclonefix.evalharness import (
    ForecastRun,
    Prediction,
    Truth,
    compare_runs,
    comparison_csv,
    error_table,
    grid_locking_study,
    haversine_km,
    table_csv,
    table_text,
    wind_mae,
    write_report,
)

mpmath.mp.dps = 50


def cosine_law_km(p1, p2):
    """Spherical law of cosines in 50-digit arithmetic."""
    f1, l1 = mpmath.radians(mpmath.mpf(p1[0])), mpmath.radians(mpmath.mpf(p1[1]))
    f2, l2 = mpmath.radians(mpmath.mpf(p2[0])), mpmath.radians(mpmath.mpf(p2[1]))
    c = mpmath.sin(f1) * mpmath.sin(f2) + mpmath.cos(f1) * mpmath.cos(f2) * mpmath.cos(l2 - l1)
    return float(6371 * mpmath.acos(c))


# --- haversine ---------------------------------------------------------------------

def test_haversine_closed_forms():
    assert haversine_km((10.0, 20.0), (10.0, 20.0)) == 0.0
    assert haversine_km((0.0, 0.0), (0.0, 90.0)) == pytest.approx(6371 * math.pi / 2, rel=1e-9)
    assert haversine_km((0.0, 0.0), (0.0, 90.0)) == pytest.approx(10007.543, abs=1e-3)
    assert haversine_km((0.0, 0.0), (1.0, 0.0)) == pytest.approx(6371 * math.pi / 180, rel=1e-9)
    assert haversine_km((0.0, 0.0), (1.0, 0.0)) == pytest.approx(111.195, abs=1e-3)


def test_haversine_invalid():
    with pytest.raises(InvalidCoordinate):
        haversine_km((91.0, 0.0), (0.0, 0.0))
    with pytest.raises(InvalidCoordinate):
        haversine_km((0.0, float("nan")), (0.0, 0.0))


@settings(max_examples=200, deadline=None)
@given(lat=st.floats(-70, 70), lon=st.floats(0, 360), brg=st.floats(0, 2 * math.pi),
       dist=st.floats(1.0, 5000.0))
def test_haversine_matches_extended_precision_oracle(lat, lon, brg, dist):
    # destination point at the given distance and bearing
    d = dist / 6371.0
    f1, l1 = math.radians(lat), math.radians(lon)
    f2 = math.asin(math.sin(f1) * math.cos(d) + math.cos(f1) * math.sin(d) * math.cos(brg))
    l2 = l1 + math.atan2(math.sin(brg) * math.sin(d) * math.cos(f1), math.cos(d) - math.sin(f1) * math.sin(f2))
    p1, p2 = (lat, lon), (math.degrees(f2), math.degrees(l2))
    ref = cosine_law_km(p1, p2)
    assume(ref >= 1.0)
    assert haversine_km(p1, p2) == pytest.approx(ref, rel=1e-9)


point = st.tuples(st.floats(-89, 89), st.floats(0, 360))


@settings(max_examples=200, deadline=None)
@given(a=point, b=point, c=point)
def test_haversine_metric_properties(a, b, c):
    ab, ba = haversine_km(a, b), haversine_km(b, a)
    assert ab == ba and ab >= 0
    assert haversine_km(a, c) <= ab + haversine_km(b, c) + 1e-6


# --- wind MAE --------------------------------------------------------------------

def test_wind_mae_examples():
    assert wind_mae([10, 20], [10, 20]) == 0.0
    assert wind_mae([10, 20], [12, 17]) == 2.5
    with pytest.raises(EmptySet):
        wind_mae([], [])
    with pytest.raises(DataError):
        wind_mae([1, 2], [1])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 1000), c=st.floats(-50, 50))
def test_wind_mae_translation_invariant(seed, c):
    rng = np.random.default_rng(seed)
    p, t = rng.uniform(0, 60, 10), rng.uniform(0, 60, 10)
    assert wind_mae(p + c, t + c) == pytest.approx(wind_mae(p, t), abs=1e-9)


# --- grid locking -----------------------------------------------------------------

def test_gridlock_argmax_quarter_cell():
    r = grid_locking_study(10_000, 0.25, "argmax", seed=1)
    assert r.mean_abs_dlat_deg == pytest.approx(0.0625, rel=0.05)
    assert r.mean_abs_dlon_deg == pytest.approx(0.0625, rel=0.05)


def test_gridlock_expectation_small():
    r = grid_locking_study(500, 0.25, "expectation", seed=2)
    assert r.mean_err_deg < 0.005
    assert r.mean_km < grid_locking_study(500, 0.25, "argmax", seed=2).mean_km / 10


def test_gridlock_zero_offset():
    for dec in ("argmax", "expectation"):
        r = grid_locking_study(20, 0.25, dec, offset_scale=0.0)
        assert r.mean_km < 0.2  # expectation keeps a ~0.001 deg kernel asymmetry
    assert grid_locking_study(20, 0.25, "argmax", offset_scale=0.0).mean_km == 0.0
    with pytest.raises(DataError):
        grid_locking_study(5, decoder="mode")


# --- runs and tables ---------------------------------------------------------------

def make_run(run_id="A", n_storms=2, leads=range(6, 78, 6), err=0.1, wind_err=2.0, drop=()):
    preds, truths = [], []
    for s in range(n_storms):
        sid = f"S{s}"
        for lead in leads:
            vt = f"2024-08-{1 + lead // 24:02d}T{lead % 24:02d}:00:00Z"
            lat, lon = 15.0 + 0.1 * lead, 130.0 + s
            truths.append(Truth(sid, vt, lat, lon, 40.0))
            if (sid, lead) in drop:
                continue
            preds.append(Prediction(sid, lead, vt, lat + err, lon, 40.0 + wind_err))
    return ForecastRun(run_id, {"k": 1}, preds, truths)


def test_compare_self_is_zero_and_ten_percent():
    a = make_run()
    assert all(pct == 0.0 for _, _, pct in compare_runs(a, a))
    b = make_run("B", err=0.1 / 0.9, wind_err=2.0 / 0.9)
    for _, _, pct in compare_runs(a, b):
        assert pct == pytest.approx(10.0, rel=1e-6)


def test_compare_coverage_mismatch():
    a = make_run()
    b = make_run(drop={("S0", 12)})
    with pytest.raises(CoverageMismatch):
        compare_runs(a, b)


def test_empty_run_header_only():
    t = error_table(ForecastRun("E"))
    assert table_csv(t) == "lead_h,n,track_km,wind_mae_ms\n"
    assert comparison_csv([]) == "lead_h,metric,improvement_pct\n"


def test_twelve_leads_twelve_rows_and_stable_bytes():
    run = make_run(n_storms=1)
    csv_text = table_csv(error_table(run))
    lines = csv_text.splitlines()
    assert lines[0] == "lead_h,n,track_km,wind_mae_ms" and len(lines) == 13
    assert table_csv(error_table(ForecastRun.from_json(run.to_json()))) == csv_text
    row = error_table(run).row(24)
    assert row.n == 1 and row.track_km == pytest.approx(0.1 * 6371 * math.pi / 180, rel=1e-6)
    assert row.wind_mae_ms == pytest.approx(2.0)


def test_unmatched_counted_not_dropped():
    run = make_run(n_storms=2)
    run.predictions.append(Prediction("S9", 24, "2024-08-02T00:00:00Z", 10, 120, 30))
    t = error_table(run)
    assert t.unmatched == 1 and t.row(24).unmatched == 1 and t.row(24).n == 2
    assert "unmatched predictions: 1" in table_text(t)
    dup = make_run(n_storms=1)
    dup.predictions.append(dup.predictions[0])
    with pytest.raises(DataError):
        dup.matched()


def test_sample_count_increase_detected():
    run = make_run(n_storms=2, drop={("S0", 6)})
    assert error_table(run).count_increases() == [12]


def test_run_json_roundtrip(tmp_path):
    run = make_run()
    run.save(tmp_path / "r.json")
    back = ForecastRun.load(tmp_path / "r.json")
    assert back.to_json() == run.to_json()
    (tmp_path / "bad.json").write_text('{"run_id": "x"}')
    with pytest.raises(DataError):
        ForecastRun.load(tmp_path / "bad.json")


def test_write_report(tmp_path):
    a, b = make_run(), make_run("B", err=0.2)
    written = write_report(tmp_path / "rep", a, b)
    assert set(written) == {"errors.csv", "errors.txt", "comparison.csv"}
    comp = (tmp_path / "rep" / "comparison.csv").read_text().splitlines()
    assert comp[0] == "lead_h,metric,improvement_pct" and len(comp) == 1 + 12 * 2
    track = [l for l in comp[1:] if ",track_km," in l]
    assert all(float(l.split(",")[2]) == pytest.approx(50.0, rel=1e-3) for l in track)
