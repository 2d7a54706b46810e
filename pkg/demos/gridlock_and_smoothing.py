"""Why a 0.25 deg grid hurts both track and intensity, measured on synthetic storms.

Run:  python3 demos/gridlock_and_smoothing.py

Part 1 places true centres at random sub-cell offsets, encodes them as
truncated-Gaussian densities and decodes them back. Snapping to the densest
node (argmax) costs a quarter cell per axis on average; the probability
weighted mean recovers the centre almost exactly.

Part 2 renders one vortex on a 0.05 deg grid, area-averages it to 0.25 deg
and compares the diagnosed maximum wind. Compact cores lose the most.
"""

from datetime import datetime, timezone

from cyclonefix.evalharness import grid_locking_study
from cyclonefix.gridstore import GridSpec, Var
from cyclonefix.synth import ScenarioScript, StormScript, VortexParams, downsample, fine_spec, render_field, wind_speed


def part1():
    print("grid locking, 0.25 deg cells, 10000 sub-cell offsets")
    for dec in ("argmax", "expectation"):
        r = grid_locking_study(10_000, 0.25, dec, seed=0)
        print(f"  {dec:11s}  mean {r.mean_km:7.3f} km   |dlat| {r.mean_abs_dlat_deg:.4f}   "
              f"|dlon| {r.mean_abs_dlon_deg:.4f} deg")
    print("  argmax per-axis error sits at cell/4 = 0.0625 deg\n")


def part2():
    print("peak-wind smoothing, v_max 50 m/s, 0.05 -> 0.25 deg area mean")
    spec = GridSpec(17.0, 128.0, 0.25, 0.25, 16, 16)
    t0 = datetime(2024, 1, 1, tzinfo=timezone.utc)
    for r_max in (20.0, 30.0, 60.0):
        for b in (1.0, 1.5, 2.5):
            p = VortexParams(15.1, 130.08, 50.0, r_max, b, 1010.0, 50.0)
            script = ScenarioScript("v", "straight", (StormScript("A", "WP", ((0.0, p), (6.0, p))),), t0, (6,))
            fine = render_field(script, 0.0, fine_spec(spec, 5), (Var.U10, Var.V10))
            hi = wind_speed(fine).max()
            lo = wind_speed(downsample(fine, 5)).max()
            print(f"  r_max {r_max:4.0f} km  b {b:.1f}:  {hi:5.1f} -> {lo:5.1f} m/s  ({100 * (1 - lo / hi):4.1f}% lower)")


if __name__ == "__main__":
    part1()
    part2()
