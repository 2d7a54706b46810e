"""Command-line entry point: ``cyclonefix <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure. Failures print a
single ``cyclonefix: error code=<n> kind=<ExceptionName> msg=<text>`` line
to standard error.

Each run writes a manifest before touching its outputs: ``manifest.json``
inside directory outputs, ``<file>.manifest.json`` next to file outputs.
Existing outputs are never overwritten without ``--force``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import KNOWN_KEYS, Config
from .errors import CycloneError, DataError, NumericError
from .gridstore import Var, crop_box, crop_window, format_time, snap_to_node

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TRACK_KEYS = ("steering.radius_deg", "steering.weights", "extrapolate.alpha", "refine.box_schedule")
DENSITY_KEYS = ("density.sigma_deg", "density.radius_deg", "density.metric")
INTENSITY_KEYS = ("intensity.p", "intensity.N", "intensity.window_cells", "intensity.basin")
COMMAND_KEYS = {
    "synth": (),
    "track": TRACK_KEYS,
    "train-track": DENSITY_KEYS,
    "refine": TRACK_KEYS + DENSITY_KEYS,
    "train-intensity": INTENSITY_KEYS,
    "intensity": (),
    "eval": (),
    "gridlock": DENSITY_KEYS,
}


class UsageError(Exception):
    pass


# --- helpers ----------------------------------------------------------------------

def _config(args) -> Config:
    cfg = Config.load(getattr(args, "config", None))
    overrides = {}
    for item in getattr(args, "set", None) or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = cfg.merged(overrides)
    unknown = sorted(set(cfg.values) - set(KNOWN_KEYS))
    if unknown:
        raise DataError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def _check_target(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


def _write_manifest(path: Path, args, cfg: Config, inputs, outputs, started: float, seed=None, extra=None):
    keys = COMMAND_KEYS.get(args.command, ())
    doc = {
        "command": args.command,
        "argv": list(args.argv),
        "config": cfg.effective(keys),
        "config_hash": hashlib.sha256(json.dumps(cfg.effective(keys), sort_keys=True).encode()).hexdigest(),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "wall_clock_s": None if extra is None else round(time.time() - started, 3),
    }
    if extra:
        doc.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


class _Outputs:
    """Manifest-first bookkeeping for one run."""

    def __init__(self, args, cfg, out: Path, is_dir: bool, inputs=(), seed=None):
        _check_target(out, args.force)
        self.args, self.cfg, self.out, self.inputs, self.seed = args, cfg, out, list(inputs), seed
        self.manifest = _manifest_path(out, is_dir)
        self.started = time.time()
        if is_dir:
            out.mkdir(parents=True, exist_ok=True)
        _write_manifest(self.manifest, args, cfg, self.inputs, [out], self.started, seed)

    def done(self, **extra):
        _write_manifest(self.manifest, self.args, self.cfg, self.inputs, [self.out], self.started, self.seed,
                        extra or {"status": "ok"})


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))  # ordered, so the reduction is deterministic


def _tracker_config(cfg: Config):
    from .tracker import TrackerConfig

    return TrackerConfig(steering_radius_deg=cfg.get_float("steering.radius_deg"),
                         steering_weights=cfg.get_floats("steering.weights"),
                         alpha=cfg.get_float("extrapolate.alpha"),
                         box_schedule=cfg.get_floats("refine.box_schedule"))


def _kernel(cfg: Config):
    from .density import KernelParams

    return KernelParams(cfg.get_float("density.sigma_deg"), cfg.get_float("density.radius_deg"))


def _truths(data, storm_ids=None):
    from .evalharness import Truth

    ids = set(storm_ids or data.storm_ids)
    return [Truth(r.storm_id, format_time(r.timestamp), r.lat, r.lon, r.max_wind)
            for r in data.records() if r.storm_id in ids]


def _diagnosed_wind(cube, center, half_cells: int = 4) -> float:
    w = crop_window(cube, center, half_cells)
    return float(np.hypot(w.field(Var.U10), w.field(Var.V10)).max())


# --- subcommands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import dataset_hash, gen_dataset, read_mix, write_dataset

    cfg = _config(args)
    out = Path(args.out)
    mix = read_mix(args.mix) if args.mix else None
    o = _Outputs(args, cfg, out, True, [args.mix] if args.mix else [], args.seed)
    ds = gen_dataset(args.seed, args.storms, mix, basin=args.basin)
    write_dataset(ds, out)
    digest = dataset_hash(out)
    o.done(dataset_hash=digest)
    print(digest)
    return EXIT_OK


def _track_storm(job):
    data_path, storm_id, tcfg = job
    from .evalharness import Prediction
    from .synth import DatasetDir
    from .tracker import track_step

    data = DatasetDir(data_path)
    full = data.track(storm_id)
    t0 = data.t0(storm_id)
    hist = type(full)(storm_id, tuple(f for f in full.fixes if f.timestamp <= t0), full.source)
    preds = []
    for lead in data.lead_hours(storm_id):
        cube = data.cube(storm_id, lead)
        hist = track_step(cube, hist, tcfg)
        fix = hist.last
        preds.append(Prediction(storm_id, int(lead), format_time(fix.timestamp), fix.lat, fix.lon,
                                _diagnosed_wind(cube, fix.latlon)))
    return preds


def _run_tracker(args, data, cfg):
    tcfg = _tracker_config(cfg)
    jobs = [(str(data.path), sid, tcfg) for sid in data.storm_ids]
    return [p for part in _map(_track_storm, jobs, args.jobs) for p in part]


def cmd_track(args) -> int:
    from .evalharness import ForecastRun
    from .synth import DatasetDir

    cfg = _config(args)
    data = DatasetDir(args.data)
    out = Path(args.out)
    o = _Outputs(args, cfg, out, False, [args.data] + ([args.config] if args.config else []))
    run = ForecastRun("track", cfg.effective(TRACK_KEYS), _run_tracker(args, data, cfg), _truths(data))
    run.save(out)
    o.done(n_predictions=len(run.predictions))
    return EXIT_OK


def _correction_samples(data, storm_ids, half_cells, bias, noise, seed):
    from .benchmark import biased_prior
    from .correction.model import make_sample

    rng = np.random.default_rng([seed, 3])
    samples = []
    for sid in storm_ids:
        for lead in data.lead_hours(sid):
            cube = data.cube(sid, lead)
            r = data.truth_at(sid, lead)
            prior = biased_prior((r.lat, r.lon), bias, noise, rng, cube.spec.dlat)
            samples.append(make_sample(cube, prior, half_cells, sid, float(lead), (r.lat, r.lon)))
    return samples


def cmd_train_track(args) -> int:
    from .correction.model import (CorrectionConfig, NormStats, TrainConfig, correction_metadata, default_net,
                                   save_checkpoint, split_by_storm, train)
    from .synth import DatasetDir

    cfg = _config(args)
    data = DatasetDir(args.data)
    out = Path(args.out)
    o = _Outputs(args, cfg, out, False, [args.data], args.seed)
    tr_ids, va_ids = split_by_storm(data.storm_ids, args.val_frac, args.seed)
    if not tr_ids:
        raise DataError("no training storms after the split")
    trs = _correction_samples(data, tr_ids, args.half_cells, args.prior_bias, args.prior_noise, args.seed)
    vas = _correction_samples(data, va_ids, args.half_cells, args.prior_bias, args.prior_noise, args.seed + 1)
    stats = NormStats.fit([s.window for s in trs], trs[0].window.variables)
    ccfg = CorrectionConfig(default_net(len(stats.variables), args.head), stats, args.half_cells,
                            _kernel(cfg), cfg.get("density.metric"))
    tc = TrainConfig(optimizer=args.optimizer, lr=args.lr, epochs=args.epochs, batch=args.batch, seed=args.seed)
    res = train(trs, ccfg, tc, vas)
    save_checkpoint(out, res.params, correction_metadata(ccfg, tc, train_storms=tr_ids, val_storms=va_ids,
                                                         best_epoch=res.best_epoch))
    o.done(best_epoch=res.best_epoch, final=res.log[-1] if res.log else None)
    return EXIT_OK


def cmd_refine(args) -> int:
    from .correction.model import load_correction, refine_track
    from .evalharness import ForecastRun, Prediction
    from .synth import DatasetDir

    cfg = _config(args)
    data = DatasetDir(args.data)
    out = Path(args.out)
    inputs = [args.data, args.ckpt] + ([args.track] if args.track else [])
    o = _Outputs(args, cfg, out, False, inputs)
    params, ccfg, _ = load_correction(args.ckpt)
    prior_run = ForecastRun.load(args.track) if args.track else ForecastRun("track", {}, _run_tracker(args, data, cfg))
    preds = []
    for p in prior_run.predictions:
        cube = data.cube(p.storm_id, p.lead_h)
        lat, lon = refine_track(params, ccfg, cube, snap_to_node((p.lat, p.lon), cube.spec))
        preds.append(Prediction(p.storm_id, p.lead_h, p.valid_time, lat, lon, p.max_wind))
    run = ForecastRun(f"refine-{ccfg.net.head}", {"ckpt": str(args.ckpt), "head": ccfg.net.head}, preds,
                      _truths(data))
    run.save(out)
    o.done(n_predictions=len(preds))
    return EXIT_OK


def _intensity_partition(cfg: Config, cell: float):
    from .intensity import basin_stats, make_partition

    n = cfg.get_int("intensity.window_cells")
    basin = cfg.get("intensity.basin")
    return make_partition(n, n, cfg.get_int("intensity.p"), cfg.get_int("intensity.N"), cell, basin_stats(basin))


def cmd_train_intensity(args) -> int:
    from .benchmark import INTENSITY_VARS
    from .correction.model import NormStats, TrainConfig, save_checkpoint, split_by_storm
    from .intensity import (IntensityConfig, calibrate, crop_intensity_window, intensity_metadata, intensity_net,
                            write_calibration_csv, train_intensity)
    from .synth import DatasetDir

    cfg = _config(args)
    if args.basin:
        cfg = cfg.merged({"intensity.basin": args.basin})
    data = DatasetDir(args.data)
    out = Path(args.out)
    o = _Outputs(args, cfg, out, False, [args.data], args.seed)
    tr_ids, va_ids = split_by_storm(data.storm_ids, args.val_frac, args.seed)

    def windows(ids):
        got, pairs = [], []
        for sid in ids:
            for lead in data.lead_hours(sid):
                cube = data.cube(sid, lead).select(INTENSITY_VARS)
                r = data.truth_at(sid, lead)
                part = _intensity_partition(cfg, cube.spec.dlat)
                w = crop_intensity_window(cube, (r.lat, r.lon), part)
                got.append(w)
                pairs.append((float(np.hypot(w.field(Var.U10), w.field(Var.V10)).max()), r.max_wind))
        return got, pairs

    trw, pairs = windows(tr_ids)
    vaw, _ = windows(va_ids)
    if not trw:
        raise DataError("no training windows")
    part = _intensity_partition(cfg, trw[0].spec.dlat)
    cal = calibrate(pairs)
    stats = NormStats.fit(trw, INTENSITY_VARS)
    icfg = IntensityConfig(intensity_net(len(INTENSITY_VARS), part, tuple(args.hidden_layers())), stats, part,
                           cfg.get("intensity.basin"), cal)
    tc = TrainConfig(lr=args.lr, epochs=args.epochs, batch=args.batch, seed=args.seed)
    res = train_intensity(trw, icfg, tc, vaw)
    save_checkpoint(out, res.params, intensity_metadata(icfg, tc, train_storms=tr_ids, val_storms=va_ids,
                                                        best_epoch=res.best_epoch))
    write_calibration_csv(out.with_name(out.name + ".calibration.csv"), [(icfg.basin, *cal, len(pairs))])
    o.done(best_epoch=res.best_epoch, calibration=list(cal))
    return EXIT_OK


def cmd_intensity(args) -> int:
    from .evalharness import ForecastRun, Prediction
    from .intensity import coupled_lookup, crop_intensity_window, load_intensity, predict_intensity
    from .synth import DatasetDir

    cfg = _config(args)
    data = DatasetDir(args.data)
    out = Path(args.out)
    inputs = [args.coupled, args.ckpt, args.data] + ([args.anchor] if args.anchor else [])
    o = _Outputs(args, cfg, out, False, inputs)
    params, icfg, _ = load_intensity(args.ckpt)
    query = ForecastRun.load(args.coupled)
    anchors = {}
    if args.anchor:
        anchors = {(p.storm_id, p.lead_h): p for p in ForecastRun.load(args.anchor).predictions}
    preds = []
    for p in query.predictions:
        a = anchors.get((p.storm_id, p.lead_h), p)
        cube = data.cube(p.storm_id, p.lead_h).select(icfg.stats.variables)
        window = crop_intensity_window(cube, (a.lat, a.lon), icfg.partition)
        imap = predict_intensity(params, icfg, window)
        preds.append(Prediction(p.storm_id, p.lead_h, p.valid_time, p.lat, p.lon, coupled_lookup((p.lat, p.lon), imap)))
    run = ForecastRun(query.run_id + "+intensity", {**query.config, "intensity_ckpt": str(args.ckpt)}, preds,
                      query.truths or _truths(data))
    run.save(out)
    o.done(n_predictions=len(preds))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalharness import ForecastRun, write_report

    cfg = _config(args)
    out = Path(args.out)
    o = _Outputs(args, cfg, out, True, [args.run] + ([args.baseline] if args.baseline else []))
    run = ForecastRun.load(args.run)
    base = ForecastRun.load(args.baseline) if args.baseline else None
    written = write_report(out, run, base)
    sys.stdout.write(written["errors.txt"])
    if "comparison.csv" in written:
        sys.stdout.write(written["comparison.csv"])
    o.done(files=sorted(written))
    return EXIT_OK


def cmd_gridlock(args) -> int:
    from .evalharness import grid_locking_study

    cfg = _config(args)
    rows = [grid_locking_study(args.n, args.cell, d, seed=args.seed, kernel=_kernel(cfg),
                               metric=cfg.get("density.metric"))
            for d in ("argmax", "expectation")]
    lines = ["decoder,n,cell_deg,mean_km,mean_abs_dlat_deg,mean_abs_dlon_deg"]
    lines += [f"{r.decoder},{r.n},{r.cell_deg},{r.mean_km:.6f},{r.mean_abs_dlat_deg:.6f},{r.mean_abs_dlon_deg:.6f}"
              for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        o = _Outputs(args, cfg, out, False, [], args.seed)
        out.write_text(text, encoding="utf-8")
        o.done()
    sys.stdout.write(text)
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

def _keys_epilog(command: str) -> str:
    keys = COMMAND_KEYS[command]
    if not keys:
        return "config keys read: none"
    return "config keys read (default):\n" + "\n".join(f"  {k} = {KNOWN_KEYS[k]}" for k in keys)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cyclonefix", description="Synthetic cyclone tracking, refinement and intensity tools.",
                formatter_class=argparse.RawDescriptionHelpFormatter,
                epilog="all config keys (default):\n" + "\n".join(f"  {k} = {v}" for k, v in KNOWN_KEYS.items()))
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=_keys_epilog(name),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; flags win")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers across storms (ordered reduction)")
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic dataset (BGC1 fields + best-track CSV)")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--storms", type=int, required=True)
    sp.add_argument("--mix", help="scenario mix file (scenario = weight)")
    sp.add_argument("--basin", default="WP")
    sp.add_argument("--out", required=True)

    sp = add("track", cmd_track, "run the kinematic tracker over every storm")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    def train_opts(sp, epochs, lr):
        sp.add_argument("--epochs", type=int, default=epochs)
        sp.add_argument("--lr", type=float, default=lr)
        sp.add_argument("--batch", type=int, default=16)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--val-frac", type=float, default=0.3)

    sp = add("train-track", cmd_train_track, "train the centre-correction model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--head", choices=("density", "residual"), default="density")
    sp.add_argument("--out", required=True)
    sp.add_argument("--half-cells", type=int, default=8)
    sp.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    sp.add_argument("--prior-bias", type=float, default=0.0, help="training prior offset (deg, both axes)")
    sp.add_argument("--prior-noise", type=float, default=0.1, help="training prior noise (deg)")
    train_opts(sp, 15, 1e-3)

    sp = add("refine", cmd_refine, "refine tracker fixes with a trained correction model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--track", help="tracker run to refine (default: run the tracker)")
    sp.add_argument("--out", required=True)

    sp = add("train-intensity", cmd_train_intensity, "train the region-aware intensity model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--basin", help="overrides intensity.basin")
    sp.add_argument("--out", required=True)
    sp.add_argument("--hidden", default="8x3,16x3,8x3", help="conv layers as CHANNELSxKERNEL list")
    train_opts(sp, 10, 2e-3)

    sp = add("intensity", cmd_intensity, "predict intensities, looking regions up at the run's fixes")
    sp.add_argument("--coupled", required=True, metavar="RUN", help="run whose fixes index the region map")
    sp.add_argument("--anchor", metavar="RUN", help="run whose fixes centre the windows (default: --coupled)")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "error tables and run comparison")
    sp.add_argument("--run", required=True)
    sp.add_argument("--baseline")
    sp.add_argument("--out", required=True)

    sp = add("gridlock", cmd_gridlock, "grid-locking study for argmax and expectation decoding")
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--cell", type=float, default=0.25)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    return p


def _hidden(text: str):
    try:
        return [tuple(int(x) for x in part.split("x")) for part in text.split(",")]
    except ValueError:
        raise UsageError(f"--hidden: cannot parse {text!r}") from None


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    sys.stderr.write(f"cyclonefix: error code={code} kind={type(exc).__name__} msg={msg}\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        args.argv = argv
        if hasattr(args, "hidden"):
            layers = _hidden(args.hidden)
            args.hidden_layers = lambda: layers
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (CycloneError, KeyError, OSError) as exc:
        return _fail(EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
