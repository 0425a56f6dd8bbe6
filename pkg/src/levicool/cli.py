"""Command-line interface.

Subcommands: simulate, sweep, analyze, calibrate-pixels, bench-estimators,
validate.  Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 particle lost.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .config import parse_config
from .errors import ConfigError, LevicoolError, ParticleLost

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_LOST = 3


def _parse_grid(spec: str, axis: str):
    """Grid spec: 'a:b:step' (inclusive of a, exclusive of b), 'log:a:b:n',
    or a comma-separated list."""
    if spec.startswith("log:"):
        _, lo, hi, n = spec.split(":")
        return list(np.geomspace(float(lo), float(hi), int(n)))
    if ":" in spec:
        a, b, step = (float(x) for x in spec.split(":"))
        return list(np.arange(a, b, step))
    return [float(x) for x in spec.split(",")]


def _default_grid(axis: str, cfg):
    if axis == "phase":
        return list(np.arange(0.0, 360.0, 15.0))
    if axis == "gain":
        g = cfg.feedback.gain if cfg.feedback is not None else 0.1
        return list(np.geomspace(g / 10.0, g * 10.0, 13))
    return list(np.geomspace(1e-5, 1.0, 6))


def cmd_simulate(args) -> int:
    from .config import with_seed
    from .harness import analyze_run, run_closed_loop, write_run_artifacts

    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    artifacts = run_closed_loop(cfg)
    outdir = args.out or cfg.outputs.directory
    if outdir:
        write_run_artifacts(artifacts, outdir)
    if artifacts.lost:
        print(f"particle lost at t = {artifacts.lost_t:.3f} s; partial artifacts written")
        return EXIT_LOST
    analysis = analyze_run(artifacts)
    print(
        f"run complete: {analysis.n_samples} samples on {analysis.label}, "
        f"peak {analysis.peak.f_peak:.2f} Hz, area {analysis.area:.4g} m^2, "
        f"T(mass) {analysis.t_mass:.4g} K"
    )
    if outdir:
        print(f"artifacts in {outdir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness import run_sweep

    cfg = parse_config(args.config)
    grid = _parse_grid(args.grid, args.axis) if args.grid else _default_grid(args.axis, cfg)
    result = run_sweep(
        cfg, args.axis, grid, seeds_per_point=args.seeds,
        workers=args.workers, out_dir=args.out,
    )
    ex = result.summary.get("extrema", {})
    print(
        f"{args.axis} sweep over {len(grid)} points x {args.seeds} seeds: "
        f"min area at {ex.get('min_area_param')}, "
        f"min T_eff {ex.get('min_t_eff_k', float('nan')):.4g} K"
    )
    if args.out:
        print(f"sweep artifacts in {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import write_psd_csv
    from .config import parse_config as _pc
    from .harness import RunArtifacts, analyze_run

    run_dir = args.run_dir
    cfg_path = os.path.join(run_dir, "config.ini")
    if not os.path.exists(cfg_path):
        raise ConfigError(f"{run_dir} has no config.ini; not a run directory")
    cfg = _pc(cfg_path)
    label = args.label or ("out_of_loop" if cfg.out_of_loop else cfg.cameras[0].label)
    trace_path = os.path.join(run_dir, f"trace_{label}.csv")
    if not os.path.exists(trace_path):
        raise ConfigError(f"missing {trace_path}")
    rows = []
    with open(trace_path, "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            t, z, x, est, q = line.rstrip("\n").split(",")
            rows.append((float(t), float(z), float(x), est, float(q)))
    meta = {}
    meta_path = os.path.join(run_dir, "metadata.json")
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    artifacts = RunArtifacts(
        config=cfg, seed=meta.get("seed", cfg.run.seed),
        config_hash=meta.get("config_hash", ""), version=meta.get("version", ""),
        true_t=np.array([]), true_z=np.array([]), true_v=np.array([]),
        est_traces={label: rows}, controller_rows=[],
        lost=bool(meta.get("lost", False)),
        predicted_gamma_fb=float(meta.get("predicted_gamma_fb", 0.0)),
        gamma_gas=float(meta.get("gamma_gas", 0.0)),
    )
    analysis = analyze_run(artifacts, label=label)
    write_psd_csv(analysis.psd, os.path.join(run_dir, f"psd_{label}.csv"))
    out = {
        "label": label,
        "f_peak_hz": analysis.peak.f_peak,
        "fwhm_hz": analysis.peak.fwhm,
        "band_hz": list(analysis.peak.band),
        "area_m2": analysis.area,
        "t_mass_k": analysis.t_mass,
        "n_samples": analysis.n_samples,
        "settle_s": analysis.settle_s,
        "lost": analysis.lost,
    }
    with open(os.path.join(run_dir, f"analysis_{label}.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        json.dump(out, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(json.dumps(out, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_calibrate_pixels(args) -> int:
    from .imaging import CameraModel, render_frame
    from .localization import calibrate_pixels

    cam = CameraModel(
        pixel_pitch=args.pitch_um * 1e-6, magnification=1.0, fps=100.0,
        roi=(24, 24), psf_sigma=1.5, photons_per_frame=args.photons,
        background_per_px=2.0, read_noise_rms=0.5, label="stage",
    )
    rng_s = np.random.default_rng(args.seed)
    rng_r = np.random.default_rng(args.seed + 1)
    shift_m = args.shift_px * cam.meters_per_pixel
    before = [render_frame(0.0, cam, rng_s, rng_r) for _ in range(args.frames)]
    after = [render_frame(shift_m, cam, rng_s, rng_r) for _ in range(args.frames)]
    calib = calibrate_pixels(before, after, known_shift=shift_m)
    err = calib.meters_per_pixel / cam.meters_per_pixel - 1.0
    print(
        f"known shift {args.shift_px} px ({shift_m * 1e6:.3f} um): recovered "
        f"{calib.meters_per_pixel * 1e6:.5f} um/px ({err:+.3%} vs true)"
    )
    return EXIT_OK


def cmd_bench_estimators(args) -> int:
    from .imaging import CameraModel, render_frame
    from .localization import benchmark_estimators, calibration_for, write_benchmark_csv

    cam = CameraModel(
        pixel_pitch=5.35e-6, magnification=0.1, fps=221.0, roi=(20, 30),
        psf_sigma=1.5, photons_per_frame=2e4, background_per_px=2.0,
        read_noise_rms=1.0, label="bench",
    )
    rng = np.random.default_rng(args.seed)
    rng_s = np.random.default_rng(args.seed + 1)
    rng_r = np.random.default_rng(args.seed + 2)
    truths = rng.uniform(-2.0, 2.0, args.frames) * cam.meters_per_pixel
    frames = [render_frame(zt, cam, rng_s, rng_r) for zt in truths]
    rows = benchmark_estimators(frames, truths, calibration_for(cam))
    for r in rows:
        print(
            f"{r['estimator']:>16}: rms {r['rms_error_m'] * 1e6:8.3f} um, "
            f"{r['mean_cost_s'] * 1e6:9.1f} us/frame, "
            f"x{r['cost_ratio_vs_peak']:.1f} vs peak"
        )
    if args.out:
        write_benchmark_csv(rows, args.out)
        print(f"table written to {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = parse_config(args.config)
    n_cam = len(cfg.cameras)
    fb = "on" if (cfg.feedback is not None and cfg.feedback.enabled) else "off"
    print(
        f"OK: {n_cam} camera(s), feedback {fb}, "
        f"f0 = {cfg.trap.omega0 / (2 * math.pi):.4g} Hz, "
        f"p = {cfg.environment.pressure_mbar:.4g} mbar, "
        f"duration {cfg.run.duration_s:.4g} s, seed {cfg.run.seed}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="levicool",
        description="Closed-loop simulator of imaging-based feedback cooling "
                    "of a trapped nanoparticle",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one closed-loop experiment")
    p.add_argument("config")
    p.add_argument("-o", "--out", default=None, help="artifact directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep", help="run a parameter sweep")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=["phase", "gain", "pressure"])
    p.add_argument("--grid", default=None,
                   help="'a:b:step', 'log:lo:hi:n', or comma list")
    p.add_argument("--seeds", type=int, default=2, help="seeds per grid point")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel runs (default: LEVICOOL_WORKERS or 1)")
    p.add_argument("-o", "--out", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("analyze", help="PSD + temperature from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--label", default=None, help="camera trace to analyze")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("calibrate-pixels",
                       help="synthetic translation-stage pixel calibration")
    p.add_argument("--shift-px", type=float, default=3.0)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--photons", type=float, default=2e4)
    p.add_argument("--pitch-um", type=float, default=5.35)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_calibrate_pixels)

    p = sub.add_parser("bench-estimators", help="estimator cost/accuracy table")
    p.add_argument("--frames", type=int, default=1200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default=None, help="write CSV table here")
    p.set_defaults(fn=cmd_bench_estimators)

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("config")
    p.set_defaults(fn=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParticleLost as exc:
        print(f"particle lost: {exc}", file=sys.stderr)
        return EXIT_LOST
    except LevicoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - last-resort mapping
        print(f"unexpected failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
