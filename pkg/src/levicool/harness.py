"""Closed-loop engine: dynamics -> imaging -> localization -> feedback.

One run is a single sequential event loop.  Event times are exact rationals
(`fractions.Fraction`), so camera clocks at incommensurate rates (875.26 and
221 fps) interleave without floating-point drift; physics advances between
events with the exact Gaussian propagator, which is unbiased for any step
size.  Per in-loop frame the order is: advance physics, render at the
exposure midpoint, localize, ingest into the controller, schedule the
actuation at sample time + fine delay + processing latency, and apply it as a
zero-order-hold force when its time comes.

RNG streams are split per noise source (thermal, excess, init, shot/read per
camera) so toggling one source never perturbs the draws of another.
"""

from __future__ import annotations

import heapq
import json
import math
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import __version__
from .analysis import (
    Psd,
    PeakInfo,
    SweepRow,
    TemperatureCalibration,
    calibrate_temperature,
    default_segment_len,
    locate_peak,
    peak_area,
    sho_capture_fraction,
    sweep_summary,
    welch_psd,
    write_psd_csv,
    write_sweep_csv,
)
from .config import (
    ExperimentConfig,
    config_hash,
    with_feedback_enabled,
    with_gain,
    with_phase,
    with_pressure,
    with_seed,
)
from .dynamics import (
    LangevinPropagator,
    gas_damping_rate,
    particle_mass,
    stationary_temperature,
    thermal_force_psd,
    thermal_init,
)
from .errors import (
    ConfigError,
    DegenerateFitError,
    FitFailedError,
    IntegrationFault,
    LowSignalError,
    ParticleLost,
)
from .feedback import Controller, force_on_particle, predicted_effective_damping
from .imaging import render_frame, write_frame_u16
from .localization import (
    PositionSample,
    calibration_for,
    centroid,
    gaussian_fit,
    peak_detect,
)
from scipy.constants import k as K_BOLTZMANN

# event priorities at equal timestamps: collect blur samples, then renders in
# camera order, then actuations (so a zero-latency actuation scheduled by a
# render at the same instant is applied after it)
_PRIO_SUBSTEP = 0
_PRIO_BLUR = 5
_PRIO_RENDER = 10
_PRIO_ACT = 90

_NANO = 10**9


def _time_fraction(seconds: float) -> Fraction:
    """Float seconds as an exact small-denominator fraction (ns resolution)."""
    return Fraction(round(seconds * _NANO), _NANO)


@dataclass
class RunRngs:
    thermal: np.random.Generator
    excess: np.random.Generator
    init: np.random.Generator
    shot: dict
    read: dict

    @classmethod
    def build(cls, seed: int, labels) -> "RunRngs":
        def stream(idx):
            return np.random.Generator(
                np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(idx,)))
            )

        shot = {label: stream(10 + 2 * i) for i, label in enumerate(labels)}
        read = {label: stream(11 + 2 * i) for i, label in enumerate(labels)}
        return cls(thermal=stream(0), excess=stream(1), init=stream(2),
                   shot=shot, read=read)


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    seed: int
    config_hash: str
    version: str
    true_t: np.ndarray
    true_z: np.ndarray
    true_v: np.ndarray
    est_traces: dict  # label -> list of (t, z, x, estimator, quality)
    controller_rows: list
    lost: bool = False
    lost_t: float | None = None
    estimator_failures: dict = field(default_factory=dict)
    saturation_count: int = 0
    frames_rendered: dict = field(default_factory=dict)
    predicted_gamma_fb: float = 0.0
    gamma_gas: float = 0.0
    init_temperature: float = 0.0
    frames: list = field(default_factory=list)  # optional (label, index, counts)

    def trace_array(self, label: str) -> np.ndarray:
        rows = self.est_traces.get(label, [])
        return np.array([(r[0], r[1], r[2]) for r in rows], dtype=float).reshape(-1, 3)


def _make_estimator(channel):
    calib = calibration_for(channel.camera)
    spec = channel.estimator
    if spec.kind == "peak":
        return lambda frame: peak_detect(frame, calib)
    if spec.kind == "centroid":
        return lambda frame: centroid(frame, spec.power, calib, spec.background)
    return lambda frame: gaussian_fit(frame, calib).sample


def _init_temperature(cfg: ExperimentConfig) -> float:
    policy = cfg.run.init
    if policy == "bath":
        return cfg.environment.bath_temperature
    if policy == "auto":
        return stationary_temperature(cfg.environment, cfg.particle)
    return float(policy)


def run_closed_loop(cfg: ExperimentConfig) -> RunArtifacts:
    """Run one experiment; deterministic given (config, seed)."""
    mass = particle_mass(cfg.particle)
    omega0 = cfg.trap.omega0
    gamma = gas_damping_rate(cfg.environment, cfg.particle)
    psd_thermal = thermal_force_psd(gamma, mass, cfg.environment.bath_temperature) \
        if gamma > 0.0 else 0.0
    psd_excess = cfg.environment.excess_force_psd

    labels = [c.label for c in cfg.cameras]
    rngs = RunRngs.build(cfg.run.seed, labels)

    t_init = _init_temperature(cfg)
    state = thermal_init(mass, omega0, t_init, rngs.init)
    z, v = state.z, state.v

    noise_sources = []
    if psd_thermal > 0.0:
        noise_sources.append((psd_thermal, rngs.thermal))
    if psd_excess > 0.0:
        noise_sources.append((psd_excess, rngs.excess))
    noise_psds = tuple(s[0] for s in noise_sources)
    noise_rngs = [s[1] for s in noise_sources]
    prop_cache: dict[Fraction, LangevinPropagator] = {}

    in_loop = cfg.in_loop
    controller = None
    act_delta = Fraction(0)
    predicted_gamma = 0.0
    if cfg.feedback is not None and in_loop is not None:
        controller = Controller(cfg.feedback, float(in_loop.fps_fraction))
        act_delta = _time_fraction(
            cfg.feedback.fine_delay + cfg.feedback.processing_latency
        )
        predicted_gamma = predicted_effective_damping(
            cfg.feedback, omega0, float(in_loop.fps_fraction), mass
        )

    estimators = {c.label: _make_estimator(c) for c in cfg.cameras}
    reference_label = cfg.out_of_loop.label if cfg.out_of_loop else labels[0]

    master = in_loop if in_loop is not None else cfg.cameras[0]
    sub_period = Fraction(1, 1) / (master.fps_fraction * cfg.run.substeps_per_frame)

    blur_n = cfg.run.blur_subsamples
    cam_frac = {c.label: c.fps_fraction for c in cfg.cameras}
    cam_e = {}
    for c in cfg.cameras:
        e = Fraction(c.camera.exposure).limit_denominator(_NANO)
        cam_e[c.label] = e

    heap: list = []
    seq = 0

    def push(t, prio, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (t, prio, seq, kind, payload))
        seq += 1

    def schedule_frame(label, k):
        fps = cam_frac[label]
        e = cam_e[label]
        idx = labels.index(label)
        if blur_n == 1:
            push((Fraction(k) + e / 2) / fps, _PRIO_RENDER + idx, "render", (label, k))
        else:
            for j in range(blur_n - 1):
                tj = (Fraction(k) + Fraction(2 * j + 1, 2 * blur_n) * e) / fps
                push(tj, _PRIO_BLUR, "blur", label)
            t_last = (Fraction(k) + Fraction(2 * blur_n - 1, 2 * blur_n) * e) / fps
            push(t_last, _PRIO_RENDER + idx, "render", (label, k))

    for label in labels:
        schedule_frame(label, 0)
    push(Fraction(0), _PRIO_SUBSTEP, "substep", 0)

    t_end = _time_fraction(cfg.run.duration_s)
    t_now = Fraction(0)
    held_force = 0.0

    true_t: list[float] = []
    true_z: list[float] = []
    true_v: list[float] = []
    est_traces: dict[str, list] = {label: [] for label in labels}
    failures = {label: 0 for label in labels}
    frames_rendered = {label: 0 for label in labels}
    last_sample: dict[str, tuple[float, float]] = {}
    blur_acc: dict[str, list[float]] = {label: [] for label in labels}
    kept_frames: list = []
    lost = False
    lost_t = None

    while heap:
        t_next, _prio, _seq, kind, payload = heapq.heappop(heap)
        if t_next > t_end:
            break
        if t_next > t_now:
            dt = t_next - t_now
            prop = prop_cache.get(dt)
            if prop is None:
                prop = LangevinPropagator(mass, omega0, gamma, float(dt), noise_psds)
                prop_cache[dt] = prop
            draws = [rng.standard_normal(2) for rng in noise_rngs]
            z, v = prop.step_values(z, v, held_force, draws)
            t_now = t_next
            if not (math.isfinite(z) and math.isfinite(v)):
                raise IntegrationFault(f"non-finite state at t={float(t_now)}")

        if kind == "substep":
            push(t_now + sub_period, _PRIO_SUBSTEP, "substep", 0)
        elif kind == "blur":
            blur_acc[payload].append(z)
        elif kind == "render":
            label, k = payload
            channel = cfg.camera_channel(label)
            t_mid = float((Fraction(k) + cam_e[label] / 2) / cam_frac[label])
            if blur_n > 1:
                blur_acc[label].append(z)
                z_render = float(np.mean(blur_acc[label]))
                blur_acc[label].clear()
            else:
                z_render = z
            try:
                frame = render_frame(
                    z_render, channel.camera, rngs.shot[label], rngs.read[label],
                    t_mid=t_mid,
                )
            except ParticleLost:
                lost = True
                lost_t = float(t_now)
                break
            frames_rendered[label] += 1
            if cfg.outputs.write_frames:
                kept_frames.append((label, k, frame.counts))
            try:
                sample = estimators[label](frame)
            except FitFailedError as exc:
                failures[label] += 1
                sample = exc.best.sample if exc.best is not None else None
            except (LowSignalError, DegenerateFitError):
                failures[label] += 1
                sample = None
            if sample is None:
                held = last_sample.get(label, (0.0, 0.0))
                sample = PositionSample(
                    z_est=held[0], x_est=held[1], t=t_mid,
                    estimator=channel.estimator.kind + "/held", quality=0.0,
                )
            last_sample[label] = (sample.z_est, sample.x_est)
            est_traces[label].append(
                (t_mid, sample.z_est, sample.x_est, sample.estimator, sample.quality)
            )
            if label == reference_label:
                true_t.append(t_mid)
                true_z.append(z)
                true_v.append(v)
            if label == "in_loop" and controller is not None:
                act = controller.ingest(sample)
                if act is not None:
                    t_act = (Fraction(k) + cam_e[label] / 2) / cam_frac[label] + act_delta
                    if t_act < t_now:
                        t_act = t_now
                    push(t_act, _PRIO_ACT, "act", act.volts)
            schedule_frame(label, k + 1)
        elif kind == "act":
            held_force = force_on_particle(payload, cfg.feedback)

    return RunArtifacts(
        config=cfg,
        seed=cfg.run.seed,
        config_hash=config_hash(cfg),
        version=__version__,
        true_t=np.asarray(true_t),
        true_z=np.asarray(true_z),
        true_v=np.asarray(true_v),
        est_traces=est_traces,
        controller_rows=list(controller.telemetry) if controller is not None else [],
        lost=lost,
        lost_t=lost_t,
        estimator_failures=failures,
        saturation_count=controller.saturation_count if controller is not None else 0,
        frames_rendered=frames_rendered,
        predicted_gamma_fb=predicted_gamma,
        gamma_gas=gamma,
        init_temperature=t_init,
        frames=kept_frames,
    )


# ---------------------------------------------------------------------------
# per-run analysis


@dataclass
class RunAnalysis:
    psd: Psd
    peak: PeakInfo
    area: float
    t_mass: float
    n_samples: int
    settle_s: float
    label: str
    lost: bool

    def t_calibrated(self, calib: TemperatureCalibration) -> float:
        return calib.kelvin_per_m2 * self.area


def _auto_settle(cfg: ExperimentConfig, artifacts: RunArtifacts) -> float:
    if cfg.run.settle_s != "auto":
        return float(cfg.run.settle_s)
    if artifacts.lost:
        return 0.0  # never settled; keep the whole partial trace
    gamma_tot = artifacts.gamma_gas + max(artifacts.predicted_gamma_fb, 0.0)
    if cfg.feedback is not None and cfg.feedback.enabled and gamma_tot > 0.0:
        return min(5.0 / gamma_tot, cfg.run.duration_s / 3.0)
    return 0.0  # feedback off starts from the stationary distribution


def analyze_run(
    artifacts: RunArtifacts,
    label: str | None = None,
    settle_s: float | None = None,
    segment_periods: float = 20.0,
) -> RunAnalysis:
    """Welch PSD, peak location, band area, and mass-based temperature."""
    cfg = artifacts.config
    if label is None:
        label = "out_of_loop" if "out_of_loop" in artifacts.est_traces else \
            cfg.cameras[0].label
    trace = artifacts.trace_array(label)
    if settle_s is None:
        settle_s = _auto_settle(cfg, artifacts)
    keep = trace[:, 0] >= settle_s
    zs = trace[keep, 1]
    channel = cfg.camera_channel(label)
    fs = float(channel.fps_fraction)
    f0 = cfg.trap.omega0 / (2.0 * math.pi)
    seg = default_segment_len(fs, f0, zs.size, min_periods=segment_periods)
    if artifacts.lost and zs.size < 2 * seg:
        # runaway heating lost the particle before a spectrum is possible;
        # fall back to the raw variance (full-band Parseval equivalent)
        area = float(np.var(zs)) if zs.size > 1 else math.inf
        omega0 = cfg.trap.omega0
        mass = particle_mass(cfg.particle)
        peak = PeakInfo(f_peak=f0, fwhm=math.nan, band=(f0 - 5.0, f0 + 5.0),
                        omega_cm=omega0, fit_ok=False)
        return RunAnalysis(
            psd=Psd(freqs=np.array([0.0, fs / 2.0]), values=np.zeros(2),
                    df=fs / 2.0, window="none", n_segments=0, fs=fs),
            peak=peak, area=area,
            t_mass=mass * omega0**2 * area / K_BOLTZMANN,
            n_samples=int(zs.size), settle_s=settle_s, label=label, lost=True,
        )
    psd = welch_psd(zs, fs, segment_len=seg)
    search = (max(psd.df, 0.2 * f0), min(3.0 * f0, 0.95 * psd.freqs[-1]))
    peak = locate_peak(psd, search_band=search)
    area = peak_area(psd, peak.band)
    cap = sho_capture_fraction(peak.band, peak.f_peak, peak.fwhm)
    mass = particle_mass(cfg.particle)
    t_mass = mass * peak.omega_cm**2 * (area / cap) / K_BOLTZMANN
    return RunAnalysis(
        psd=psd, peak=peak, area=area, t_mass=t_mass, n_samples=int(zs.size),
        settle_s=settle_s, label=label, lost=artifacts.lost,
    )


# ---------------------------------------------------------------------------
# artifact files


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_run_artifacts(artifacts: RunArtifacts, outdir, write_frames=None) -> None:
    os.makedirs(outdir, exist_ok=True)
    cfg = artifacts.config
    if cfg.raw_text:
        with open(os.path.join(outdir, "config.ini"), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(cfg.raw_text)
    meta = {
        "config_hash": artifacts.config_hash,
        "seed": artifacts.seed,
        "version": artifacts.version,
        "lost": artifacts.lost,
        "lost_t": artifacts.lost_t,
        "estimator_failures": artifacts.estimator_failures,
        "saturation_count": artifacts.saturation_count,
        "frames_rendered": artifacts.frames_rendered,
        "predicted_gamma_fb": artifacts.predicted_gamma_fb,
        "gamma_gas": artifacts.gamma_gas,
        "init_temperature": artifacts.init_temperature,
    }
    with open(os.path.join(outdir, "metadata.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(os.path.join(outdir, "trace_true.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("t_s,z_true_m,v_true_m_s\n")
        for t, zz, vv in zip(artifacts.true_t, artifacts.true_z, artifacts.true_v):
            fh.write(f"{_fmt(t)},{_fmt(zz)},{_fmt(vv)}\n")
    for label, rows in artifacts.est_traces.items():
        path = os.path.join(outdir, f"trace_{label}.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t_s,z_est_m,x_est_m,estimator,quality\n")
            for t, zz, xx, est, q in rows:
                fh.write(f"{_fmt(t)},{_fmt(zz)},{_fmt(xx)},{est},{_fmt(q)}\n")
    if artifacts.controller_rows:
        with open(os.path.join(outdir, "controller.csv"), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write("tick,t_s,z_raw_m,z_delayed_m,z_filtered_m,v_out_v,saturated\n")
            for r in artifacts.controller_rows:
                fh.write(
                    f"{r.tick},{_fmt(r.t)},{_fmt(r.z_raw)},{_fmt(r.z_delayed)},"
                    f"{_fmt(r.z_filtered)},{_fmt(r.v_out)},{int(r.saturated)}\n"
                )
    if write_frames is None:
        write_frames = cfg.outputs.write_frames
    if write_frames and artifacts.frames:
        fdir = os.path.join(outdir, "frames")
        os.makedirs(fdir, exist_ok=True)

        class _F:
            pass

        for label, k, counts in artifacts.frames:
            holder = _F()
            holder.counts = counts
            write_frame_u16(holder, os.path.join(fdir, f"{label}_{k:08d}.u16"))


# ---------------------------------------------------------------------------
# sweeps


def sweep_workers(explicit: int | None = None) -> int:
    if explicit is not None:
        return max(1, explicit)
    env = os.environ.get("LEVICOOL_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"LEVICOOL_WORKERS must be an integer, got {env!r}")
    return 1


def _derive_point(base: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    if axis == "phase":
        return with_phase(base, value)
    if axis == "gain":
        return with_gain(base, value)
    if axis == "pressure":
        return with_pressure(base, value)
    raise ConfigError(f"unknown sweep axis {axis!r}")


def _sweep_job(args):
    tag, cfg = args
    artifacts = run_closed_loop(cfg)
    analysis = analyze_run(artifacts)
    row = SweepRow(
        param=tag[0],
        area_m2=analysis.area,
        t_eff_k=analysis.t_mass,  # recalibrated later when references exist
        omega_cm_rad_s=analysis.peak.omega_cm,
        seed=cfg.run.seed,
        feedback_on=tag[2],
        lost=artifacts.lost,
        predicted_gamma_fb=artifacts.predicted_gamma_fb,
    )
    return tag, row


@dataclass
class SweepResult:
    axis: str
    rows_on: list
    rows_off: list
    summary: dict
    calibration: TemperatureCalibration | None


def run_sweep(
    base_cfg: ExperimentConfig,
    axis: str,
    grid,
    seeds_per_point: int = 2,
    workers: int | None = None,
    out_dir=None,
    calibrate_from_max_pressure: bool = True,
) -> SweepResult:
    """Independent runs per (grid point, seed) with paired seeds across points.

    Feedback-off references: one per seed for phase/gain sweeps (environment
    is shared), one per (pressure, seed) for pressure sweeps.  For pressure
    sweeps the temperature column is recalibrated from the feedback-off runs
    at the highest grid pressure; other axes keep the mass-based conversion.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid is empty")
    if base_cfg.feedback is None:
        raise ConfigError("sweeps need a [feedback] section in the base config")
    jobs = []
    for value in grid:
        point = _derive_point(base_cfg, axis, value)
        for i in range(seeds_per_point):
            cfg_i = with_seed(point, base_cfg.run.seed + i)
            jobs.append(((value, i, True), cfg_i))
    if axis == "pressure":
        for value in grid:
            point = with_feedback_enabled(_derive_point(base_cfg, axis, value), False)
            for i in range(seeds_per_point):
                jobs.append(((value, i, False), with_seed(point, base_cfg.run.seed + i)))
    else:
        off = with_feedback_enabled(base_cfg, False)
        for i in range(seeds_per_point):
            jobs.append(
                ((math.nan, i, False), with_seed(off, base_cfg.run.seed + i))
            )

    n_workers = sweep_workers(workers)
    results = {}
    failures = []
    if n_workers > 1:
        from concurrent.futures import ProcessPoolExecutor, as_completed

        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = {pool.submit(_sweep_job, job): job for job in jobs}
            for fut in as_completed(futures):
                job = futures[fut]
                try:
                    tag, row = fut.result()
                    results[tag] = row
                except Exception as exc:  # record and continue per spec
                    failures.append({"tag": repr(job[0]), "error": str(exc)})
    else:
        for job in jobs:
            try:
                tag, row = _sweep_job(job)
                results[tag] = row
            except Exception as exc:  # record and continue per spec
                failures.append({"tag": repr(job[0]), "error": str(exc)})

    rows_on = [results[t] for t in sorted(results) if t[2]]
    rows_off = [results[t] for t in sorted(results) if not t[2]]

    calibration = None
    if axis == "pressure" and calibrate_from_max_pressure and rows_off:
        p_ref = max(grid)
        ref_areas = [r.area_m2 for r in rows_off if r.param == p_ref and not r.lost]
        if ref_areas:
            calibration = calibrate_temperature(
                ref_areas, base_cfg.environment.bath_temperature
            )
            for r in rows_on + rows_off:
                r.t_eff_k = calibration.kelvin_per_m2 * r.area_m2

    summary = sweep_summary(rows_on + rows_off)
    summary["axis"] = axis
    summary["grid"] = [float(g) for g in grid]
    summary["seeds_per_point"] = seeds_per_point
    if failures:
        summary["failures"] = failures
    result = SweepResult(
        axis=axis, rows_on=rows_on, rows_off=rows_off, summary=summary,
        calibration=calibration,
    )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_sweep_csv(rows_on, os.path.join(out_dir, "sweep.csv"))
        write_sweep_csv(rows_off, os.path.join(out_dir, "sweep_reference.csv"))
        serializable = {
            k: v for k, v in summary.items() if k not in ("rows",)
        }
        serializable["aggregated"] = summary["aggregated"]
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8",
                  newline="\n") as fh:
            json.dump(serializable, fh, sort_keys=True, indent=1, default=float)
            fh.write("\n")
    return result
