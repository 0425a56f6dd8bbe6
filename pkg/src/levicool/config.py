"""Experiment configuration: flat sectioned key-value files.

Grammar example::

    [trap]
    omega0_hz = 23.5

    [camera.in_loop]
    fps = 221
    roi = 20x30

Sections: particle, trap, environment, camera.<label>, feedback (optional),
run, outputs (optional).  Unknown sections or keys are errors.  Camera fps
values are kept as exact fractions for the loop clock (875.26 fps is the
fraction 87526/100), so frame timestamps never accumulate float drift.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .dynamics import (
    AIR_MOLECULAR_MASS,
    Environment,
    ParticleProps,
    TrapConfig,
)
from .errors import ConfigError
from .feedback import FeedbackConfig, DacSpec, calibrate_cutoff, default_force_coeff, split_delay
from .imaging import CameraModel

IN_LOOP = "in_loop"
OUT_OF_LOOP = "out_of_loop"


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str = "centroid"  # peak | centroid | gaussian_fit
    power: int = 1
    background: str = "none"

    def __post_init__(self):
        if self.kind not in ("peak", "centroid", "gaussian_fit"):
            raise ConfigError(f"unknown estimator {self.kind!r}")
        if self.power < 1:
            raise ConfigError("centroid power must be >= 1")


@dataclass(frozen=True)
class CameraChannel:
    camera: CameraModel
    fps_fraction: Fraction
    estimator: EstimatorSpec

    @property
    def label(self) -> str:
        return self.camera.label


@dataclass(frozen=True)
class RunSettings:
    duration_s: float
    seed: int
    substeps_per_frame: int = 16
    init: str = "auto"  # auto | bath | <temperature in K>
    blur_subsamples: int = 1
    settle_s: str = "auto"  # auto | <seconds>

    def __post_init__(self):
        if self.duration_s <= 0.0:
            raise ConfigError("duration must be > 0")
        if self.substeps_per_frame < 1:
            raise ConfigError("substeps_per_frame must be >= 1")
        if self.blur_subsamples < 1:
            raise ConfigError("blur_subsamples must be >= 1")
        if self.init not in ("auto", "bath"):
            try:
                float(self.init)
            except ValueError:
                raise ConfigError(f"init must be auto, bath, or a temperature; got {self.init!r}")
        if self.settle_s != "auto":
            try:
                float(self.settle_s)
            except ValueError:
                raise ConfigError(f"settle_s must be auto or seconds; got {self.settle_s!r}")


@dataclass(frozen=True)
class OutputSettings:
    directory: str = ""
    write_frames: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    particle: ParticleProps
    trap: TrapConfig
    environment: Environment
    cameras: tuple[CameraChannel, ...]
    feedback: FeedbackConfig | None
    run: RunSettings
    outputs: OutputSettings = field(default_factory=OutputSettings)
    feedback_delay_phase_deg: float | None = None  # bookkeeping for sweeps
    raw_text: str = ""

    def __post_init__(self):
        if not self.cameras:
            raise ConfigError("at least one camera is required")
        labels = [c.label for c in self.cameras]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate camera labels {labels}")
        if self.feedback is not None and self.feedback.enabled and IN_LOOP not in labels:
            raise ConfigError("feedback requires a camera labeled in_loop")

    def camera_channel(self, label: str) -> CameraChannel | None:
        for c in self.cameras:
            if c.label == label:
                return c
        return None

    @property
    def in_loop(self) -> CameraChannel | None:
        return self.camera_channel(IN_LOOP)

    @property
    def out_of_loop(self) -> CameraChannel | None:
        return self.camera_channel(OUT_OF_LOOP)


_SECTION_KEYS = {
    "particle": {"diameter_nm", "density_kg_m3", "charge_number"},
    "trap": {"omega0_hz", "z0_mm", "r0_mm", "drive_freq_hz", "v_endcap", "v_ac_pp"},
    "environment": {
        "pressure_mbar", "bath_temperature_k", "gas_molecular_mass_kg",
        "excess_force_psd_n2_hz",
    },
    "camera": {
        "fps", "pixel_pitch_um", "magnification", "roi", "psf_sigma_px",
        "photons_per_frame", "background_per_px", "read_noise_rms", "exposure",
        "estimator", "centroid_power", "background_policy",
    },
    "feedback": {
        "enabled", "delay_phase_deg", "delay_s", "gain", "filter_phase_target_deg",
        "filter_cutoff_hz", "dac_bits", "dac_vref", "sign", "force_geometry_factor",
        "force_coeff_n_per_v", "volts_per_meter", "processing_latency_ms",
    },
    "run": {"duration_s", "seed", "substeps_per_frame", "init", "blur_subsamples", "settle_s"},
    "outputs": {"directory", "write_frames"},
}


def _check_keys(section: str, keys, allowed_key: str):
    unknown = set(keys) - _SECTION_KEYS[allowed_key]
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def _get(parser, section, key, default=None, cast=float):
    if parser.has_option(section, key):
        raw = parser.get(section, key)
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None
    if default is None:
        raise ConfigError(f"missing required key {key!r} in [{section}]")
    return default


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _roi(raw: str) -> tuple[int, int]:
    try:
        w, h = raw.lower().split("x")
        return int(w), int(h)
    except Exception:
        raise ValueError(f"ROI must look like 20x30, got {raw!r}")


def _parse_camera(parser, section: str, label: str) -> CameraChannel:
    _check_keys(section, parser.options(section), "camera")
    fps_raw = parser.get(section, "fps") if parser.has_option(section, "fps") else None
    if fps_raw is None:
        raise ConfigError(f"missing required key 'fps' in [{section}]")
    try:
        fps_fraction = Fraction(fps_raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] fps must be a decimal or fraction, got {fps_raw!r}")
    camera = CameraModel(
        pixel_pitch=_get(parser, section, "pixel_pitch_um", 5.35) * 1e-6,
        magnification=_get(parser, section, "magnification", 0.1),
        fps=float(fps_fraction),
        roi=_get(parser, section, "roi", (20, 30), cast=_roi),
        psf_sigma=_get(parser, section, "psf_sigma_px", 1.5),
        photons_per_frame=_get(parser, section, "photons_per_frame", 2.0e4),
        background_per_px=_get(parser, section, "background_per_px", 20.0),
        read_noise_rms=_get(parser, section, "read_noise_rms", 2.0),
        exposure=_get(parser, section, "exposure", 1.0),
        label=label,
    )
    estimator = EstimatorSpec(
        kind=_get(parser, section, "estimator", "centroid", cast=str).strip(),
        power=_get(parser, section, "centroid_power", 1, cast=int),
        background=_get(parser, section, "background_policy", "none", cast=str).strip(),
    )
    return CameraChannel(camera=camera, fps_fraction=fps_fraction, estimator=estimator)


def _parse_feedback(parser, omega0: float, in_loop: CameraChannel | None,
                    particle: ParticleProps, trap: TrapConfig):
    if not parser.has_section("feedback"):
        return None, None
    section = "feedback"
    _check_keys(section, parser.options(section), "feedback")
    if in_loop is None:
        raise ConfigError("[feedback] present but no [camera.in_loop] section")
    fps = float(in_loop.fps_fraction)
    f0 = omega0 / (2.0 * math.pi)

    phase_deg = None
    if parser.has_option(section, "delay_phase_deg"):
        if parser.has_option(section, "delay_s"):
            raise ConfigError("specify only one of delay_phase_deg and delay_s")
        phase_deg = _get(parser, section, "delay_phase_deg")
        total_delay = (phase_deg / 360.0) / f0
    else:
        total_delay = _get(parser, section, "delay_s", 0.25 / f0)
    coarse, fine = split_delay(total_delay, fps)

    if parser.has_option(section, "filter_cutoff_hz"):
        cutoff = _get(parser, section, "filter_cutoff_hz")
    else:
        cutoff = calibrate_cutoff(
            f0, fps, _get(parser, section, "filter_phase_target_deg", 150.0)
        )

    if parser.has_option(section, "force_coeff_n_per_v"):
        force_coeff = _get(parser, section, "force_coeff_n_per_v")
    else:
        force_coeff = default_force_coeff(
            particle.charge_number, trap.z0,
            _get(parser, section, "force_geometry_factor", 0.25),
        )

    cfg = FeedbackConfig(
        coarse_delay_frames=coarse,
        fine_delay=fine,
        gain=_get(parser, section, "gain", 0.0),
        filter_cutoff_hz=cutoff,
        dac=DacSpec(
            bits=_get(parser, section, "dac_bits", 12, cast=int),
            vref=_get(parser, section, "dac_vref", 3.3),
        ),
        sign=_get(parser, section, "sign", -1, cast=int),
        force_coeff=force_coeff,
        volts_per_meter=_get(parser, section, "volts_per_meter", 2000.0),
        processing_latency=_get(parser, section, "processing_latency_ms", 0.9) * 1e-3,
        enabled=_get(parser, section, "enabled", True, cast=_bool),
    )
    return cfg, phase_deg


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None

    known = {"particle", "trap", "environment", "feedback", "run", "outputs"}
    camera_sections = []
    for section in parser.sections():
        if section.startswith("camera."):
            label = section.split(".", 1)[1]
            if label not in (IN_LOOP, OUT_OF_LOOP):
                raise ConfigError(
                    f"camera label must be {IN_LOOP!r} or {OUT_OF_LOOP!r}, got {label!r}"
                )
            camera_sections.append((section, label))
        elif section not in known:
            raise ConfigError(f"unknown section [{section}]")

    for name in ("particle", "trap", "environment", "run"):
        if not parser.has_section(name):
            raise ConfigError(f"missing required section [{name}]")
    _check_keys("particle", parser.options("particle"), "particle")
    _check_keys("trap", parser.options("trap"), "trap")
    _check_keys("environment", parser.options("environment"), "environment")
    _check_keys("run", parser.options("run"), "run")
    if parser.has_section("outputs"):
        _check_keys("outputs", parser.options("outputs"), "outputs")

    particle = ParticleProps(
        diameter=_get(parser, "particle", "diameter_nm", 450.0) * 1e-9,
        density=_get(parser, "particle", "density_kg_m3", 2200.0),
        charge_number=_get(parser, "particle", "charge_number", 500, cast=int),
    )
    trap = TrapConfig(
        omega0=2.0 * math.pi * _get(parser, "trap", "omega0_hz", 23.5),
        z0=_get(parser, "trap", "z0_mm", 7.0) * 1e-3,
        r0=_get(parser, "trap", "r0_mm", 6.0) * 1e-3,
        drive_freq=_get(parser, "trap", "drive_freq_hz", 600.0),
        v_endcap=_get(parser, "trap", "v_endcap", 10.0),
        v_ac_pp=_get(parser, "trap", "v_ac_pp", 600.0),
    )
    environment = Environment(
        pressure_mbar=_get(parser, "environment", "pressure_mbar"),
        bath_temperature=_get(parser, "environment", "bath_temperature_k", 300.0),
        gas_molecular_mass=_get(
            parser, "environment", "gas_molecular_mass_kg", AIR_MOLECULAR_MASS
        ),
        excess_force_psd=_get(parser, "environment", "excess_force_psd_n2_hz", 0.0),
    )
    cameras = tuple(
        _parse_camera(parser, section, label) for section, label in sorted(camera_sections)
    )
    if not cameras:
        raise ConfigError("at least one [camera.*] section is required")
    in_loop = next((c for c in cameras if c.label == IN_LOOP), None)
    fb, phase_deg = _parse_feedback(parser, trap.omega0, in_loop, particle, trap)
    run = RunSettings(
        duration_s=_get(parser, "run", "duration_s"),
        seed=_get(parser, "run", "seed", cast=int),
        substeps_per_frame=_get(parser, "run", "substeps_per_frame", 16, cast=int),
        init=_get(parser, "run", "init", "auto", cast=str).strip(),
        blur_subsamples=_get(parser, "run", "blur_subsamples", 1, cast=int),
        settle_s=_get(parser, "run", "settle_s", "auto", cast=str).strip(),
    )
    outputs = OutputSettings(
        directory=_get(parser, "outputs", "directory", "", cast=str).strip()
        if parser.has_section("outputs") else "",
        write_frames=_get(parser, "outputs", "write_frames", False, cast=_bool)
        if parser.has_section("outputs") else False,
    )
    return ExperimentConfig(
        particle=particle, trap=trap, environment=environment, cameras=cameras,
        feedback=fb, run=run, outputs=outputs,
        feedback_delay_phase_deg=phase_deg, raw_text=text,
    )


def parse_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable hash of everything that affects a run (raw text excluded)."""
    core = repr((
        cfg.particle, cfg.trap, cfg.environment,
        tuple((c.camera, str(c.fps_fraction), c.estimator) for c in cfg.cameras),
        cfg.feedback, cfg.run,
    ))
    return hashlib.sha256(core.encode()).hexdigest()[:16]


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, run=replace(cfg.run, seed=seed))


def with_pressure(cfg: ExperimentConfig, pressure_mbar: float) -> ExperimentConfig:
    return replace(cfg, environment=replace(cfg.environment, pressure_mbar=pressure_mbar))


def with_gain(cfg: ExperimentConfig, gain: float) -> ExperimentConfig:
    if cfg.feedback is None:
        raise ConfigError("config has no feedback section")
    return replace(cfg, feedback=replace(cfg.feedback, gain=gain))


def with_feedback_enabled(cfg: ExperimentConfig, enabled: bool) -> ExperimentConfig:
    if cfg.feedback is None:
        raise ConfigError("config has no feedback section")
    return replace(cfg, feedback=replace(cfg.feedback, enabled=enabled))


def with_phase(cfg: ExperimentConfig, delay_phase_deg: float) -> ExperimentConfig:
    if cfg.feedback is None:
        raise ConfigError("config has no feedback section")
    if cfg.in_loop is None:
        raise ConfigError("config has no in-loop camera")
    fps = float(cfg.in_loop.fps_fraction)
    f0 = cfg.trap.omega0 / (2.0 * math.pi)
    coarse, fine = split_delay((delay_phase_deg / 360.0) / f0, fps)
    fb = replace(cfg.feedback, coarse_delay_frames=coarse, fine_delay=fine)
    return replace(cfg, feedback=fb, feedback_delay_phase_deg=delay_phase_deg)
