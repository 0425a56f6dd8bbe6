"""Feedback chain: delayed, filtered, gain-scaled, quantized end-cap voltage.

Velocity damping is realized by delaying the measured position by roughly a
quarter oscillation period instead of differentiating it.  The chain per
in-loop frame is

    position sample -> coarse delay (integer frames) -> 2nd-order low-pass
    -> gain/sign scaling to DAC volts -> quantization/saturation
    -> actuation scheduled fine_delay + processing latency after the sample.

The low-pass runs at the frame rate; its cutoff is normally chosen by
`calibrate_cutoff` so that its phase lag at the trap frequency hits a target
(about 150 degrees for the default trap, with the electrode geometry
contributing a further 180 degrees via the sign).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

from .errors import ConfigError, SequencingError
from .localization import PositionSample

ELEMENTARY_CHARGE = 1.602176634e-19


@dataclass(frozen=True)
class DacSpec:
    bits: int = 12
    vref: float = 3.3  # V full scale; output saturates at +/- vref/2

    def __post_init__(self):
        if not (8 <= self.bits <= 16):
            raise ConfigError(f"dac bits must be within [8, 16], got {self.bits}")
        if self.vref <= 0.0:
            raise ConfigError("dac vref must be > 0")

    @property
    def step(self) -> float:
        return self.vref / (1 << self.bits)


@dataclass(frozen=True)
class FeedbackConfig:
    coarse_delay_frames: int
    fine_delay: float  # s, in [0, frame period)
    gain: float  # dimensionless attenuation of the position-proportional DAC voltage
    filter_cutoff_hz: float
    dac: DacSpec = field(default_factory=DacSpec)
    sign: int = -1  # electrode geometry: -1 adds a 180 degree phase
    force_coeff: float = 2.861e-15  # N/V on the particle per feedback volt
    volts_per_meter: float = 2000.0  # position-to-DAC-voltage transducer scale
    processing_latency: float = 0.9e-3  # s between frame midpoint and actuation eligibility
    enabled: bool = True

    def __post_init__(self):
        if self.coarse_delay_frames < 0:
            raise ConfigError("coarse delay must be >= 0 frames")
        if self.fine_delay < 0.0:
            raise ConfigError("fine delay must be >= 0")
        if self.gain < 0.0:
            raise ConfigError("gain must be >= 0")
        if self.sign not in (-1, 1):
            raise ConfigError(f"sign must be +1 or -1, got {self.sign}")
        if self.filter_cutoff_hz <= 0.0:
            raise ConfigError("filter cutoff must be > 0")
        if self.processing_latency < 0.0:
            raise ConfigError("processing latency must be >= 0")


def optimal_delay(omega0: float) -> float:
    """Quarter-period delay pi/(2 omega0) that maps position onto velocity."""
    if omega0 <= 0.0:
        raise ConfigError("omega0 must be > 0")
    return math.pi / (2.0 * omega0)


def split_delay(total_delay: float, fps: float) -> tuple[int, float]:
    """Split a delay into whole camera frames plus a sub-frame remainder."""
    if total_delay < 0.0:
        raise ConfigError("delay must be >= 0")
    coarse = int(math.floor(total_delay * fps))
    fine = total_delay - coarse / fps
    if fine >= 1.0 / fps:  # guard the exact-multiple float edge
        coarse += 1
        fine = 0.0
    return coarse, max(fine, 0.0)


class Biquad:
    """Discrete 2nd-order low-pass (RBJ bilinear design, Q = 1/sqrt(2)).

    DC gain is exactly 1.  State is two accumulators (transposed direct
    form II), matching the controller's persisted filter state.
    """

    def __init__(self, cutoff_hz: float, fs: float):
        if cutoff_hz >= fs / 2.0:
            raise ConfigError(
                f"cutoff {cutoff_hz:.3g} Hz >= Nyquist of the {fs:.4g} Hz actuation rate"
            )
        if cutoff_hz <= 0.0:
            raise ConfigError("cutoff must be > 0")
        self.cutoff_hz = cutoff_hz
        self.fs = fs
        w0 = 2.0 * math.pi * cutoff_hz / fs
        q = 1.0 / math.sqrt(2.0)
        alpha = math.sin(w0) / (2.0 * q)
        cw = math.cos(w0)
        a0 = 1.0 + alpha
        self.b0 = (1.0 - cw) / 2.0 / a0
        self.b1 = (1.0 - cw) / a0
        self.b2 = (1.0 - cw) / 2.0 / a0
        self.a1 = -2.0 * cw / a0
        self.a2 = (1.0 - alpha) / a0
        self.s1 = 0.0
        self.s2 = 0.0

    def step(self, x: float) -> float:
        y = self.b0 * x + self.s1
        self.s1 = self.b1 * x - self.a1 * y + self.s2
        self.s2 = self.b2 * x - self.a2 * y
        return y

    def reset(self):
        self.s1 = 0.0
        self.s2 = 0.0

    def response_at(self, f_hz: float) -> complex:
        z1 = complex(math.cos(2.0 * math.pi * f_hz / self.fs),
                     -math.sin(2.0 * math.pi * f_hz / self.fs))
        num = self.b0 + self.b1 * z1 + self.b2 * z1 * z1
        den = 1.0 + self.a1 * z1 + self.a2 * z1 * z1
        return num / den

    def phase_lag_deg(self, f_hz: float) -> float:
        """Phase lag (positive degrees) at f_hz, unwrapped to [0, 360)."""
        lag = -math.degrees(math.atan2(self.response_at(f_hz).imag,
                                       self.response_at(f_hz).real))
        return lag % 360.0

    def gain_at(self, f_hz: float) -> float:
        return abs(self.response_at(f_hz))


def calibrate_cutoff(f0_hz: float, fs: float, target_lag_deg: float = 150.0) -> float:
    """Cutoff frequency whose discrete low-pass lags `target_lag_deg` at f0.

    Bisection on the monotone lag-vs-cutoff curve; raises ConfigError when the
    target is unreachable at this sample rate.
    """
    if not (0.0 < target_lag_deg < 180.0):
        raise ConfigError("target phase lag must be in (0, 180) degrees")
    lo, hi = f0_hz * 1e-3, 0.999 * fs / 2.0
    lag_lo = Biquad(lo, fs).phase_lag_deg(f0_hz)
    lag_hi = Biquad(hi, fs).phase_lag_deg(f0_hz)
    if not (lag_hi <= target_lag_deg <= lag_lo):
        raise ConfigError(
            f"phase target {target_lag_deg} deg at {f0_hz} Hz unreachable "
            f"(range {lag_hi:.1f}..{lag_lo:.1f} deg)"
        )
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if Biquad(mid, fs).phase_lag_deg(f0_hz) > target_lag_deg:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-12:
            break
    return math.sqrt(lo * hi)


def dac_output(value_m: float, dac: DacSpec, gain: float, sign: int,
               volts_per_meter: float) -> tuple[float, bool]:
    """Position value to quantized, attenuated feedback volts.

    The DAC pin emits the full-scale position signal V0 = volts_per_meter *
    value, quantized to 2^bits levels and saturated at +/- vref/2; the
    analog attenuation sign * gain is applied downstream, so quantization
    noise scales with the gain instead of forming a dead zone at small gain.
    Returns (volts, saturated).
    """
    v0 = volts_per_meter * value_m
    step = dac.step
    v_q = math.floor(v0 / step + 0.5) * step
    limit = dac.vref / 2.0
    saturated = False
    if v_q > limit:
        v_q, saturated = limit, True
    elif v_q < -limit:
        v_q, saturated = -limit, True
    return sign * gain * v_q, saturated


def default_force_coeff(charge_number: int, z0: float,
                        geometry_factor: float = 0.25) -> float:
    """Force per feedback volt: charge * geometry_factor / z0."""
    return charge_number * ELEMENTARY_CHARGE * geometry_factor / z0


def force_on_particle(v_fb: float, cfg: FeedbackConfig) -> float:
    """Zero-order-hold force on the particle for an applied feedback voltage."""
    if not cfg.enabled:
        return 0.0
    return cfg.force_coeff * v_fb


@dataclass
class ScheduledActuation:
    t: float  # s, when the voltage reaches the electrode
    volts: float
    tick: int


@dataclass
class TelemetryRow:
    tick: int
    t: float
    z_raw: float
    z_delayed: float
    z_filtered: float
    v_out: float
    saturated: bool


class Controller:
    """Single-owner, strictly sequential feedback controller.

    Holds the coarse delay ring, the low-pass state, and the last output.
    `ingest` consumes one in-loop PositionSample and (once the delay line is
    full) returns the actuation scheduled fine_delay + processing latency
    after the sample timestamp.
    """

    def __init__(self, cfg: FeedbackConfig, fps: float, keep_telemetry: bool = True):
        if not (0.0 <= cfg.fine_delay < 1.0 / fps):
            raise ConfigError(
                f"fine delay {cfg.fine_delay:.6g} s must lie within one "
                f"frame period (1/{fps:.4g} s)"
            )
        self.cfg = cfg
        self.fps = fps
        self.buffer: deque = deque(maxlen=cfg.coarse_delay_frames + 1)
        self.filter = Biquad(cfg.filter_cutoff_hz, fps)
        self.last_output_v = 0.0
        self.last_update_t = -math.inf
        self.saturation_count = 0
        self.tick = 0
        self.telemetry: list[TelemetryRow] | None = [] if keep_telemetry else None

    def ingest(self, sample: PositionSample) -> ScheduledActuation | None:
        if sample.t <= self.last_update_t:
            raise SequencingError(
                f"sample at t={sample.t} not after last t={self.last_update_t}"
            )
        self.last_update_t = sample.t
        self.buffer.append((sample.t, sample.z_est))
        tick = self.tick
        self.tick += 1
        if len(self.buffer) < self.buffer.maxlen:
            return None  # delay line still warming up
        delayed = self.buffer[0][1]
        filtered = self.filter.step(delayed)
        volts, saturated = dac_output(
            filtered, self.cfg.dac, self.cfg.gain, self.cfg.sign,
            self.cfg.volts_per_meter,
        )
        if saturated:
            self.saturation_count += 1
        self.last_output_v = volts
        if self.telemetry is not None:
            self.telemetry.append(
                TelemetryRow(tick, sample.t, sample.z_est, delayed, filtered,
                             volts, saturated)
            )
        t_act = sample.t + self.cfg.fine_delay + self.cfg.processing_latency
        return ScheduledActuation(t=t_act, volts=volts, tick=tick)


def loop_phase_budget(cfg: FeedbackConfig, omega0: float, fps: float) -> dict:
    """Phase accounting of the loop at the trap frequency, in degrees.

    `total_deg` follows the programmed-delay + filter + sign bookkeeping;
    `total_physical_deg` additionally counts the processing latency and the
    half-frame zero-order-hold lag that the particle actually experiences.
    """
    f0 = omega0 / (2.0 * math.pi)
    tau_prog = cfg.coarse_delay_frames / fps + cfg.fine_delay
    delay_deg = math.degrees(omega0 * tau_prog)
    filter_deg = Biquad(cfg.filter_cutoff_hz, fps).phase_lag_deg(f0)
    sign_deg = 180.0 if cfg.sign < 0 else 0.0
    extra_deg = math.degrees(omega0 * (cfg.processing_latency + 0.5 / fps))
    return {
        "delay_deg": delay_deg,
        "filter_deg": filter_deg,
        "sign_deg": sign_deg,
        "extra_deg": extra_deg,
        "total_deg": (delay_deg + filter_deg + sign_deg) % 360.0,
        "total_physical_deg": (delay_deg + filter_deg + sign_deg + extra_deg) % 360.0,
    }


def predicted_effective_damping(cfg: FeedbackConfig, omega0: float, fps: float,
                                mass: float) -> float:
    """Small-gain closed-form feedback damping rate (1/s, positive = cooling).

    Delayed position feedback of strength K at total loop phase phi adds
    Gamma = K sin(phi) / (m omega0), with K the position-to-force gain at the
    trap frequency (filter magnitude and the zero-order-hold sinc included).
    """
    if not cfg.enabled:
        return 0.0
    f0 = omega0 / (2.0 * math.pi)
    biq = Biquad(cfg.filter_cutoff_hz, fps)
    hold_half = 0.5 * omega0 / fps  # omega0 * T/2 radians
    sinc = math.sin(hold_half) / hold_half if hold_half > 0 else 1.0
    k = cfg.gain * cfg.volts_per_meter * cfg.force_coeff * biq.gain_at(f0) * abs(sinc)
    tau = cfg.coarse_delay_frames / fps + cfg.fine_delay + cfg.processing_latency
    phi = omega0 * (tau + 0.5 / fps) + math.radians(biq.phase_lag_deg(f0))
    if cfg.sign < 0:
        phi += math.pi
    return k * math.sin(phi) / (mass * omega0)


def design_feedback(
    omega0: float,
    fps: float,
    delay_phase_deg: float | None = None,
    total_delay_s: float | None = None,
    filter_phase_target_deg: float | None = 150.0,
    filter_cutoff_hz: float | None = None,
    **kwargs,
) -> FeedbackConfig:
    """Build a FeedbackConfig from phase-style inputs.

    Exactly one of delay_phase_deg / total_delay_s selects the programmed
    delay; exactly one of filter_phase_target_deg / filter_cutoff_hz selects
    the low-pass.
    """
    if (delay_phase_deg is None) == (total_delay_s is None):
        raise ConfigError("specify exactly one of delay_phase_deg or total_delay_s")
    if delay_phase_deg is not None:
        f0 = omega0 / (2.0 * math.pi)
        total_delay_s = (delay_phase_deg / 360.0) / f0
    coarse, fine = split_delay(total_delay_s, fps)
    if filter_cutoff_hz is None:
        if filter_phase_target_deg is None:
            raise ConfigError("specify filter_phase_target_deg or filter_cutoff_hz")
        f0 = omega0 / (2.0 * math.pi)
        filter_cutoff_hz = calibrate_cutoff(f0, fps, filter_phase_target_deg)
    return FeedbackConfig(
        coarse_delay_frames=coarse,
        fine_delay=fine,
        filter_cutoff_hz=filter_cutoff_hz,
        **kwargs,
    )


def with_delay_phase(cfg: FeedbackConfig, omega0: float, fps: float,
                     delay_phase_deg: float) -> FeedbackConfig:
    """Copy of cfg with the programmed delay set from a phase in degrees."""
    f0 = omega0 / (2.0 * math.pi)
    coarse, fine = split_delay((delay_phase_deg / 360.0) / f0, fps)
    return replace(cfg, coarse_delay_frames=coarse, fine_delay=fine)
