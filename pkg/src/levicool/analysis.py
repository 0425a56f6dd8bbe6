"""PSD estimation and effective-temperature calibration.

The motional peak area of the one-sided position PSD is proportional to the
center-of-mass energy, so temperatures are reported two ways:

- calibrated: T_eff = calib_coeff * area, with the coefficient fixed by
  reference runs at high pressure where the particle thermalizes with the gas
  at room temperature (no mass knowledge needed);
- mass-based cross-check: T = m * omega_cm^2 * area / k_B, available in
  simulation where the mass is always known.  This route divides by the
  in-band capture fraction of the fitted Lorentzian so that band truncation
  does not bias it; the calibrated route needs no such correction because the
  truncation cancels in the area ratio.

Spectral convention: one-sided densities in m^2/Hz on a frequency grid in Hz;
integrals are taken over f (Hz), with any 2*pi bookkeeping folded into the
calibration coefficient.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.constants import k as K_BOLTZMANN
from scipy.optimize import curve_fit

from .errors import BandError, CalibrationError, ConfigError, InsufficientDataError


@dataclass
class Psd:
    freqs: np.ndarray  # Hz
    values: np.ndarray  # m^2/Hz, one-sided
    df: float  # Hz
    window: str
    n_segments: int
    fs: float  # Hz

    def variance(self) -> float:
        """Integral of the density over the full grid (trapezoid, Hz domain)."""
        return float(np.trapezoid(self.values, self.freqs))


def default_segment_len(fs: float, f0_hz: float, n_samples: int,
                        min_periods: float = 20.0) -> int:
    """Segment length covering >= min_periods oscillations, capped at n/2."""
    seg = int(round(min_periods * fs / f0_hz))
    return max(min(seg, n_samples // 2), 16)


def welch_psd(
    positions,
    fs: float,
    segment_len: int | None = None,
    overlap: float = 0.5,
    window: str = "hann",
    detrend: str = "constant",
) -> Psd:
    """One-sided Welch estimate normalized so that sum(values)*df = variance."""
    x = np.asarray(positions, dtype=float)
    if segment_len is None:
        segment_len = max(x.size // 8, 16)
    if x.size < 2 * segment_len:
        raise InsufficientDataError(
            f"trace of {x.size} samples is shorter than two {segment_len}-sample segments"
        )
    if not (0.0 <= overlap < 1.0):
        raise ConfigError("overlap must be in [0, 1)")
    noverlap = int(overlap * segment_len)
    freqs, values = signal.welch(
        x, fs=fs, window=window, nperseg=segment_len, noverlap=noverlap,
        detrend=detrend, return_onesided=True, scaling="density",
    )
    step = segment_len - noverlap
    n_segments = 1 + (x.size - segment_len) // step
    return Psd(
        freqs=freqs, values=values, df=float(freqs[1] - freqs[0]),
        window=f"{window},overlap={overlap}", n_segments=n_segments, fs=fs,
    )


def peak_area(psd: Psd, band: tuple[float, float]) -> float:
    """Noise-floor-subtracted trapezoidal integral of the PSD over `band`.

    The floor is the median of the density outside the band (zero when the
    band covers the whole grid); the integrand is clamped at zero.
    """
    f_lo, f_hi = band
    if f_lo >= f_hi:
        raise BandError(f"empty band {band}")
    if f_lo < psd.freqs[0] - 1e-12 or f_hi > psd.freqs[-1] + 1e-12:
        raise BandError(
            f"band {band} outside PSD range ({psd.freqs[0]:.3g}, {psd.freqs[-1]:.3g})"
        )
    inside = (psd.freqs >= f_lo) & (psd.freqs <= f_hi)
    if inside.sum() < 3:
        raise BandError(f"band {band} covers fewer than 3 PSD bins")
    outside = ~inside
    floor = float(np.median(psd.values[outside])) if outside.any() else 0.0
    integrand = np.clip(psd.values[inside] - floor, 0.0, None)
    return float(np.trapezoid(integrand, psd.freqs[inside]))


@dataclass
class PeakInfo:
    f_peak: float  # Hz, fitted center
    fwhm: float  # Hz, fitted Lorentzian full width at half maximum
    band: tuple[float, float]  # Hz, integration band
    omega_cm: float  # rad/s
    fit_ok: bool


def _lorentz(f, a, f0, hw, c):
    return a * hw * hw / ((f - f0) ** 2 + hw * hw) + c


def locate_peak(psd: Psd, search_band: tuple[float, float] | None = None,
                band_halfwidth_min_hz: float = 5.0,
                band_linewidths: float = 5.0) -> PeakInfo:
    """Find the motional peak and fix the integration band around it.

    Band = f_peak +/- max(band_linewidths * fwhm, band_halfwidth_min_hz),
    clamped to the usable PSD range.  The linewidth comes from a Lorentzian
    fit near the peak, falling back to the half-power width if the fit fails.
    """
    f = psd.freqs
    v = psd.values
    nyq_hi = 0.95 * f[-1]
    lo = f[1] if f[0] == 0.0 else f[0]
    if search_band is None:
        search_band = (lo, nyq_hi)
    s_lo, s_hi = max(search_band[0], lo), min(search_band[1], nyq_hi)
    sel = (f >= s_lo) & (f <= s_hi)
    if not sel.any():
        raise BandError(f"search band {search_band} has no PSD bins")
    idx = np.flatnonzero(sel)
    ipk = idx[int(np.argmax(v[idx]))]
    f_pk = float(f[ipk])
    floor = float(np.median(v[sel]))
    half = floor + 0.5 * (float(v[ipk]) - floor)

    # half-power half-width by walking away from the peak
    i_lo = ipk
    while i_lo > idx[0] and v[i_lo] > half:
        i_lo -= 1
    i_hi = ipk
    while i_hi < idx[-1] and v[i_hi] > half:
        i_hi += 1
    hw0 = max(0.5 * (f[i_hi] - f[i_lo]), psd.df)

    # Lorentzian refinement over a window around the peak
    win = (f >= f_pk - max(8.0 * hw0, 10.0 * psd.df)) & (
        f <= f_pk + max(8.0 * hw0, 10.0 * psd.df)
    )
    fit_ok = False
    f0_fit, hw_fit = f_pk, hw0
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            popt, _ = curve_fit(
                _lorentz, f[win], v[win],
                p0=(max(float(v[ipk]) - floor, 1e-300), f_pk, hw0, max(floor, 0.0)),
                bounds=(
                    (0.0, f_pk - 4.0 * hw0, psd.df / 10.0, 0.0),
                    (np.inf, f_pk + 4.0 * hw0, (s_hi - s_lo), np.inf),
                ),
                maxfev=2000,
            )
        f0_fit, hw_fit = float(popt[1]), float(popt[2])
        fit_ok = True
    except (RuntimeError, ValueError):
        pass

    fwhm = 2.0 * hw_fit
    half_band = max(band_linewidths * fwhm, band_halfwidth_min_hz)
    band = (max(f0_fit - half_band, lo), min(f0_fit + half_band, nyq_hi))
    return PeakInfo(
        f_peak=f0_fit, fwhm=fwhm, band=band,
        omega_cm=2.0 * math.pi * f0_fit, fit_ok=fit_ok,
    )


def capture_fraction(band: tuple[float, float], f0: float, fwhm: float) -> float:
    """Fraction of a Lorentzian line (center f0, given FWHM) inside `band`.

    Normalized against the one-sided (folded at f = 0) line, so a band
    covering all positive frequencies captures exactly 1.
    """
    hw = fwhm / 2.0
    if hw <= 0.0:
        return 1.0
    total = math.pi / 2.0 + math.atan(f0 / hw)
    frac = (
        math.atan((band[1] - f0) / hw) + math.atan((f0 - band[0]) / hw)
    ) / total
    return min(max(frac, 1e-6), 1.0)


def sho_capture_fraction(band: tuple[float, float], f0: float, fwhm: float) -> float:
    """Fraction of a damped-harmonic-oscillator line inside `band`.

    Uses the physical position response |chi(omega)|^2 with linewidth
    gamma = 2 pi fwhm, whose 1/omega^4 wings hold far less mass than a
    Lorentzian's; this is the right truncation correction for the
    mass-based temperature route.
    """
    if fwhm <= 0.0 or f0 <= 0.0:
        return 1.0
    gamma = 2.0 * math.pi * fwhm
    w0 = 2.0 * math.pi * f0
    w = np.linspace(2.0 * math.pi * max(band[0], 0.0), 2.0 * math.pi * band[1], 4001)
    s = 1.0 / ((w0**2 - w**2) ** 2 + (gamma * w) ** 2)
    part = float(np.trapezoid(s, w))
    total = math.pi / (2.0 * gamma * w0**2)
    return min(max(part / total, 1e-6), 1.0)


@dataclass
class TemperatureCalibration:
    kelvin_per_m2: float
    t_room: float
    n_references: int
    relative_spread: float


def calibrate_temperature(reference_areas, t_room: float = 300.0) -> TemperatureCalibration:
    """Calibration coefficient t_room / mean(reference peak areas)."""
    areas = np.asarray(list(reference_areas), dtype=float)
    if areas.size == 0:
        raise CalibrationError("no thermal-equilibrium reference runs supplied")
    if np.any(areas <= 0.0):
        raise CalibrationError("reference areas must be positive")
    spread = float((areas.max() - areas.min()) / areas.mean()) if areas.size > 1 else 0.0
    if spread > 0.10:
        warnings.warn(
            f"reference areas spread {spread:.1%} exceeds 10%; calibration may be poor",
            stacklevel=2,
        )
    return TemperatureCalibration(
        kelvin_per_m2=t_room / float(areas.mean()),
        t_room=t_room,
        n_references=int(areas.size),
        relative_spread=spread,
    )


@dataclass
class TemperatureEstimate:
    t_eff: float  # K, calibrated route
    area: float  # m^2
    band: tuple[float, float]  # Hz
    calib_coeff: float  # K/m^2
    omega_cm: float  # rad/s
    t_mass: float | None = None  # K, mass-based cross-check (capture-corrected)

    def __post_init__(self):
        if self.t_eff < 0.0:
            raise CalibrationError("negative effective temperature")


def effective_temperature(
    psd: Psd,
    band: tuple[float, float],
    calib: TemperatureCalibration,
    mass: float | None = None,
    peak: PeakInfo | None = None,
) -> TemperatureEstimate:
    """Calibrated PSD-area temperature, plus the mass-based cross-check."""
    area = peak_area(psd, band)
    omega_cm = peak.omega_cm if peak is not None else 2.0 * math.pi * 0.5 * sum(band)
    t_mass = None
    if mass is not None:
        cap = sho_capture_fraction(band, omega_cm / (2.0 * math.pi),
                                   peak.fwhm if peak is not None else 0.0)
        t_mass = mass * omega_cm**2 * (area / cap) / K_BOLTZMANN
    return TemperatureEstimate(
        t_eff=calib.kelvin_per_m2 * area,
        area=area,
        band=band,
        calib_coeff=calib.kelvin_per_m2,
        omega_cm=omega_cm,
        t_mass=t_mass,
    )


@dataclass
class SweepRow:
    param: float
    area_m2: float
    t_eff_k: float
    omega_cm_rad_s: float
    seed: int = 0
    feedback_on: bool = True
    lost: bool = False
    predicted_gamma_fb: float | None = None


def sweep_summary(rows: list[SweepRow]) -> dict:
    """Aggregate per-run sweep rows by swept value and locate the extrema."""
    on_rows = [r for r in rows if r.feedback_on]
    by_param: dict[float, list[SweepRow]] = {}
    for r in on_rows:
        by_param.setdefault(r.param, []).append(r)
    aggregated = [
        {
            "param": p,
            "area_m2": float(np.mean([r.area_m2 for r in rs])),
            "t_eff_k": float(np.mean([r.t_eff_k for r in rs])),
            "omega_cm_rad_s": float(np.mean([r.omega_cm_rad_s for r in rs])),
            "n_runs": len(rs),
            "n_lost": sum(r.lost for r in rs),
        }
        for p, rs in sorted(by_param.items())
    ]
    summary = {"rows": rows, "aggregated": aggregated}
    if aggregated:
        areas = [a["area_m2"] for a in aggregated]
        teffs = [a["t_eff_k"] for a in aggregated]
        summary["extrema"] = {
            "min_area_param": aggregated[int(np.argmin(areas))]["param"],
            "max_area_param": aggregated[int(np.argmax(areas))]["param"],
            "min_t_eff_k": float(np.min(teffs)),
            "min_t_eff_param": aggregated[int(np.argmin(teffs))]["param"],
        }
    off_rows = [r for r in rows if not r.feedback_on]
    if off_rows:
        summary["reference"] = {
            "area_m2": float(np.mean([r.area_m2 for r in off_rows])),
            "t_eff_k": float(np.mean([r.t_eff_k for r in off_rows])),
            "n_runs": len(off_rows),
        }
    return summary


def write_psd_csv(psd: Psd, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("freq_hz,psd_m2_per_hz\n")
        for f, v in zip(psd.freqs, psd.values):
            fh.write(f"{f:.17g},{v:.17g}\n")


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("param,area_m2,t_eff_k,omega_cm_rad_s\n")
        for r in rows:
            fh.write(
                f"{r.param:.17g},{r.area_m2:.17g},{r.t_eff_k:.17g},"
                f"{r.omega_cm_rad_s:.17g}\n"
            )
