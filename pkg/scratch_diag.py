"""Diagnose the cooled-state spectrum: where does the residual area live?"""
import math

import numpy as np

from levicool.analysis import peak_area, welch_psd, default_segment_len, locate_peak
from levicool.harness import analyze_run, run_closed_loop
from tests.test_harness import make_cfg

cfg = make_cfg(duration=60.0, pressure=1e-4, gain=0.55, seed=3)
art = run_closed_loop(cfg)
an = analyze_run(art)
print(f"T_mass={an.t_mass:.2f} K, peak {an.peak.f_peak:.2f} Hz, fitted fwhm {an.peak.fwhm:.2f} Hz")
print(f"band {an.peak.band}, area {an.area:.3e}")

psd = an.psd
for band in [(5.0, 12.0), (12.0, 18.0), (18.0, 29.0), (29.0, 43.0), (43.0, 80.0), (80.0, 300.0)]:
    dens = peak_area(psd, band)
    print(f"  area in {band}: {dens:.3e}")

# tight band: +/- 5 Hz around the peak
tight = (an.peak.f_peak - 5.0, an.peak.f_peak + 5.0)
a_tight = peak_area(psd, tight)
from scipy.constants import k as k_B
mass = 1.0497e-16
t_tight = mass * an.peak.omega_cm**2 * a_tight / k_B
print(f"tight-band area {a_tight:.3e} -> T {t_tight:.2f} K (no capture corr)")

# what's the detector floor level?
sel = (psd.freqs > 150) & (psd.freqs < 400)
print(f"high-f floor median {np.median(psd.values[sel]):.3e} m^2/Hz")
sel2 = (psd.freqs > 5) & (psd.freqs < 15)
print(f"5-15 Hz median {np.median(psd.values[sel2]):.3e} m^2/Hz")
sel3 = (psd.freqs > 20) & (psd.freqs < 27)
print(f"20-27 Hz median {np.median(psd.values[sel3]):.3e} m^2/Hz")
