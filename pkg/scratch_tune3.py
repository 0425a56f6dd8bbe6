"""High-cutoff loop shape: stability range, cooled T, pump suppression."""
import math
import time

import numpy as np

from levicool.config import parse_config_text
from levicool.feedback import Biquad, loop_phase_budget, predicted_effective_damping
from levicool.harness import analyze_run, run_closed_loop
from tests.test_harness import TEMPLATE, CAMERA2

F0 = 23.5
FPS = 221.0
OMEGA0 = 2 * math.pi * F0

# choose cutoff 60 Hz; compute programmed delay for total physical phase 90 deg
biq = Biquad(60.0, FPS)
phi_f = biq.phase_lag_deg(F0)
extra = math.degrees(OMEGA0 * (0.9e-3 + 0.5 / FPS))
theta = (90.0 - phi_f - extra - 180.0) % 360.0
print(f"filter lag {phi_f:.1f} deg, |H(f0)| {biq.gain_at(F0):.3f}, extra {extra:.1f} deg -> theta_prog {theta:.1f} deg")

FEEDBACK_HC = """
[feedback]
enabled = true
delay_phase_deg = {theta:.3f}
gain = {gain}
filter_cutoff_hz = 60
processing_latency_ms = 0.9
"""


def cfg_hc(gain, duration, seed, pressure=1e-4, photons2=3000):
    cam2 = CAMERA2.replace("photons_per_frame = 3000",
                           f"photons_per_frame = {photons2}")
    text = TEMPLATE.format(
        pressure=pressure, excess=2.7e-37, fps1="875.26", duration=duration,
        seed=seed, camera2=cam2,
        feedback=FEEDBACK_HC.format(theta=theta, gain=gain),
    )
    return parse_config_text(text)


c = cfg_hc(1.0, 1.0, 1)
print("budget:", {k: round(v, 1) for k, v in
                  loop_phase_budget(c.feedback, OMEGA0, FPS).items()})
gpred1 = predicted_effective_damping(c.feedback, OMEGA0, FPS, 1.0497e-16)
print(f"Gamma(g=1) = {gpred1:.1f} /s")

print("=== g scan, 1e-4 mbar, 40 s, cutoff 60, cam2 3000 ph ===")
for g in (0.05, 0.1, 0.2, 0.4, 0.8, 1.2, 1.6):
    t0 = time.perf_counter()
    out = []
    for seed in (1, 2):
        art = run_closed_loop(cfg_hc(g, 40.0, seed))
        if art.lost:
            out.append(f"s{seed}:LOST@{art.lost_t:.1f}")
            continue
        an = analyze_run(art)
        out.append(f"s{seed}:T={an.t_mass:.2f}K(fw{an.peak.fwhm:.1f})")
    print(f"g={g:4.2f} Gpred={gpred1*g:6.1f}: {out} [{time.perf_counter()-t0:.0f}s]")
