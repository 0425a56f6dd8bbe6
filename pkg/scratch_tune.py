"""Scratch tuning study for default config values (not shipped)."""
import math
import time

import numpy as np
from scipy.constants import k as k_B

from levicool.config import parse_config_text, with_gain, with_feedback_enabled, with_seed
from levicool.dynamics import (
    Environment, ParticleProps, gas_damping_rate, particle_mass,
    stationary_temperature, thermal_force_psd,
)
from levicool.feedback import predicted_effective_damping
from levicool.harness import analyze_run, run_closed_loop
from levicool.imaging import CameraModel, render_frame
from levicool.localization import calibration_for, centroid
from tests.test_harness import make_cfg

PROPS = ParticleProps(diameter=450e-9)
MASS = particle_mass(PROPS)
OMEGA0 = 2 * math.pi * 23.5

# --- A: in-loop detector noise for candidate photon budgets -----------------
print("=== in-loop centroid noise (p=3, bg 20, read 2) ===")
for photons in (1000.0, 3000.0, 10000.0):
    cam2 = CameraModel(pixel_pitch=5.35e-6, magnification=0.1, fps=221.0,
                       roi=(20, 30), psf_sigma=1.5, photons_per_frame=photons,
                       background_per_px=20.0, read_noise_rms=2.0, label="in_loop")
    calib = calibration_for(cam2)
    rs, rr = np.random.default_rng(1), np.random.default_rng(2)
    z_true = 0.5 * cam2.meters_per_pixel
    errs = [centroid(render_frame(z_true, cam2, rs, rr), 3, calib).z_est - z_true
            for _ in range(600)]
    sig = float(np.std(errs))
    s_det = sig**2 / (221.0 / 2.0)
    print(f"photons {photons:8.0f}: sigma {sig*1e6:7.3f} um = {sig/cam2.meters_per_pixel:.4f} px, S_det {s_det:.3e} m^2/Hz")

# --- B: damping per unit gain & optimum gain ---------------------------------
for p_mbar in (8.5e-5, 9e-5, 1e-4):
    env = Environment(pressure_mbar=p_mbar, bath_temperature=300.0, excess_force_psd=2.7e-37)
    gamma = gas_damping_rate(env, PROPS)
    t_inf = stationary_temperature(env, PROPS)
    cfg = make_cfg(duration=1.0, pressure=p_mbar, gain=1.0)
    gpu = predicted_effective_damping(cfg.feedback, OMEGA0, 221.0, MASS)  # at phase 110
    print(f"p={p_mbar:g}: gamma={gamma:.4f} T_inf={t_inf:.0f} K, Gamma(g=1,phase110)={gpu:.2f} /s")

# optimum gain for given S_det: Gamma* = sqrt(4 k gamma T_inf / (m w0^2 S_det))
env = Environment(pressure_mbar=9e-5, bath_temperature=300.0, excess_force_psd=2.7e-37)
gamma = gas_damping_rate(env, PROPS)
t_inf = stationary_temperature(env, PROPS)
for s_det in (1e-13, 3e-13, 1e-12, 3e-12):
    gstar = math.sqrt(4 * k_B * gamma * t_inf / (MASS * OMEGA0**2 * s_det))
    print(f"S_det {s_det:.1e}: Gamma* = {gstar:.1f} /s")

# --- C: quick closed-loop gain scan ------------------------------------------
print("=== gain scan at 9e-5 mbar, phase 110, 20 s, seed 1 (noisy cam2 3000 ph) ===")
t0 = time.perf_counter()
for g in (0.05, 0.15, 0.4, 1.0, 2.5):
    cfg = make_cfg(duration=20.0, pressure=9e-5, gain=g, seed=1)
    art = run_closed_loop(cfg)
    if art.lost:
        print(f"g={g:5.2f}: LOST at {art.lost_t:.2f}s")
        continue
    an = analyze_run(art)
    print(f"g={g:5.2f}: Gamma_pred={art.predicted_gamma_fb:7.2f}  T_mass={an.t_mass:9.3f} K  f_pk={an.peak.f_peak:6.2f}")
print(f"[{time.perf_counter()-t0:.1f} s]")
