"""Stability boundary + criterion 7/9 feasibility (not shipped)."""
import math
import time

import numpy as np

from levicool.harness import analyze_run, run_closed_loop
from levicool.imaging import CameraModel, render_frame
from levicool.localization import calibration_for, centroid
from tests.test_harness import TEMPLATE, FEEDBACK, make_cfg
from levicool.config import parse_config_text

MPP = 5.35e-6 / 0.1

CAM2_LOWPH = """
[camera.in_loop]
fps = 221
magnification = 0.1
roi = 20x30
photons_per_frame = {photons}
background_per_px = 20
read_noise_rms = 2
estimator = centroid
centroid_power = 3
background_policy = none
"""


def cfg_with_cam2(photons, duration, seed, pressure, gain, phase=110.0):
    text = TEMPLATE.format(
        pressure=pressure, excess=2.7e-37, fps1="875.26", duration=duration,
        seed=seed, camera2=CAM2_LOWPH.format(photons=photons),
        feedback=FEEDBACK.format(enabled="true", phase=phase, gain=gain),
    )
    return parse_config_text(text)


# --- low-photon p=3 centroid noise and gain-slope (bias) ---------------------
print("=== cam2 p=3 centroid at low photons (sigma per frame, slope dz_est/dz) ===")
for photons in (150.0, 200.0, 300.0, 500.0):
    cam2 = CameraModel(pixel_pitch=5.35e-6, magnification=0.1, fps=221.0,
                       roi=(20, 30), psf_sigma=1.5, photons_per_frame=photons,
                       background_per_px=20.0, read_noise_rms=2.0, label="in_loop")
    calib = calibration_for(cam2)
    rs, rr = np.random.default_rng(1), np.random.default_rng(2)
    outs = {}
    for z_px in (-1.0, 0.0, 1.0):
        zt = z_px * MPP
        es = [centroid(render_frame(zt, cam2, rs, rr), 3, calib).z_est for _ in range(400)]
        outs[z_px] = (float(np.mean(es)), float(np.std(es)))
    slope = (outs[1.0][0] - outs[-1.0][0]) / (2 * MPP)
    sig = outs[0.0][1]
    s_det = sig**2 / 110.5
    print(f"ph {photons:5.0f}: sigma {sig*1e6:6.2f} um ({sig/MPP:.3f} px), slope {slope:.3f}, S_det {s_det:.2e}")

# --- stability / ratio scan at 1e-4 mbar, default cam2 3000 ------------------
print("=== g scan, 1e-4 mbar, 40 s, cam2 3000 ph ===")
for g in (0.4, 0.55, 0.7, 0.9):
    t0 = time.perf_counter()
    rows = []
    for seed in (1, 2):
        cfg = make_cfg(duration=40.0, pressure=1e-4, gain=g, seed=seed)
        art = run_closed_loop(cfg)
        if art.lost:
            rows.append(f"seed{seed}:LOST@{art.lost_t:.1f}s")
            continue
        an = analyze_run(art)
        rows.append(f"seed{seed}:T={an.t_mass:.2f}K")
    print(f"g={g:4.2f} Gpred={43.72*g:5.1f}: {rows}  [{time.perf_counter()-t0:.0f}s]")
