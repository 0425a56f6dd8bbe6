"""Shape checks: phase mini-sweep, estimator floors, small-gain oracle, gain-sweep min."""
import math
import time

import numpy as np

from levicool.analysis import welch_psd, default_segment_len
from levicool.config import parse_config_text
from levicool.harness import analyze_run, run_closed_loop
from levicool.imaging import render_frame
from levicool.localization import calibration_for, centroid, gaussian_fit, peak_detect
from tests.test_harness import TEMPLATE, CAMERA2, FEEDBACK

t00 = time.perf_counter()

# --- A: phase mini-sweep with default loop (150 deg filter), gain 0.02 -------
print("=== A: phase sweep points (8.5e-5 mbar, gain 0.02, 20 s) ===")
for phase in (33.0, 93.0, 213.0, 273.0):
    text = TEMPLATE.format(pressure=8.5e-5, excess=2.7e-37, fps1="875.26",
                           duration=20.0, seed=5, camera2=CAMERA2,
                           feedback=FEEDBACK.format(enabled="true", phase=phase, gain=0.02))
    cfg = parse_config_text(text)
    art = run_closed_loop(cfg)
    an = analyze_run(art)
    print(f"theta={phase:5.1f}: Gpred={art.predicted_gamma_fb:6.3f} lost={art.lost} "
          f"area={an.area:9.3e} T={an.t_mass:9.1f}")
text_off = TEMPLATE.format(pressure=8.5e-5, excess=2.7e-37, fps1="875.26",
                           duration=20.0, seed=5, camera2=CAMERA2,
                           feedback=FEEDBACK.format(enabled="false", phase=0, gain=0.02))
art = run_closed_loop(parse_config_text(text_off))
an = analyze_run(art)
print(f"ref off: area={an.area:9.3e} T={an.t_mass:9.1f}  [{time.perf_counter()-t00:.0f}s]")

# --- B: estimator PSD floors on one thermal trace ----------------------------
print("=== B: floors at 4.3e-5 mbar, 875.26 fps, 20 s ===")
text = TEMPLATE.format(pressure=4.3e-5, excess=2.7e-37, fps1="875.26",
                       duration=20.0, seed=9, camera2="", feedback="")
cfg = parse_config_text(text)
art = run_closed_loop(cfg)
ch = cfg.out_of_loop
calib = calibration_for(ch.camera)
import numpy.random as npr
rngs = npr.default_rng(100), npr.default_rng(101)
# re-render the frames from the recorded true trace for the three estimators
zs = {"peak": [], "centroid": [], "gauss": []}
for zt in art.true_z:
    f = render_frame(zt, ch.camera, rngs[0], rngs[1])
    zs["peak"].append(peak_detect(f, calib).z_est)
    zs["centroid"].append(centroid(f, 1, calib, "subtract").z_est)
    zs["gauss"].append(gaussian_fit(f, calib).sample.z_est)
fs = 875.26
floors = {}
for name, trace in zs.items():
    psd = welch_psd(np.asarray(trace), fs, segment_len=default_segment_len(fs, 23.5, len(trace)))
    sel = (psd.freqs > 100.0) & (psd.freqs < 350.0)
    floors[name] = float(np.median(psd.values[sel]))
print({k: f"{v:.3e}" for k, v in floors.items()})
print(f"peak/centroid: {10*math.log10(floors['peak']/floors['centroid']):.1f} dB (need >=6)")
print(f"centroid/gauss: {abs(10*math.log10(floors['centroid']/floors['gauss'])):.1f} dB (need <=3)")
print(f"[{time.perf_counter()-t00:.0f}s]")

# --- C: small-gain oracle, noiseless detector --------------------------------
print("=== C: T vs gamma/(gamma+Gamma), noiseless, excess 0 ===")
CAM2_CLEAN = """
[camera.in_loop]
fps = 221
magnification = 0.1
roi = 20x30
photons_per_frame = 1e7
background_per_px = 0
read_noise_rms = 0
estimator = centroid
centroid_power = 1
background_policy = none
"""
FEEDBACK_HC = """
[feedback]
enabled = true
delay_phase_deg = 218.0
gain = {gain}
filter_cutoff_hz = 60
processing_latency_ms = 0.9
"""
for g in (0.004, 0.008):
    ts = []
    for seed in (1, 2):
        text = TEMPLATE.format(pressure=9e-5, excess=0.0, fps1="875.26",
                               duration=50.0, seed=seed, camera2=CAM2_CLEAN,
                               feedback=FEEDBACK_HC.format(gain=g))
        cfg = parse_config_text(text)
        art = run_closed_loop(cfg)
        an = analyze_run(art)
        ts.append(an.t_mass)
    gam = art.gamma_gas
    gfb = art.predicted_gamma_fb
    t_pred = 300.0 * gam / (gam + gfb)
    print(f"g={g}: Gamma={gfb:.3f} T_pred={t_pred:6.2f} T_sim={np.mean(ts):6.2f} "
          f"ratio {np.mean(ts)/t_pred:.3f}  [{time.perf_counter()-t00:.0f}s]")

# --- D: gain sweep minimum with read-noise-dominated in-loop -----------------
print("=== D: noisy gain scan (read 25, p=1 subtract) 9e-5, 25 s ===")
CAM2_NOISY = """
[camera.in_loop]
fps = 221
magnification = 0.1
roi = 20x30
photons_per_frame = 3000
background_per_px = 20
read_noise_rms = 25
estimator = centroid
centroid_power = 1
background_policy = subtract
"""
for g in (0.0012, 0.005, 0.012, 0.026, 0.06, 0.12):
    text = TEMPLATE.format(pressure=9e-5, excess=2.7e-37, fps1="875.26",
                           duration=25.0, seed=3, camera2=CAM2_NOISY,
                           feedback=FEEDBACK_HC.format(gain=g))
    cfg = parse_config_text(text)
    art = run_closed_loop(cfg)
    an = analyze_run(art)
    print(f"g={g:7.4f}: Gamma={art.predicted_gamma_fb:7.2f} lost={art.lost} "
          f"T={an.t_mass:8.2f}  [{time.perf_counter()-t00:.0f}s]")
