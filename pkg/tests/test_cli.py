import json

import pytest

import levicool
from levicool.cli import main

TINY = """
[particle]
diameter_nm = 450

[trap]
omega0_hz = 23.5

[environment]
pressure_mbar = 8e-5
excess_force_psd_n2_hz = 2.7e-37

[camera.out_of_loop]
fps = 875.26
magnification = 0.1
roi = 26x26
photons_per_frame = 20000
background_per_px = 0.2
read_noise_rms = 0.5
estimator = centroid
centroid_power = 1
background_policy = subtract

[camera.in_loop]
fps = 221
magnification = 0.1
roi = 20x30
photons_per_frame = 3000
estimator = centroid
centroid_power = 3

[feedback]
enabled = true
delay_phase_deg = 110
gain = 0.15

[run]
duration_s = 2.0
seed = 99
"""


@pytest.fixture()
def tiny_config(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return str(p)


def test_validate_default_config():
    assert main(["validate", levicool.default_config_path()]) == 0


def test_validate_bad_config(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[particle]\nnot_a_key = 1\n")
    assert main(["validate", str(p)]) == 1


def test_unknown_flag_exit_code():
    assert main(["simulate", "--no-such-flag"]) == 1


def test_simulate_analyze_roundtrip(tiny_config, tmp_path, capsys):
    out = tmp_path / "run1"
    assert main(["simulate", tiny_config, "-o", str(out)]) == 0
    assert (out / "trace_out_of_loop.csv").exists()
    assert main(["analyze", str(out)]) == 0
    report = json.loads((out / "analysis_out_of_loop.json").read_text())
    assert 15.0 < report["f_peak_hz"] < 35.0
    assert (out / "psd_out_of_loop.csv").exists()


def test_simulate_determinism_bytes(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", tiny_config, "-o", str(a)]) == 0
    assert main(["simulate", tiny_config, "-o", str(b)]) == 0
    for name in ("trace_true.csv", "trace_in_loop.csv", "trace_out_of_loop.csv",
                 "controller.csv", "metadata.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_sweep_cli(tiny_config, tmp_path):
    out = tmp_path / "sweep"
    assert main([
        "sweep", tiny_config, "--axis", "phase", "--grid", "93,273",
        "--seeds", "1", "-o", str(out),
    ]) == 0
    assert (out / "sweep.csv").exists()
    assert (out / "summary.json").exists()


def test_calibrate_pixels_cli(capsys):
    assert main(["calibrate-pixels", "--frames", "4", "--shift-px", "3"]) == 0
    assert "um/px" in capsys.readouterr().out


def test_bench_estimators_cli(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench-estimators", "--frames", "1000", "--out", str(out)]) == 0
    header = out.read_text().splitlines()[0]
    assert header == "estimator,rms_error_m,mean_cost_s,cost_ratio_vs_peak"
    text = capsys.readouterr().out
    assert "gaussian_fit" in text
