import math

import numpy as np
import pytest

from levicool.errors import ConfigError, SequencingError
from levicool.feedback import (
    Biquad,
    Controller,
    DacSpec,
    FeedbackConfig,
    calibrate_cutoff,
    dac_output,
    default_force_coeff,
    design_feedback,
    force_on_particle,
    loop_phase_budget,
    optimal_delay,
    predicted_effective_damping,
    split_delay,
    with_delay_phase,
)
from levicool.localization import PositionSample

F0 = 23.5
OMEGA0 = 2.0 * math.pi * F0
FPS = 221.0


def make_cfg(**kw):
    return design_feedback(OMEGA0, FPS, delay_phase_deg=90.0, gain=0.05, **kw)


def test_optimal_delay_values():
    assert optimal_delay(OMEGA0) == pytest.approx(10.638e-3, rel=1e-4)
    assert optimal_delay(2.0 * math.pi * 25.0) == pytest.approx(10e-3, rel=1e-12)
    assert optimal_delay(2.0 * OMEGA0) == pytest.approx(optimal_delay(OMEGA0) / 2.0)


def test_split_delay_pinned():
    coarse, fine = split_delay(optimal_delay(OMEGA0), FPS)
    assert coarse == 2
    assert fine == pytest.approx(1.5885e-3, abs=1e-6)
    assert split_delay(2.0 / FPS, FPS) == (2, 0.0)
    coarse0, fine0 = split_delay(0.003, FPS)
    assert coarse0 == 0 and fine0 == pytest.approx(0.003)


def test_biquad_dc_gain():
    biq = Biquad(8.0, FPS)
    y = 0.0
    for _ in range(2000):
        y = biq.step(1.0)
    assert y == pytest.approx(1.0, rel=1e-9)


def test_biquad_phase_matches_sine_measurement():
    biq = Biquad(8.0, FPS)
    n = 8000
    t = np.arange(n) / FPS
    x = np.sin(OMEGA0 * t)
    y = np.array([biq.step(v) for v in x])
    # least-squares phase of the settled tail
    tail = slice(2000, None)
    basis = np.column_stack([np.sin(OMEGA0 * t[tail]), np.cos(OMEGA0 * t[tail])])
    a, b = np.linalg.lstsq(basis, y[tail], rcond=None)[0]
    measured_lag = math.degrees(math.atan2(-b, a)) % 360.0
    assert measured_lag == pytest.approx(biq.phase_lag_deg(F0), abs=2.0)


def test_cutoff_calibration_hits_target():
    fc = calibrate_cutoff(F0, FPS, 150.0)
    assert Biquad(fc, FPS).phase_lag_deg(F0) == pytest.approx(150.0, abs=0.01)
    assert abs(Biquad(fc, FPS).phase_lag_deg(F0) - 150.0) < 5.0
    with pytest.raises(ConfigError):
        Biquad(FPS / 2.0, FPS)
    with pytest.raises(ConfigError):
        calibrate_cutoff(F0, FPS, 200.0)


def test_dac_quantization():
    dac = DacSpec(bits=12, vref=3.3)
    assert dac.step == pytest.approx(0.806e-3, rel=1e-3)
    v, sat = dac_output(0.0, dac, 0.5, -1, 2000.0)
    assert v == 0.0 and not sat
    v, _ = dac_output(1e-3, dac, 0.0, -1, 2000.0)
    assert v == 0.0  # gain 0 -> feedback-off equivalence
    # quantization error statistics: variance = step^2 / 12
    rng = np.random.default_rng(3)
    values = rng.uniform(-0.5e-3, 0.5e-3, 20000)
    errs = []
    for val in values:
        vq, _ = dac_output(val, dac, 1.0, 1, 1000.0)
        errs.append(vq - 1000.0 * val)
    assert np.var(errs) == pytest.approx(dac.step**2 / 12.0, rel=0.05)
    # analog attenuation comes after the quantizer: no dead zone at small gain
    v_full, _ = dac_output(0.3e-3, dac, 1.0, -1, 1000.0)
    v_small, _ = dac_output(0.3e-3, dac, 1e-3, -1, 1000.0)
    assert v_small == pytest.approx(1e-3 * v_full, rel=1e-12)


def test_dac_saturation():
    dac = DacSpec(bits=12, vref=3.3)
    v, sat = dac_output(1.0, dac, 1.0, 1, 2000.0)
    assert v == dac.vref / 2.0 and sat
    v, sat = dac_output(-1.0, dac, 1.0, 1, 2000.0)
    assert v == -dac.vref / 2.0 and sat


def test_force_on_particle():
    cfg = make_cfg()
    assert force_on_particle(0.0, cfg) == 0.0
    f1 = force_on_particle(0.5, cfg)
    assert force_on_particle(1.0, cfg) == pytest.approx(2.0 * f1)
    off = make_cfg(enabled=False)
    assert force_on_particle(1.0, off) == 0.0
    assert default_force_coeff(500, 7e-3) == pytest.approx(2.861e-15, rel=1e-3)


def test_controller_passthrough_and_shift():
    cfg = design_feedback(OMEGA0, FPS, total_delay_s=0.0, gain=0.1)
    ctrl = Controller(cfg, FPS)
    zs = [1e-6, 2e-6, -3e-6, 4e-6]
    for k, z in enumerate(zs):
        act = ctrl.ingest(PositionSample(z, 0.0, (k + 0.5) / FPS, "centroid(p=3)", 1.0))
        assert act is not None
    delayed = [row.z_delayed for row in ctrl.telemetry]
    assert delayed == zs  # coarse=0, fine=0: pass-through

    cfg2 = design_feedback(OMEGA0, FPS, total_delay_s=2.0 / FPS, gain=0.1)
    assert cfg2.coarse_delay_frames == 2 and cfg2.fine_delay == 0.0
    ctrl2 = Controller(cfg2, FPS)
    acts = []
    for k, z in enumerate(zs):
        acts.append(ctrl2.ingest(PositionSample(z, 0.0, (k + 0.5) / FPS, "c", 1.0)))
    assert acts[0] is None and acts[1] is None  # warm-up
    delayed2 = [row.z_delayed for row in ctrl2.telemetry]
    assert delayed2 == zs[:2]  # output at tick k equals input at tick k-2


def test_controller_sequencing_error():
    ctrl = Controller(make_cfg(), FPS)
    ctrl.ingest(PositionSample(0.0, 0.0, 0.1, "c", 1.0))
    with pytest.raises(SequencingError):
        ctrl.ingest(PositionSample(0.0, 0.0, 0.05, "c", 1.0))


def _measure_loop_phase(cfg, f_hz, n=4000):
    """Sine injection: phase of the scheduled actuations vs input position."""
    ctrl = Controller(cfg, FPS)
    ts, vs = [], []
    for k in range(n):
        t = (k + 0.5) / FPS
        z = 50e-6 * math.sin(2.0 * math.pi * f_hz * t)
        act = ctrl.ingest(PositionSample(z, 0.0, t, "c", 1.0))
        if act is not None and k > 500:
            ts.append(act.t)
            vs.append(act.volts)
    ts = np.asarray(ts)
    w = 2.0 * math.pi * f_hz
    basis = np.column_stack([np.sin(w * ts), np.cos(w * ts)])
    a, b = np.linalg.lstsq(basis, np.asarray(vs), rcond=None)[0]
    return math.degrees(math.atan2(-b, a)) % 360.0


@pytest.mark.parametrize("latency", [0.0, 0.9e-3])
def test_sine_injection_phase_budget(latency):
    cfg = design_feedback(
        OMEGA0, FPS, delay_phase_deg=110.0, gain=0.05,
        processing_latency=latency,
    )
    measured = _measure_loop_phase(cfg, F0)
    budget = loop_phase_budget(cfg, OMEGA0, FPS)
    expected = (
        budget["delay_deg"] + budget["filter_deg"] + budget["sign_deg"]
        + math.degrees(OMEGA0 * latency)
    ) % 360.0
    diff = (measured - expected + 180.0) % 360.0 - 180.0
    assert abs(diff) < 3.0


def test_paper_phase_accounting():
    # programmed 110 + filter 150 + sign 180 = 440 = 360 + 80, i.e. within
    # ~10 degrees of the ideal 90 degree velocity-damping phase
    cfg = design_feedback(OMEGA0, FPS, delay_phase_deg=110.0, gain=0.05)
    budget = loop_phase_budget(cfg, OMEGA0, FPS)
    assert budget["delay_deg"] == pytest.approx(110.0, abs=0.5)
    assert budget["filter_deg"] == pytest.approx(150.0, abs=0.1)
    assert budget["sign_deg"] == 180.0
    assert budget["total_deg"] == pytest.approx(80.0, abs=1.0)
    assert abs(budget["total_deg"] - 90.0) < 15.0


def test_predicted_damping_sign_and_extrema():
    mass = 1.05e-16
    base = dict(gain=0.05, processing_latency=0.0)

    def gamma_at_total_phase(target_total_deg):
        # choose the programmed delay so that the physical loop phase
        # (incl. filter, sign, ZOH) lands on the requested total
        cfg0 = design_feedback(OMEGA0, FPS, delay_phase_deg=0.0, **base)
        b = loop_phase_budget(cfg0, OMEGA0, FPS)
        rest = b["filter_deg"] + b["sign_deg"] + b["extra_deg"]
        cfg = with_delay_phase(cfg0, OMEGA0, FPS, (target_total_deg - rest) % 360.0)
        return predicted_effective_damping(cfg, OMEGA0, FPS, mass)

    g90 = gamma_at_total_phase(90.0)
    g270 = gamma_at_total_phase(270.0)
    assert g90 > 0.0  # cooling
    assert g270 < 0.0  # anti-damping
    assert abs(g270 + g90) < 0.15 * g90  # sine symmetry (delay quantization aside)
    assert gamma_at_total_phase(30.0) < g90
    off = design_feedback(OMEGA0, FPS, delay_phase_deg=90.0, gain=0.05, enabled=False)
    assert predicted_effective_damping(off, OMEGA0, FPS, mass) == 0.0


def test_feedback_config_validation():
    with pytest.raises(ConfigError):
        FeedbackConfig(coarse_delay_frames=-1, fine_delay=0.0, gain=0.1,
                       filter_cutoff_hz=8.0)
    with pytest.raises(ConfigError):
        FeedbackConfig(coarse_delay_frames=0, fine_delay=0.0, gain=-0.1,
                       filter_cutoff_hz=8.0)
    with pytest.raises(ConfigError):
        DacSpec(bits=4)
    cfg = FeedbackConfig(coarse_delay_frames=0, fine_delay=0.9 / FPS, gain=0.1,
                         filter_cutoff_hz=8.0)
    Controller(cfg, FPS)  # fine delay inside a frame period: fine
    bad = FeedbackConfig(coarse_delay_frames=0, fine_delay=1.1 / FPS, gain=0.1,
                         filter_cutoff_hz=8.0)
    with pytest.raises(ConfigError):
        Controller(bad, FPS)
