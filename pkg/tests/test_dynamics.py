import math

import numpy as np
import pytest
from scipy.constants import k as k_B
from scipy.linalg import expm

from levicool.dynamics import (
    AIR_MOLECULAR_MASS,
    EPSTEIN_COEFF,
    Environment,
    LangevinPropagator,
    ParticleProps,
    ParticleState,
    TrapConfig,
    gas_damping_rate,
    particle_mass,
    stationary_temperature,
    step,
    thermal_force_psd,
    thermal_init,
)
from levicool.errors import ConfigError

OMEGA0 = 2.0 * math.pi * 23.5
PROPS = ParticleProps(diameter=450e-9, density=2200.0)


def test_particle_mass_hand_value():
    # pi * rho * d^3 / 6 evaluated by hand for the 450 nm silica default
    expected = math.pi * 2200.0 * (450e-9) ** 3 / 6.0
    assert particle_mass(PROPS) == pytest.approx(expected, rel=1e-15)
    assert particle_mass(PROPS) == pytest.approx(1.0497e-16, rel=1e-4)


def test_particle_mass_limit_and_validation():
    tiny = ParticleProps(diameter=1e-12, density=2200.0)
    assert particle_mass(tiny) < 1e-32
    with pytest.raises(ConfigError):
        ParticleProps(diameter=-1e-9)
    with pytest.raises(ConfigError):
        ParticleProps(diameter=450e-9, density=0.0)


def test_gas_damping_vacuum_and_linearity():
    env0 = Environment(pressure_mbar=0.0)
    assert gas_damping_rate(env0, PROPS) == 0.0
    env1 = Environment(pressure_mbar=3.7e-4)
    env2 = Environment(pressure_mbar=7.4e-4)
    assert gas_damping_rate(env2, PROPS) == pytest.approx(
        2.0 * gas_damping_rate(env1, PROPS), rel=1e-12
    )
    with pytest.raises(ConfigError):
        Environment(pressure_mbar=-1.0)


def test_gas_damping_pinned_value():
    # Independent single-line evaluation of the documented Epstein formula
    env = Environment(pressure_mbar=1e-4, bath_temperature=300.0)
    v_gas = math.sqrt(8.0 * k_B * 300.0 / (math.pi * AIR_MOLECULAR_MASS))
    expected = (1.0 + 8.0 / math.pi) * (1e-4 * 100.0) / (2200.0 * 225e-9 * v_gas)
    got = gas_damping_rate(env, PROPS)
    assert got == pytest.approx(expected, rel=1e-12)
    # regression pin
    assert got == pytest.approx(0.15301, rel=1e-3)
    assert EPSTEIN_COEFF == pytest.approx(3.5465, rel=1e-4)


def test_thermal_force_psd_properties():
    m = particle_mass(PROPS)
    assert thermal_force_psd(0.0, m, 300.0) == 0.0
    s1 = thermal_force_psd(2.0, m, 300.0)
    assert thermal_force_psd(2.0, m, 600.0) == pytest.approx(2.0 * s1, rel=1e-12)
    assert s1 == pytest.approx(4.0 * k_B * 300.0 * m * 2.0, rel=1e-12)


def test_trap_config_band():
    TrapConfig(omega0=OMEGA0)  # in band, no error
    with pytest.raises(ConfigError):
        TrapConfig(omega0=2.0 * math.pi * 1.0)
    with pytest.warns(UserWarning):
        TrapConfig(omega0=2.0 * math.pi * 100.0)


def _van_loan(omega0, gamma, dt, force_psd, mass):
    """Independent exact (Phi, Q) via the Van Loan block-matrix exponential."""
    A = np.array([[0.0, 1.0], [-(omega0**2), -gamma]])
    qc = np.zeros((2, 2))
    qc[1, 1] = force_psd / 2.0 / mass**2
    M = np.zeros((4, 4))
    M[:2, :2] = -A
    M[:2, 2:] = qc
    M[2:, 2:] = A.T
    E = expm(M * dt)
    phi = E[2:, 2:].T
    Q = phi @ E[:2, 2:]
    return phi, Q


@pytest.mark.parametrize(
    "omega0,gamma",
    [
        (OMEGA0, 0.0),
        (OMEGA0, 0.15),
        (OMEGA0, 15.3),
        (OMEGA0, 2.0 * OMEGA0),  # critically damped within fp tolerance
        (OMEGA0, 10.0 * OMEGA0),  # overdamped
        (2.0 * math.pi * 40.0, 1.0),
    ],
)
def test_propagator_matches_van_loan(omega0, gamma):
    m = particle_mass(PROPS)
    psd = thermal_force_psd(max(gamma, 1e-3), m, 300.0)
    for dt in (1e-4, 1.0 / 221.0, 0.05):
        if gamma * dt > 20.0:
            continue  # e^{+gamma t} overflows the Van Loan reference itself
        prop = LangevinPropagator(m, omega0, gamma, dt, (psd,))
        phi_ref, q_ref = _van_loan(omega0, gamma, dt, psd, m)
        got_phi = np.array(
            [[prop.phi11, prop.phi12], [prop.phi21, prop.phi22]]
        )
        np.testing.assert_allclose(got_phi, phi_ref, rtol=1e-9, atol=1e-16)
        l11, l21, l22 = prop.chols[0]
        L = np.array([[l11, 0.0], [l21, l22]])
        np.testing.assert_allclose(
            L @ L.T, q_ref, rtol=1e-7, atol=abs(q_ref).max() * 1e-9
        )


def test_covariance_stationary_limit():
    # for gamma*dt >> 1 the step covariance converges to the equilibrium one
    m = particle_mass(PROPS)
    gamma = 10.0 * OMEGA0
    temp = 300.0
    psd = thermal_force_psd(gamma, m, temp)
    prop = LangevinPropagator(m, OMEGA0, gamma, 5.0, (psd,))
    l11, l21, l22 = prop.chols[0]
    L = np.array([[l11, 0.0], [l21, l22]])
    q = L @ L.T
    assert q[0, 0] == pytest.approx(k_B * temp / (m * OMEGA0**2), rel=1e-9)
    assert q[1, 1] == pytest.approx(k_B * temp / m, rel=1e-9)
    assert abs(q[0, 1]) < 1e-9 * math.sqrt(q[0, 0] * q[1, 1])


def test_propagator_semigroup_exactness():
    # one dt step and two dt/2 steps are the same distribution
    m = particle_mass(PROPS)
    gamma = 15.3
    psd = thermal_force_psd(gamma, m, 300.0)
    dt = 1.0 / 221.0
    full = LangevinPropagator(m, OMEGA0, gamma, dt, (psd,))
    half = LangevinPropagator(m, OMEGA0, gamma, dt / 2.0, (psd,))
    Pf = np.array([[full.phi11, full.phi12], [full.phi21, full.phi22]])
    Ph = np.array([[half.phi11, half.phi12], [half.phi21, half.phi22]])
    np.testing.assert_allclose(Ph @ Ph, Pf, rtol=1e-12)

    def cov(p):
        l11, l21, l22 = p.chols[0]
        L = np.array([[l11, 0.0], [l21, l22]])
        return L @ L.T

    q_two = Ph @ cov(half) @ Ph.T + cov(half)
    np.testing.assert_allclose(q_two, cov(full), rtol=1e-9)


def test_noise_sources_add():
    m = particle_mass(PROPS)
    dt = 1e-3
    s1, s2 = 3e-38, 8e-38
    both = LangevinPropagator(m, OMEGA0, 0.5, dt, (s1, s2))
    combined = LangevinPropagator(m, OMEGA0, 0.5, dt, (s1 + s2,))

    def cov(chol):
        l11, l21, l22 = chol
        L = np.array([[l11, 0.0], [l21, l22]])
        return L @ L.T

    np.testing.assert_allclose(
        cov(both.chols[0]) + cov(both.chols[1]), cov(combined.chols[0]), rtol=1e-9
    )


def test_step_undamped_cosine():
    m = particle_mass(PROPS)
    amp = 1e-6
    st = ParticleState(z=amp, v=0.0)
    rng = np.random.default_rng(0)
    dt = 0.01
    for k in range(1, 50):
        st = step(st, dt, m, OMEGA0, 0.0, 0.0, 0.0, rng)
        assert st.z == pytest.approx(amp * math.cos(OMEGA0 * k * dt), abs=amp * 1e-12)


def test_step_static_deflection():
    m = particle_mass(PROPS)
    force = 2e-15
    st = ParticleState(z=0.0, v=0.0)
    rng = np.random.default_rng(0)
    for _ in range(4000):
        st = step(st, 5e-3, m, OMEGA0, 25.0, force, 0.0, rng)
    assert st.z == pytest.approx(force / (m * OMEGA0**2), rel=1e-9)


def test_force_linearity():
    m = particle_mass(PROPS)
    rng = np.random.default_rng(0)

    def settle(force):
        st = ParticleState(z=0.0, v=0.0)
        for _ in range(3000):
            st = step(st, 5e-3, m, OMEGA0, 30.0, force, 0.0, rng)
        return st.z

    assert settle(2e-15) == pytest.approx(2.0 * settle(1e-15), rel=1e-8)


def test_step_matches_euler_maruyama():
    # single-step statistics vs a dt/100 Euler-Maruyama reference
    m = particle_mass(PROPS)
    gamma = 15.3
    temp = 300.0
    psd = thermal_force_psd(gamma, m, temp)
    dt = 1.0 / 221.0
    z0, v0 = 1e-6, 2e-4
    npaths = 40000

    rng = np.random.default_rng(42)
    prop = LangevinPropagator(m, OMEGA0, gamma, dt, (psd,))
    zv = np.tile(np.array([[z0], [v0]]), (1, npaths))
    zv = prop.step_ensemble(zv, 0.0, [rng])

    nsub = 100
    h = dt / nsub
    sig = math.sqrt(psd / 2.0) / m
    rng2 = np.random.default_rng(123)
    z = np.full(npaths, z0)
    v = np.full(npaths, v0)
    for _ in range(nsub):
        dz = v * h
        dv = (-(OMEGA0**2) * z - gamma * v) * h + sig * math.sqrt(h) * rng2.standard_normal(npaths)
        z, v = z + dz, v + dv

    for exact, em in ((zv[0], z), (zv[1], v)):
        se = em.std(ddof=1) / math.sqrt(npaths)
        assert abs(exact.mean() - em.mean()) < 3.0 * se + 5e-3 * abs(em.mean())
        # variances agree within combined 3 sigma of the sample estimates
        rel = abs(exact.var(ddof=1) / em.var(ddof=1) - 1.0)
        assert rel < 3.0 * math.sqrt(2.0 / npaths) + 0.01


def test_thermal_init_statistics():
    m = particle_mass(PROPS)
    rng = np.random.default_rng(7)
    n = 100000
    zs = np.empty(n)
    vs = np.empty(n)
    for i in range(n):
        st = thermal_init(m, OMEGA0, 300.0, rng)
        zs[i], vs[i] = st.z, st.v
    assert zs.var() == pytest.approx(k_B * 300.0 / (m * OMEGA0**2), rel=0.03)
    assert vs.var() == pytest.approx(k_B * 300.0 / m, rel=0.03)
    corr = np.corrcoef(zs, vs)[0, 1]
    assert abs(corr) < 4.0 / math.sqrt(n)
    cold = thermal_init(m, OMEGA0, 0.0, rng)
    assert cold.z == 0.0 and cold.v == 0.0


def test_equipartition_closure():
    # ensemble average of m w0^2 <z^2> / k_B recovers the bath temperature
    m = particle_mass(PROPS)
    env = Environment(pressure_mbar=1e-2, bath_temperature=300.0)
    gamma = gas_damping_rate(env, PROPS)
    psd = thermal_force_psd(gamma, m, 300.0)
    dt = 1e-3
    nens = 256
    rng = np.random.default_rng(2024)
    sz = math.sqrt(k_B * 300.0 / (m * OMEGA0**2))
    sv = math.sqrt(k_B * 300.0 / m)
    zv = np.array([sz * rng.standard_normal(nens), sv * rng.standard_normal(nens)])
    prop = LangevinPropagator(m, OMEGA0, gamma, dt, (psd,))
    acc = 0.0
    nsteps = 4000
    for _ in range(nsteps):
        zv = prop.step_ensemble(zv, 0.0, [rng])
        acc += float(np.mean(zv[0] ** 2))
    t_meas = m * OMEGA0**2 * (acc / nsteps) / k_B
    assert t_meas == pytest.approx(300.0, rel=0.05)


def test_determinism_bitwise():
    m = particle_mass(PROPS)
    psd = thermal_force_psd(1.0, m, 300.0)

    def run(seed):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        st = ParticleState(z=1e-6, v=0.0)
        out = []
        for _ in range(200):
            st = step(st, 1e-3, m, OMEGA0, 1.0, 0.0, psd, rng)
            out.append(st.z)
        return out

    assert run(99) == run(99)


def test_stationary_temperature():
    env = Environment(pressure_mbar=1e-4, bath_temperature=300.0, excess_force_psd=0.0)
    assert stationary_temperature(env, PROPS) == 300.0
    m = particle_mass(PROPS)
    gamma = gas_damping_rate(env, PROPS)
    env2 = Environment(
        pressure_mbar=1e-4, bath_temperature=300.0,
        excess_force_psd=4.0 * k_B * m * gamma * 300.0,
    )
    assert stationary_temperature(env2, PROPS) == pytest.approx(600.0, rel=1e-12)
