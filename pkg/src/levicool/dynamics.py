"""Stochastic axial dynamics of a charged nanoparticle in a linear Paul trap.

Models the axial degree of freedom as a damped harmonic oscillator driven by
thermal (gas collision) noise, optional frequency-flat excess force noise, and
an externally applied feedback force:

    m z'' = -m omega0^2 z - m gamma z' + F_ext(t) + F_noise(t)

Force noise is specified as a one-sided power spectral density S_F in N^2/Hz,
i.e. white noise with autocorrelation (S_F/2) * delta(tau).  The thermal PSD
4 k_B T m gamma makes the free oscillator equilibrate to the equipartition
variance <z^2> = k_B T / (m omega0^2).

Time stepping uses the exact Gaussian propagator of the linear SDE: the state
mean follows the closed-form solution of the deterministic system under a
zero-order-hold force, and the process noise is drawn from the exact step
covariance.  There is no timestep bias; a step of dt and two steps of dt/2
produce identical distributions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.constants import k as K_BOLTZMANN

from .errors import ConfigError, IntegrationFault

# Epstein free-molecular drag coefficient for diffuse reflection:
# gamma = C * p / (rho_p * r * v_gas) with v_gas = sqrt(8 k_B T / (pi m_gas)).
# C = (8/pi) * (1 + pi/8) = 1 + 8/pi; the specular value would be 8/pi.
EPSTEIN_COEFF = 1.0 + 8.0 / math.pi

# Default gas: air, 28.97 g/mol.
AIR_MOLECULAR_MASS = 28.97e-3 / 6.02214076e23  # kg

MBAR_TO_PA = 100.0

# Secular frequencies outside this band are rejected outright; the narrower
# band is where the model is actually exercised and merely warns.
OMEGA0_VALID_HZ = (5.0, 500.0)
OMEGA0_TYPICAL_HZ = (20.0, 40.0)


@dataclass(frozen=True)
class ParticleProps:
    """Trapped particle: sphere of silica-like material with a net charge."""

    diameter: float  # m
    density: float = 2200.0  # kg/m^3, fused silica default
    charge_number: int = 500  # elementary charges, sign included

    def __post_init__(self):
        if not (self.diameter > 0.0):
            raise ConfigError(f"particle diameter must be > 0, got {self.diameter}")
        if not (self.density > 0.0):
            raise ConfigError(f"particle density must be > 0, got {self.density}")

    @property
    def mass(self) -> float:
        """Sphere mass rho * pi * d^3 / 6; always recomputed, never stored."""
        return particle_mass(self)

    @property
    def radius(self) -> float:
        return 0.5 * self.diameter


@dataclass(frozen=True)
class TrapConfig:
    """Axial trap parameters. Radial (AC) quantities are recorded metadata only."""

    omega0: float  # rad/s, axial secular frequency
    z0: float = 7.0e-3  # m, trap center to end-cap electrode
    r0: float = 6.0e-3  # m, trap center to AC electrode
    drive_freq: float = 600.0  # Hz
    v_endcap: float = 10.0  # V, static V1 = V2
    v_ac_pp: float = 600.0  # V peak-to-peak

    def __post_init__(self):
        if not (self.omega0 > 0.0):
            raise ConfigError(f"omega0 must be > 0, got {self.omega0}")
        if self.z0 <= 0.0 or self.r0 <= 0.0:
            raise ConfigError("trap geometry lengths must be > 0")
        f0 = self.omega0 / (2.0 * math.pi)
        if not (OMEGA0_VALID_HZ[0] <= f0 <= OMEGA0_VALID_HZ[1]):
            raise ConfigError(
                f"axial frequency {f0:.3g} Hz outside validity band {OMEGA0_VALID_HZ} Hz"
            )
        if not (OMEGA0_TYPICAL_HZ[0] <= f0 <= OMEGA0_TYPICAL_HZ[1]):
            warnings.warn(
                f"axial frequency {f0:.3g} Hz outside the typical "
                f"{OMEGA0_TYPICAL_HZ} Hz band",
                stacklevel=2,
            )

    @property
    def f0(self) -> float:
        """Secular frequency in Hz."""
        return self.omega0 / (2.0 * math.pi)


@dataclass(frozen=True)
class Environment:
    """Residual gas and non-gas heating environment."""

    pressure_mbar: float
    bath_temperature: float = 300.0  # K
    gas_molecular_mass: float = AIR_MOLECULAR_MASS  # kg
    excess_force_psd: float = 0.0  # N^2/Hz, one-sided, frequency-flat

    def __post_init__(self):
        if self.pressure_mbar < 0.0:
            raise ConfigError(f"pressure must be >= 0, got {self.pressure_mbar}")
        if not (self.bath_temperature > 0.0):
            raise ConfigError("bath temperature must be > 0")
        if self.gas_molecular_mass <= 0.0:
            raise ConfigError("gas molecular mass must be > 0")
        if self.excess_force_psd < 0.0:
            raise ConfigError("excess force PSD must be >= 0")


@dataclass
class ParticleState:
    """True axial phase-space point at simulation time t."""

    z: float  # m
    v: float  # m/s
    t: float = 0.0  # s


def particle_mass(props: ParticleProps) -> float:
    """Mass of the spherical particle, rho * pi * d^3 / 6."""
    return props.density * math.pi * props.diameter**3 / 6.0


def gas_damping_rate(env: Environment, props: ParticleProps) -> float:
    """Free-molecular (Epstein) drag rate gamma in 1/s, linear in pressure.

    gamma = C * p / (rho_p * r * v_gas), v_gas = sqrt(8 k_B T / (pi m_gas)),
    with C = 1 + 8/pi for diffuse reflection.
    """
    v_gas = math.sqrt(
        8.0 * K_BOLTZMANN * env.bath_temperature / (math.pi * env.gas_molecular_mass)
    )
    p_pa = env.pressure_mbar * MBAR_TO_PA
    return EPSTEIN_COEFF * p_pa / (props.density * props.radius * v_gas)


def thermal_force_psd(gamma: float, mass: float, temperature: float) -> float:
    """One-sided thermal force PSD 4 k_B T m gamma (N^2/Hz)."""
    if gamma < 0.0:
        raise ConfigError("damping rate must be >= 0")
    if mass <= 0.0 or temperature <= 0.0:
        raise ConfigError("mass and temperature must be > 0")
    return 4.0 * K_BOLTZMANN * temperature * mass * gamma


def thermal_init(
    mass: float, omega0: float, temperature: float, rng: np.random.Generator
) -> ParticleState:
    """Draw (z, v) from the thermal equilibrium distribution at `temperature`.

    z ~ N(0, k_B T / (m omega0^2)), v ~ N(0, k_B T / m), independent.
    """
    if temperature < 0.0:
        raise ConfigError("temperature must be >= 0")
    if temperature == 0.0:
        return ParticleState(z=0.0, v=0.0, t=0.0)
    sz = math.sqrt(K_BOLTZMANN * temperature / (mass * omega0**2))
    sv = math.sqrt(K_BOLTZMANN * temperature / mass)
    z = sz * rng.standard_normal()
    v = sv * rng.standard_normal()
    return ParticleState(z=z, v=v, t=0.0)


def _phi_entries(omega0: float, gamma: float, dt: float):
    """Entries of exp(A dt) for A = [[0, 1], [-omega0^2, -gamma]].

    Uses cos/cosh branches with a series fallback near critical damping so the
    result is exact (to double precision) in every damping regime.
    """
    lam = 0.5 * gamma
    disc = omega0 * omega0 - lam * lam  # omega_d^2 (signed)
    x = disc * dt * dt
    if abs(x) < 1e-8:
        # c = cos(w_d dt), s = sin(w_d dt)/w_d as unified series in disc
        e = math.exp(-lam * dt)
        ec = e * (1.0 - x / 2.0 + x * x / 24.0)
        es = e * dt * (1.0 - x / 6.0 + x * x / 120.0)
    elif disc > 0.0:
        wd = math.sqrt(disc)
        e = math.exp(-lam * dt)
        ec = e * math.cos(wd * dt)
        es = e * math.sin(wd * dt) / wd
    else:
        # overdamped: keep exponents combined, exp(-lam t) cosh(mu t) overflows
        mu = math.sqrt(-disc)
        em = math.exp(-(lam - mu) * dt)
        ep = math.exp(-(lam + mu) * dt)
        ec = 0.5 * (em + ep)
        es = (em - ep) / (2.0 * mu)
    phi11 = ec + lam * es
    phi12 = es
    phi21 = -omega0 * omega0 * es
    phi22 = ec - lam * es
    return phi11, phi12, phi21, phi22


def _step_covariance(omega0: float, gamma: float, dt: float, force_psd: float):
    """Exact covariance of the process-noise increment over one step.

    Returns (q11, q12, q22) for the (z, v) block given a one-sided force PSD.
    """
    if force_psd == 0.0:
        return 0.0, 0.0, 0.0
    sig2 = force_psd / 2.0  # two-sided white-noise intensity, acceleration basis
    # handled below via division by m^2 in the propagator; here mass-free
    if gamma * dt > 1e-10:
        # Q(dt) = S_inf - Phi S_inf Phi^T with the stationary covariance S_inf
        s1 = sig2 / (2.0 * gamma * omega0 * omega0)
        s2 = sig2 / (2.0 * gamma)
        p11, p12, p21, p22 = _phi_entries(omega0, gamma, dt)
        q11 = s1 - (p11 * p11 * s1 + p12 * p12 * s2)
        q12 = -(p11 * p21 * s1 + p12 * p22 * s2)
        q22 = s2 - (p21 * p21 * s1 + p22 * p22 * s2)
    else:
        # Undamped (or negligibly damped) closed-form integrals
        w = omega0
        q11 = sig2 * (2.0 * w * dt - math.sin(2.0 * w * dt)) / (4.0 * w**3)
        q12 = sig2 * math.sin(w * dt) ** 2 / (2.0 * w * w)
        q22 = sig2 * (2.0 * w * dt + math.sin(2.0 * w * dt)) / (4.0 * w)
    return q11, q12, q22


def _cholesky2(q11: float, q12: float, q22: float):
    """Lower Cholesky factor of a 2x2 PSD matrix, tolerant of zero rows."""
    q11 = max(q11, 0.0)
    l11 = math.sqrt(q11)
    if l11 > 0.0:
        l21 = q12 / l11
    else:
        l21 = 0.0
    l22 = math.sqrt(max(q22 - l21 * l21, 0.0))
    return l11, l21, l22


class LangevinPropagator:
    """Precomputed exact one-step propagator for fixed (mass, omega0, gamma, dt).

    Supports several independent force-noise sources (e.g. thermal and excess)
    so that each can consume its own RNG stream.  Noise covariances are scaled
    to the (z, v) basis, i.e. divided by mass^2.
    """

    __slots__ = (
        "mass", "omega0", "gamma", "dt", "phi11", "phi12", "phi21", "phi22",
        "g1", "g2", "chols",
    )

    def __init__(self, mass, omega0, gamma, dt, noise_psds=()):
        if dt <= 0.0:
            raise ConfigError(f"dt must be > 0, got {dt}")
        if gamma < 0.0:
            raise ConfigError("gamma must be >= 0")
        self.mass = mass
        self.omega0 = omega0
        self.gamma = gamma
        self.dt = dt
        p11, p12, p21, p22 = _phi_entries(omega0, gamma, dt)
        self.phi11, self.phi12, self.phi21, self.phi22 = p11, p12, p21, p22
        # Constant-force response: A^-1 (Phi - I) e2 / m, A^-1 = [[-g/w2, -1/w2],[1, 0]]
        w2 = omega0 * omega0
        self.g1 = (-gamma * p12 - (p22 - 1.0)) / (w2 * mass)
        self.g2 = p12 / mass
        m2 = mass * mass
        chols = []
        for psd in noise_psds:
            q11, q12, q22 = _step_covariance(omega0, gamma, dt, psd)
            chols.append(_cholesky2(q11 / m2, q12 / m2, q22 / m2))
        self.chols = tuple(chols)

    def step_values(self, z, v, force, draws):
        """Advance scalar (z, v) by dt under a held force.

        `draws` supplies one (a, b) pair of standard normals per noise source.
        """
        z2 = self.phi11 * z + self.phi12 * v + self.g1 * force
        v2 = self.phi21 * z + self.phi22 * v + self.g2 * force
        for (l11, l21, l22), (a, b) in zip(self.chols, draws):
            z2 += l11 * a
            v2 += l21 * a + l22 * b
        return z2, v2

    def step_ensemble(self, zv, force, rngs):
        """Vectorized step for an ensemble: zv has shape (2, n)."""
        z, v = zv
        z2 = self.phi11 * z + self.phi12 * v + self.g1 * force
        v2 = self.phi21 * z + self.phi22 * v + self.g2 * force
        for (l11, l21, l22), rng in zip(self.chols, rngs):
            ab = rng.standard_normal((z.size, 2))
            z2 = z2 + l11 * ab[:, 0]
            v2 = v2 + l21 * ab[:, 0] + l22 * ab[:, 1]
        return np.array([z2, v2])


def step(
    state: ParticleState,
    dt: float,
    mass: float,
    omega0: float,
    gamma: float,
    external_force: float,
    noise_psd_total: float,
    rng: np.random.Generator,
) -> ParticleState:
    """One exact integration step under a zero-order-hold external force.

    The combined one-sided force PSD (thermal + excess) enters as a single
    Gaussian increment; deterministic given the rng state.
    """
    if not (math.isfinite(state.z) and math.isfinite(state.v)):
        raise IntegrationFault(f"non-finite state ({state.z}, {state.v}) at t={state.t}")
    prop = LangevinPropagator(mass, omega0, gamma, dt, (noise_psd_total,))
    ab = rng.standard_normal(2)
    z2, v2 = prop.step_values(state.z, state.v, external_force, [(ab[0], ab[1])])
    if not (math.isfinite(z2) and math.isfinite(v2)):
        raise IntegrationFault(f"integration produced non-finite state at t={state.t + dt}")
    return ParticleState(z=z2, v=v2, t=state.t + dt)


def stationary_temperature(env: Environment, props: ParticleProps) -> float:
    """Feedback-off stationary temperature including excess heating.

    T_inf = T_bath + S_excess / (4 k_B m gamma).  Requires gamma > 0; with no
    gas damping and nonzero excess noise there is no stationary state.
    """
    gamma = gas_damping_rate(env, props)
    if env.excess_force_psd == 0.0:
        return env.bath_temperature
    if gamma <= 0.0:
        warnings.warn("no damping: excess noise heats without bound", stacklevel=2)
        return env.bath_temperature
    m = particle_mass(props)
    return env.bath_temperature + env.excess_force_psd / (4.0 * K_BOLTZMANN * m * gamma)
