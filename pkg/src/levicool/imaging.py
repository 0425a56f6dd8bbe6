"""Synthetic camera frames of the levitated particle.

The particle image is a pixel-integrated isotropic Gaussian (erf-difference
per pixel) of width `psf_sigma` standing in for the diffraction-limited spot.
Axial position z maps to the row coordinate of the ROI; the transverse (x)
image coordinate stays at the ROI center since only axial motion is simulated.

Conventions
-----------
- `counts` arrays are row-major with shape (height, width); pixel (i, j) is
  row i (z axis), column j (x axis); pixel k spans [k - 0.5, k + 0.5].
- z = 0 maps to the ROI center row (height - 1) / 2; meters to pixels via
  magnification / pixel_pitch.
- Detected counts = Poisson(expected) + rounded Gaussian read noise, clamped
  at zero, as integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ParticleLost

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class CameraModel:
    pixel_pitch: float  # m, image plane
    magnification: float  # object -> image
    fps: float  # Hz
    roi: tuple[int, int]  # (width_px, height_px)
    psf_sigma: float = 1.5  # px
    photons_per_frame: float = 2.0e4  # expected signal counts integrated over the spot
    background_per_px: float = 20.0  # expected counts
    read_noise_rms: float = 2.0  # counts
    exposure: float = 1.0  # fraction of the frame period
    label: str = "out_of_loop"

    def __post_init__(self):
        if self.pixel_pitch <= 0.0 or self.magnification <= 0.0:
            raise ConfigError("pixel pitch and magnification must be > 0")
        if self.fps <= 0.0:
            raise ConfigError("fps must be > 0")
        w, h = self.roi
        if w < 3 or h < 3:
            raise ConfigError(f"ROI must be at least 3x3 pixels, got {self.roi}")
        if self.psf_sigma < 0.5:
            raise ConfigError("psf_sigma below 0.5 px cannot be rendered faithfully")
        if self.photons_per_frame < 0.0 or self.background_per_px < 0.0:
            raise ConfigError("photon and background budgets must be >= 0")
        if self.read_noise_rms < 0.0:
            raise ConfigError("read noise must be >= 0")
        if not (0.0 < self.exposure <= 1.0):
            raise ConfigError("exposure must be in (0, 1]")

    @property
    def meters_per_pixel(self) -> float:
        """Object-plane size of one pixel."""
        return self.pixel_pitch / self.magnification

    @property
    def center_px(self) -> tuple[float, float]:
        """(x_px, z_px) pixel coordinate the trap center maps to."""
        w, h = self.roi
        return (w - 1) / 2.0, (h - 1) / 2.0


@dataclass
class Frame:
    counts: np.ndarray  # (height, width) non-negative integers
    t_mid: float  # s, exposure midpoint
    camera_label: str
    clipped: bool = False  # particle center fell outside the ROI rectangle


def _pixel_profile(n: int, center: float, sigma: float) -> np.ndarray:
    """Mass of a unit 1-D Gaussian integrated over each of n unit pixels."""
    edges = np.arange(n + 1, dtype=float) - 0.5
    cdf = erf((edges - center) / (SQRT2 * sigma))
    return 0.5 * np.diff(cdf)


def image_center_px(z_true: float, camera: CameraModel) -> tuple[float, float]:
    """Continuous (x_px, z_px) image coordinates of the particle."""
    xc, zc = camera.center_px
    return xc, zc + z_true * camera.magnification / camera.pixel_pitch


def expected_image(z_true: float, camera: CameraModel) -> np.ndarray:
    """Expected counts per pixel for a particle at axial position z_true.

    Raises ParticleLost when the image center lies more than 3 sigma outside
    the ROI; a center merely outside the ROI gives a clipped (partial) image.
    """
    w, h = camera.roi
    xc, zc = image_center_px(z_true, camera)
    margin = 3.0 * camera.psf_sigma
    if zc < -0.5 - margin or zc > h - 0.5 + margin:
        raise ParticleLost(
            f"image center row {zc:.2f} px is >3 sigma outside the "
            f"{w}x{h} ROI of camera {camera.label!r}"
        )
    gz = _pixel_profile(h, zc, camera.psf_sigma)
    gx = _pixel_profile(w, xc, camera.psf_sigma)
    return camera.background_per_px + camera.photons_per_frame * np.outer(gz, gx)


def is_clipped(z_true: float, camera: CameraModel) -> bool:
    _, zc = image_center_px(z_true, camera)
    _, h = camera.roi
    return zc < -0.5 or zc > h - 0.5


def render_frame(
    z_true: float,
    camera: CameraModel,
    rng_shot: np.random.Generator,
    rng_read: np.random.Generator,
    t_mid: float = 0.0,
) -> Frame:
    """Draw one noisy frame: Poisson shot noise plus rounded Gaussian read noise."""
    expected = expected_image(z_true, camera)
    counts = rng_shot.poisson(expected).astype(np.int64)
    if camera.read_noise_rms > 0.0:
        read = np.rint(
            camera.read_noise_rms * rng_read.standard_normal(counts.shape)
        ).astype(np.int64)
        counts += read
    np.maximum(counts, 0, out=counts)
    return Frame(
        counts=counts,
        t_mid=t_mid,
        camera_label=camera.label,
        clipped=is_clipped(z_true, camera),
    )


def effective_render_position(samples, policy: str = "midpoint") -> float:
    """Reduce true positions sampled across the exposure to one render position.

    'midpoint' takes the middle sample (the default: at 20-40 Hz the motion is
    effectively frozen within one exposure); 'average' models blur as the mean.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ConfigError("need at least one position sample")
    if policy == "midpoint":
        return float(samples[samples.size // 2])
    if policy == "average":
        return float(samples.mean())
    raise ConfigError(f"unknown blur policy {policy!r}")


def max_blur_px(camera: CameraModel, f0_hz: float, amplitude_m: float) -> float:
    """Upper bound on image motion during one exposure, in pixels.

    Position change <= 2 pi f0 * t_exp * amplitude for harmonic motion.
    """
    t_exp = camera.exposure / camera.fps
    dz = 2.0 * math.pi * f0_hz * t_exp * amplitude_m
    return dz * camera.magnification / camera.pixel_pitch


def write_frame_u16(frame: Frame, path) -> None:
    """Headerless row-major unsigned 16-bit dump of one frame."""
    np.clip(frame.counts, 0, 65535).astype("<u2").tofile(path)


def read_frame_u16(path, roi: tuple[int, int]) -> np.ndarray:
    w, h = roi
    return np.fromfile(path, dtype="<u2").reshape(h, w).astype(np.int64)
