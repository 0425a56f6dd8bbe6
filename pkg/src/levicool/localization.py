"""Position estimation from camera frames.

Three estimators with very different cost/precision trade-offs:

- peak detection: brightest-pixel lookup, resolution limited to the pixel grid;
- centroid: intensity-weighted mean with counts raised to an integer power p
  (p = 1 plain, p = 3 suppresses background without an explicit subtraction);
- 2-D Gaussian fit: iterative least squares, sub-pixel but slow and of
  non-deterministic duration.

All estimators consume integer count grids and report object-plane meters via
a PixelCalibration.  Row index = z, column index = x (see imaging module).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DegenerateFitError,
    FitFailedError,
    InsufficientShiftError,
    LowSignalError,
)
from .imaging import CameraModel, Frame

SIGMA_FLOOR_PX = 0.3


@dataclass(frozen=True)
class PixelCalibration:
    """Object-plane scale and the pixel coordinate mapped to (x, z) = 0."""

    meters_per_pixel: float
    origin_px: tuple[float, float] = (0.0, 0.0)  # (x_px, z_px)

    def __post_init__(self):
        if self.meters_per_pixel <= 0.0:
            raise ConfigError("meters_per_pixel must be > 0")

    def to_meters(self, x_px: float, z_px: float) -> tuple[float, float]:
        ox, oz = self.origin_px
        return (x_px - ox) * self.meters_per_pixel, (z_px - oz) * self.meters_per_pixel


def calibration_for(camera: CameraModel) -> PixelCalibration:
    """Calibration matching the renderer's convention: trap center at ROI center."""
    return PixelCalibration(
        meters_per_pixel=camera.meters_per_pixel, origin_px=camera.center_px
    )


@dataclass
class PositionSample:
    """One localized position; the signal currency of the control loop."""

    z_est: float  # m
    x_est: float  # m
    t: float  # s, frame midpoint
    estimator: str  # 'peak' | 'centroid(p=N)' | 'gaussian_fit'
    quality: float  # total counts used
    background: str = "none"


@dataclass
class GaussianFit:
    sample: PositionSample
    amplitude: float
    sigma_px: float
    offset: float
    iterations: int
    converged: bool


def apply_background_policy(counts: np.ndarray, policy: str) -> np.ndarray:
    """Return a float grid with the requested background treatment applied.

    Policies: 'none', 'subtract' (constant B = median of border pixels,
    clamped at B >= 0; residuals keep their sign so the centroid stays
    unbiased), 'threshold:<tau>' (pixels below tau zeroed).
    """
    grid = counts.astype(float)
    if policy == "none":
        return grid
    if policy == "subtract":
        border = np.concatenate([grid[0, :], grid[-1, :], grid[1:-1, 0], grid[1:-1, -1]])
        return grid - max(float(np.median(border)), 0.0)
    if policy.startswith("threshold:"):
        tau = float(policy.split(":", 1)[1])
        return np.where(grid >= tau, grid, 0.0)
    raise ConfigError(f"unknown background policy {policy!r}")


def peak_detect(frame: Frame, calib: PixelCalibration) -> PositionSample:
    """Brightest-pixel position; ties broken by lowest (row, column) index."""
    counts = frame.counts
    if counts.size == 0 or counts.max() == counts.min():
        raise LowSignalError("frame has no distinguishable peak")
    idx = int(np.argmax(counts))  # first occurrence in row-major order
    row, col = divmod(idx, counts.shape[1])
    x, z = calib.to_meters(float(col), float(row))
    return PositionSample(
        z_est=z, x_est=x, t=frame.t_mid, estimator="peak",
        quality=float(counts.sum()),
    )


def centroid(
    frame: Frame,
    p: int,
    calib: PixelCalibration,
    background: str = "none",
) -> PositionSample:
    """Intensity-weighted centroid with counts raised to the power p."""
    if p < 1 or int(p) != p:
        raise ConfigError(f"centroid power must be a positive integer, got {p}")
    grid = apply_background_policy(frame.counts, background)
    if p == 1:
        w = grid
    else:
        # odd powers of signed residuals would produce nonsense weights
        w = np.maximum(grid, 0.0)
        w = w * w * w if p == 3 else w**p
    denom = w.sum()
    if denom <= 0.0:
        raise LowSignalError("centroid denominator vanished after background policy")
    h, wdt = grid.shape
    z_px = float((np.arange(h) @ w.sum(axis=1)) / denom)
    x_px = float((np.arange(wdt) @ w.sum(axis=0)) / denom)
    x, z = calib.to_meters(x_px, z_px)
    return PositionSample(
        z_est=z, x_est=x, t=frame.t_mid, estimator=f"centroid(p={int(p)})",
        quality=float(grid.sum()), background=background,
    )


def _moment_init(grid: np.ndarray):
    """Initial (A, x0, z0, sigma, B) from image moments of a bg-subtracted grid."""
    b = float(np.median(grid))
    sub = np.maximum(grid - b, 0.0)
    tot = sub.sum()
    h, w = grid.shape
    if tot <= 0.0:
        return float(grid.max() - b), (w - 1) / 2.0, (h - 1) / 2.0, 1.0, b
    zi, xi = np.indices(grid.shape)
    z0 = float((zi * sub).sum() / tot)
    x0 = float((xi * sub).sum() / tot)
    var = float((((zi - z0) ** 2 + (xi - x0) ** 2) * sub).sum() / tot) / 2.0
    sigma = min(max(np.sqrt(max(var, 0.25)), 0.5), float(max(h, w)))
    return float(grid.max() - b), x0, z0, sigma, b


def gaussian_fit(
    frame: Frame,
    calib: PixelCalibration,
    init: PositionSample | None = None,
    max_iter: int = 100,
    rtol: float = 1e-8,
) -> GaussianFit:
    """Levenberg-damped Gauss-Newton fit of B + A exp(-r^2 / 2 sigma^2).

    Converges when the relative residual change drops below `rtol`;
    raises FitFailedError (carrying the best iterate) after `max_iter`
    iterations and DegenerateFitError if sigma collapses below 0.3 px.
    """
    counts = frame.counts.astype(float)
    h, w = counts.shape
    zi, xi = np.indices(counts.shape, dtype=float)
    amp, x0, z0, sigma, off = _moment_init(counts)
    if init is not None:
        ox, oz = calib.origin_px
        x0 = init.x_est / calib.meters_per_pixel + ox
        z0 = init.z_est / calib.meters_per_pixel + oz
    if amp <= 0.0:
        raise LowSignalError("no signal above background to fit")

    def residual(p):
        a, px, pz, sg, b = p
        e = np.exp(-((xi - px) ** 2 + (zi - pz) ** 2) / (2.0 * sg * sg))
        res = (b + a * e - counts).ravel()
        return res, e

    best = np.array([amp, x0, z0, sigma, off])
    res, e = residual(best)
    sse = float(res @ res)
    lam = 1e-3
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        a, px, pz, sg, _ = best
        dx = xi - px
        dz = zi - pz
        ae = a * e
        jac = np.stack(
            [
                e.ravel(),
                (ae * dx / (sg * sg)).ravel(),
                (ae * dz / (sg * sg)).ravel(),
                (ae * (dx * dx + dz * dz) / (sg**3)).ravel(),
                np.ones(counts.size),
            ]
        )
        jtj = jac @ jac.T
        jtr = jac @ res
        stepped = False
        for _ in range(12):  # inflate damping until a step is productive
            damped = jtj + lam * np.diag(np.diag(jtj))
            try:
                delta = np.linalg.solve(damped, -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = best + delta
            cand[3] = abs(cand[3])
            cand_res, cand_e = residual(cand)
            cand_sse = float(cand_res @ cand_res)
            if cand_sse <= sse:
                if cand[3] < SIGMA_FLOOR_PX:
                    raise DegenerateFitError(
                        f"fitted sigma {cand[3]:.3f} px collapsed below "
                        f"{SIGMA_FLOOR_PX} px"
                    )
                rel = (sse - cand_sse) / max(sse, 1e-300)
                best, res, e, sse = cand, cand_res, cand_e, cand_sse
                lam = max(lam / 10.0, 1e-12)
                stepped = True
                if rel < rtol:
                    converged = True
                break
            lam *= 10.0
        if converged or not stepped:
            converged = converged or not stepped  # damping exhausted at a minimum
            break
    a, px, pz, sg, b = best
    x, z = calib.to_meters(float(px), float(pz))
    sample = PositionSample(
        z_est=z, x_est=x, t=frame.t_mid, estimator="gaussian_fit",
        quality=float(counts.sum()),
    )
    fit = GaussianFit(
        sample=sample, amplitude=float(a), sigma_px=float(sg), offset=float(b),
        iterations=n_iter, converged=converged,
    )
    if not converged:
        raise FitFailedError(f"no convergence after {max_iter} iterations", best=fit)
    return fit


def calibrate_pixels(
    frames_before,
    frames_after,
    known_shift: float,
    background: str = "subtract",
) -> PixelCalibration:
    """Pixel scale from a known physical translation of the same static scene.

    meters_per_pixel = known_shift / |mean centroid displacement in px|.
    """
    px_calib = PixelCalibration(meters_per_pixel=1.0)

    def mean_centroid(frames):
        pts = [centroid(f, 1, px_calib, background) for f in frames]
        return np.array(
            [np.mean([s.x_est for s in pts]), np.mean([s.z_est for s in pts])]
        )

    disp = mean_centroid(frames_after) - mean_centroid(frames_before)
    norm = float(np.hypot(*disp))
    if norm < 0.5:
        raise InsufficientShiftError(
            f"centroid displacement {norm:.3f} px is below the 0.5 px minimum"
        )
    shape = frames_before[0].counts.shape
    origin = ((shape[1] - 1) / 2.0, (shape[0] - 1) / 2.0)
    return PixelCalibration(meters_per_pixel=known_shift / norm, origin_px=origin)


def benchmark_estimators(
    frames,
    truths_m,
    calib: PixelCalibration,
    centroid_power: int = 1,
    centroid_background: str = "subtract",
):
    """Wall-time and accuracy table for the three estimators on one frame set.

    Requires at least 1000 frames for stable timing.  Raises RuntimeError if
    the expected cost ordering peak <= centroid < gaussian_fit does not hold.
    """
    if len(frames) < 1000:
        raise ConfigError(f"need >= 1000 frames for benchmarking, got {len(frames)}")
    truths = np.asarray(truths_m, dtype=float)

    def run(fn):
        errs = np.empty(len(frames))
        t0 = time.perf_counter()
        for i, f in enumerate(frames):
            errs[i] = fn(f) - truths[i]
        cost = (time.perf_counter() - t0) / len(frames)
        return float(np.sqrt(np.mean(errs**2))), cost

    rows = []
    for name, fn in (
        ("peak", lambda f: peak_detect(f, calib).z_est),
        (
            f"centroid(p={centroid_power})",
            lambda f: centroid(f, centroid_power, calib, centroid_background).z_est,
        ),
        ("gaussian_fit", lambda f: gaussian_fit(f, calib).sample.z_est),
    ):
        rms, cost = run(fn)
        rows.append({"estimator": name, "rms_error_m": rms, "mean_cost_s": cost})
    peak_cost = rows[0]["mean_cost_s"]
    for row in rows:
        row["cost_ratio_vs_peak"] = row["mean_cost_s"] / peak_cost
    if not (rows[0]["mean_cost_s"] <= rows[1]["mean_cost_s"] < rows[2]["mean_cost_s"]):
        raise RuntimeError(f"estimator cost ordering violated: {rows}")
    return rows


def write_benchmark_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("estimator,rms_error_m,mean_cost_s,cost_ratio_vs_peak\n")
        for r in rows:
            fh.write(
                f"{r['estimator']},{r['rms_error_m']:.17g},"
                f"{r['mean_cost_s']:.17g},{r['cost_ratio_vs_peak']:.17g}\n"
            )
