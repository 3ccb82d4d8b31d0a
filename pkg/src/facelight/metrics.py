"""Image-quality and geometry metrics.

PSNR is computed on [0, 1]-scaled linear values and capped at 99 dB for
identical images.  SSIM uses the standard 11x11 Gaussian window
(sigma = 1.5), stabilizers K1 = 0.01 / K2 = 0.03 at L = 1, computed per
channel and averaged.  Geometry error probes the recovered surface by sphere
tracing from a deterministic direction set and averaging |reference sdf| at
the recovered hit points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from . import rng as frng

PSNR_CAP_DB = 99.0
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap
    return min(-10.0 * np.log10(mse), cap)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    k /= k.sum()
    return np.outer(k, k)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kern = _gaussian_kernel()
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx = convolve2d(x, kern, mode="valid")
        my = convolve2d(y, kern, mode="valid")
        mxx = convolve2d(x * x, kern, mode="valid")
        myy = convolve2d(y * y, kern, mode="valid")
        mxy = convolve2d(x * y, kern, mode="valid")
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    geom_err: float | None = None

    def to_json(self) -> dict:
        out = {"psnr": self.psnr, "ssim": self.ssim}
        if self.geom_err is not None:
            out["geom_err_mm"] = self.geom_err
        return out


def compute_metrics(a: np.ndarray, b: np.ndarray) -> MetricsReport:
    """PSNR/SSIM between two equal-size linear-RGB images."""
    return MetricsReport(psnr(a, b), ssim(a, b))


def sdf_probe_error(recovered_field, reference_sdf, n_dirs: int = 1024,
                    standoff: float = 1.3) -> float:
    """Mean |reference sdf| at points sphere-traced on the recovered surface.

    Rays start on an inflated sphere around the domain from a deterministic
    direction set and aim at the center; unhit directions are skipped.
    Zero at perfect recovery.
    """
    from .render import sphere_trace
    bounds = recovered_field.bounds
    dirs_out = frng.fibonacci_sphere(n_dirs)
    origins = bounds.center + dirs_out * (bounds.radius * standoff)
    dirs = -dirs_out
    trace = sphere_trace(recovered_field, origins, dirs)
    if not np.any(trace.hit):
        return float("inf")
    x = origins[trace.hit] + trace.t[trace.hit, None] * dirs[trace.hit]
    return float(np.mean(np.abs(reference_sdf(x))))
