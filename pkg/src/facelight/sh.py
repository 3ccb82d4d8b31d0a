"""Real spherical-harmonics lighting.

Basis convention
----------------
Orthonormal real basis, Condon-Shortley phase omitted.  The flat index of
band l and order m (-l <= m <= l) is ``k = l*l + l + m``, i.e. row-major in
(l, m).  With K(l, m) = sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!) and
(x + i y)^m = c_m + i s_m:

    Y_{l,0}  = K(l,0) P_l(z)
    Y_{l,m}  = sqrt(2) K(l,m) c_m Q_l^m(z)      (m > 0)
    Y_{l,-m} = sqrt(2) K(l,m) s_m Q_l^m(z)      (m > 0)

where Q_l^m is the associated Legendre function with the sin^m(theta) factor
absorbed into c_m / s_m.  This matches the widely used real-SH tables
(Y_{1,0} = 0.488603 z, Y_{2,2} = 0.546274 (x^2 - y^2), ...).

The evaluation is written against the generic tape ops, so directions may be
plain arrays (oracles, rendering) or Tensors (training).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import rng as frng
from .vec import check_unit

MAX_BAND_DEFAULT = 10  # 121 coefficients per channel


def num_sh_coeffs(l_max: int) -> int:
    return (l_max + 1) ** 2


def sh_index(l: int, m: int) -> int:
    if abs(m) > l:
        raise ValueError("need -l <= m <= l")
    return l * l + l + m


def band_of_index(k: int) -> int:
    return int(math.isqrt(k))


@lru_cache(maxsize=None)
def _sh_constants(l_max: int):
    """Per-(l, m) normalizations K(l, m), with sqrt(2) folded in for m > 0."""
    norm = np.zeros((l_max + 1, l_max + 1))
    for l in range(l_max + 1):
        for m in range(l + 1):
            k = math.sqrt((2 * l + 1) / (4.0 * math.pi)
                          * math.factorial(l - m) / math.factorial(l + m))
            norm[l, m] = k * (math.sqrt(2.0) if m > 0 else 1.0)
    return norm


def sh_basis_columns(dirs, l_max: int) -> list:
    """Per-(l, m) basis values as a list of arrays (flat-index order).

    Shared by :func:`eval_sh_basis` and the high-volume estimators that want
    to accumulate column sums without materializing the stacked matrix.
    """
    x = dirs[..., 0]
    y = dirs[..., 1]
    z = dirs[..., 2]
    xv = x if isinstance(x, np.ndarray) else ad.value_of(x)
    base_shape = xv.shape
    dtype = xv.dtype
    norm = _sh_constants(l_max)

    # c_m + i s_m = (x + i y)^m
    cm = [np.ones(base_shape, dtype=dtype)]
    sm = [np.zeros(base_shape, dtype=dtype)]
    for m in range(1, l_max + 1):
        cm.append(x * cm[m - 1] - y * sm[m - 1])
        sm.append(x * sm[m - 1] + y * cm[m - 1])

    # Q_l^m by ascending recurrence; Q_m^m = (2m-1)!! is a constant.
    out = [None] * num_sh_coeffs(l_max)

    def emit(l, m, q):
        # python-float constants keep reduced-precision inputs in their dtype
        if m == 0:
            out[sh_index(l, 0)] = float(norm[l, 0]) * q
        else:
            out[sh_index(l, m)] = float(norm[l, m]) * (cm[m] * q)
            out[sh_index(l, -m)] = float(norm[l, m]) * (sm[m] * q)

    for m in range(l_max + 1):
        qmm = float(np.prod(np.arange(1, 2 * m, 2))) if m > 0 else 1.0
        q_prev = np.full(base_shape, qmm, dtype=dtype)  # Q_m^m is constant in z
        emit(m, m, q_prev)
        if m + 1 <= l_max:
            q = (2 * m + 1) * (z * qmm)
            emit(m + 1, m, q)
            q_prev2, q_prev = q_prev, q
            for l in range(m + 2, l_max + 1):
                q_new = ((2 * l - 1) * (z * q_prev) - (l + m - 1) * q_prev2) / (l - m)
                emit(l, m, q_new)
                q_prev2, q_prev = q_prev, q_new
    return out


def eval_sh_basis(dirs, l_max: int, validate: bool = True):
    """Evaluate all (l_max+1)^2 real SH basis functions.

    Args:
        dirs: unit directions, shape (..., 3); ndarray or Tensor.
        l_max: band limit, >= 0.
        validate: check the unit-norm precondition (skipped on hot paths).

    Returns:
        Array/Tensor of shape (..., (l_max+1)^2) in (l, m) row-major order.
    """
    if l_max < 0:
        raise ValueError("l_max must be >= 0")
    if validate:
        check_unit(dirs)
    return ad.stack(sh_basis_columns(dirs, l_max), axis=-1)


def lambda_coeff(l: int) -> float:
    """Half-cosine convolution coefficient for SH band l.

    2 pi/3 for l = 1, zero for odd l >= 3, and the closed even-band form
    otherwise (pi for l = 0, pi/4 for l = 2, -pi/24 for l = 4, ...).
    """
    if l < 0:
        raise ValueError("band index must be >= 0")
    if l == 1:
        return 2.0 * math.pi / 3.0
    if l % 2 == 1:
        return 0.0
    half = l // 2
    return ((-1.0) ** (half + 1) * math.pi
            / (2.0 ** (l - 1) * (l - 1) * (l + 2)) * math.comb(l, half))


def lambda_coeffs_flat(l_max: int) -> np.ndarray:
    """lambda_coeff broadcast over the flat (l, m) index."""
    return np.array([lambda_coeff(band_of_index(k))
                     for k in range(num_sh_coeffs(l_max))])


# ---------------------------------------------------------------------------
# light container
# ---------------------------------------------------------------------------

@dataclass
class SHLight:
    """Per-channel SH coefficient stack: coeffs[channel, k], radiance units."""

    l_max: int
    coeffs: np.ndarray  # (3, (l_max+1)^2)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.l_max < 0:
            raise ValueError("l_max must be >= 0")
        want = (3, num_sh_coeffs(self.l_max))
        if self.coeffs.shape != want:
            raise ValueError(f"coeffs must have shape {want}, got {self.coeffs.shape}")

    @classmethod
    def zero(cls, l_max: int = MAX_BAND_DEFAULT) -> "SHLight":
        return cls(l_max, np.zeros((3, num_sh_coeffs(l_max))))

    @classmethod
    def constant(cls, radiance, l_max: int = MAX_BAND_DEFAULT) -> "SHLight":
        """Environment with direction-independent radiance per channel."""
        light = cls.zero(l_max)
        light.coeffs[:, 0] = np.asarray(radiance, dtype=np.float64) * 2.0 * math.sqrt(math.pi)
        return light

    def eval(self, dirs) -> np.ndarray:
        """Reconstructed radiance at directions, shape (..., 3)."""
        basis = eval_sh_basis(dirs, self.l_max)
        return basis @ self.coeffs.T

    def to_json(self) -> dict:
        return {"l_max": int(self.l_max),
                "coeffs": [list(map(float, ch)) for ch in self.coeffs]}

    @classmethod
    def from_json(cls, obj: dict) -> "SHLight":
        if set(obj) != {"l_max", "coeffs"}:
            raise ValueError(f"light object must have keys l_max, coeffs; got {sorted(obj)}")
        return cls(int(obj["l_max"]), np.asarray(obj["coeffs"], dtype=np.float64))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "SHLight":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# light transport
# ---------------------------------------------------------------------------

def diffuse_irradiance(light: SHLight, n, coeffs=None):
    """Half-cosine-convolved irradiance at normal(s) n, clamped at zero.

    Args:
        light: SH environment (supplies l_max and, by default, coefficients).
        n: unit normal(s), (3,) or (N, 3); ndarray or Tensor.
        coeffs: optional (3, K) coefficient override (e.g. learnable Tensor).

    Returns RGB of shape (3,) or (N, 3).
    """
    single = ad.value_of(n).ndim == 1
    nn = ad.reshape(n, (1, 3)) if single else n
    basis = eval_sh_basis(nn, light.l_max)
    lam = lambda_coeffs_flat(light.l_max)
    c = coeffs if coeffs is not None else light.coeffs
    out = ad.relu(ad.matmul(basis, ad.transpose(c * lam[None, :])))
    if single:
        return out[0]
    return out


def vmf_attenuation(l_max: int, kappa):
    """Per-coefficient lobe attenuation exp(-l(l+1)/(2 kappa)).

    kappa may be a scalar or an (N, 1) array/Tensor for per-point lobes.
    """
    lk = np.array([band_of_index(k) * (band_of_index(k) + 1) * 0.5
                   for k in range(num_sh_coeffs(l_max))])
    return ad.exp(-lk / kappa)


@dataclass
class VmfLobe:
    """Normalized spherical lobe around `axis` with concentration kappa > 0."""

    axis: np.ndarray
    kappa: float

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=np.float64)
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        check_unit(self.axis, what="lobe axis")


def vmf_pdf(dirs, lobe: VmfLobe):
    """Lobe density at dirs; stable for arbitrarily large kappa.

    Uses kappa / (2 pi (1 - e^{-2 kappa})) * exp(kappa (mu . d - 1)), which
    equals kappa e^{kappa mu.d} / (4 pi sinh kappa) without the overflow.
    """
    if lobe.kappa <= 0:
        raise ValueError("kappa must be positive")
    mu_dot = np.asarray(dirs, dtype=np.float64) @ lobe.axis
    norm = lobe.kappa / (2.0 * math.pi * (-np.expm1(-2.0 * lobe.kappa)))
    return norm * np.exp(lobe.kappa * (mu_dot - 1.0))


def prefiltered_specular_light(light: SHLight, lobe: VmfLobe, coeffs=None):
    """Lobe-prefiltered environment radiance at the lobe axis, clamped at zero."""
    out = prefiltered_specular_batch(light, lobe.axis[None, :],
                                     np.array([[lobe.kappa]]), coeffs=coeffs)
    return out[0] if not ad.is_tensor(out) else out


def prefiltered_specular_batch(light: SHLight, axes, kappas, coeffs=None):
    """Batched prefiltered light: axes (N, 3), kappas (N, 1) scalar-per-point.

    kappas and axes may be Tensors; the result is then differentiable with
    respect to both (and to `coeffs` when given as a Tensor).
    """
    kv = ad.value_of(kappas)
    if np.any(kv <= 0.0):
        raise ValueError("kappa must be positive")
    basis = eval_sh_basis(axes, light.l_max)
    atten = vmf_attenuation(light.l_max, kappas)
    weighted = basis * atten
    c = coeffs if coeffs is not None else light.coeffs
    return ad.relu(ad.matmul(weighted, ad.transpose(c)))


# ---------------------------------------------------------------------------
# projection (exact quadrature and Monte-Carlo envmap fitting)
# ---------------------------------------------------------------------------

def sphere_quadrature(l_max: int):
    """Product quadrature (Gauss-Legendre x uniform phi) exact for band <= 2*l_max."""
    n_t = 2 * (l_max + 1)
    n_p = 2 * n_t
    t, wt = np.polynomial.legendre.leggauss(n_t)
    phi = (np.arange(n_p) + 0.5) * (2.0 * np.pi / n_p)
    tt, pp = np.meshgrid(t, phi, indexing="ij")
    st = np.sqrt(np.maximum(1.0 - tt**2, 0.0))
    dirs = np.stack([st * np.cos(pp), st * np.sin(pp), tt], axis=-1).reshape(-1, 3)
    w = np.repeat(wt, n_p) * (2.0 * np.pi / n_p)
    return dirs, w


def project_function_to_sh(fn, l_max: int) -> SHLight:
    """Project an RGB function on the sphere onto SH by exact quadrature.

    `fn(dirs)` maps (N, 3) directions to (N, 3) radiance.  Exact when fn is
    band-limited to 2*l_max, which makes it the reference projector in tests.
    """
    dirs, w = sphere_quadrature(l_max)
    vals = np.asarray(fn(dirs), dtype=np.float64)
    basis = eval_sh_basis(dirs, l_max)
    coeffs = (w[:, None] * basis).T @ vals  # (K, 3)
    return SHLight(l_max, coeffs.T)


def equirect_lookup(img: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinear lookup into an equirectangular map.

    Rows run from theta = 0 (+z) at the top to pi at the bottom; columns span
    phi in [-pi, pi) with wrap-around.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    u = (phi + np.pi) / (2.0 * np.pi) * w - 0.5
    v = theta / np.pi * h - 0.5
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    u0m, u1m = u0 % w, (u0 + 1) % w
    v0c, v1c = np.clip(v0, 0, h - 1), np.clip(v0 + 1, 0, h - 1)
    top = img[v0c, u0m] * (1 - fu) + img[v0c, u1m] * fu
    bot = img[v1c, u0m] * (1 - fu) + img[v1c, u1m] * fu
    return top * (1 - fv) + bot * fv


def fit_light_from_equirect(img: np.ndarray, l_max: int = MAX_BAND_DEFAULT,
                            n_samples: int = 262144, seed: int = 0) -> SHLight:
    """Fit SH coefficients to an equirectangular HDR map by projected Monte-Carlo.

    Stratified uniform-sphere samples; coefficients are the orthonormal
    projection (4 pi / N) sum L(w) Y(w).
    """
    gen = frng.generator(seed, frng.STREAM_ENVMAP)
    dirs = frng.uniform_sphere(gen, n_samples, stratified=True)
    vals = equirect_lookup(img, dirs)
    basis = eval_sh_basis(dirs, l_max)
    coeffs = basis.T @ vals * (4.0 * np.pi / dirs.shape[0])
    return SHLight(l_max, coeffs.T)
