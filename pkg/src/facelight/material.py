"""Spatially-varying appearance: albedo, specular intensity, shininess, and
low-rank basis coefficients, plus the integrated specular basis.

Two families implement the same field interface: learnable sine-activated
networks (squashed outputs, weights on the ParamTape) and analytic test
fields (constant / linear ramp / two-lobe) that make every downstream module
testable without training.  The integrated basis likewise comes as a
learnable network over (omega_o, n, omega_o . n) or as a monotone-cubic table
in omega_o . n built by the oracle integrator for isotropic analytic lobes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import autodiff as ad
from .geometry import BoundingSphere
from .nets import MLP, MLPSpec
from .vec import check_unit, dot3

DEFAULT_BASIS_COUNT = 3  # rank of the shared specular basis


class BackFacingError(ValueError):
    """Raised when the integrated basis is queried with omega_o . n <= 0."""


class OutOfDomainError(ValueError):
    """Raised for material queries well outside the bounding sphere."""


@dataclass
class MaterialSample:
    """Per-point appearance parameters (arrays or Tensors, batched)."""

    albedo: object   # (N, 3) in [0, 1]
    rho: object      # (N, 1) in [0, 1]
    kappa: object    # (N, 1) > 0
    coeffs: object   # (N, k)

    @property
    def k(self) -> int:
        return ad.value_of(self.coeffs).shape[-1]


def _check_domain(x: np.ndarray, bounds: BoundingSphere):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if not np.all(bounds.contains(x, slack=0.10)):
        raise OutOfDomainError("material query outside the bounding sphere by more than 10%")
    return x


# ---------------------------------------------------------------------------
# material fields
# ---------------------------------------------------------------------------

class MaterialField:
    k: int = DEFAULT_BASIS_COUNT

    def eval(self, x: np.ndarray) -> MaterialSample:
        raise NotImplementedError


def softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


class NetworkMaterialField(MaterialField):
    """Sine-activated spatial network with squashed heads.

    Output layout is (albedo[3], rho, inv_kappa_raw, coeffs[k]); albedo and
    rho pass through a logistic squash, the shininess is predicted as an
    inverse through a softplus, and the basis coefficients are unconstrained.
    """

    def __init__(self, mlp: MLP, bounds: BoundingSphere, k: int):
        self.mlp = mlp
        self.bounds = bounds
        self.k = k

    @classmethod
    def create(cls, tape, name: str, bounds: BoundingSphere, gen,
               hidden=(256, 256, 256, 256), k: int = DEFAULT_BASIS_COUNT,
               w0: float = 30.0, init_rho: float = 0.05, init_kappa: float = 64.0,
               init_coeff: float = 0.5, group: str = "material"):
        final_bias = ([0.0, 0.0, 0.0, logit(init_rho), softplus_inv(1.0 / init_kappa)]
                      + [init_coeff] * k)
        spec = MLPSpec(in_dim=3, hidden=list(hidden), out_dim=5 + k,
                       activation="sine", w0=w0, final_bias=final_bias)
        return cls(MLP.create(tape, name, spec, gen, group=group), bounds, k)

    def eval(self, x) -> MaterialSample:
        x = _check_domain(x, self.bounds)
        xh = (x - self.bounds.center) / self.bounds.radius
        out = self.mlp.forward(xh)
        albedo = ad.sigmoid(out[..., 0:3])
        rho = ad.sigmoid(out[..., 3:4])
        inv_kappa = ad.softplus(out[..., 4:5])
        kappa = 1.0 / inv_kappa
        coeffs = out[..., 5:]
        return MaterialSample(albedo, rho, kappa, coeffs)


@dataclass
class ConstantMaterialField(MaterialField):
    albedo: np.ndarray
    rho: float
    kappa: float
    coeffs: np.ndarray
    bounds: BoundingSphere = None

    kind = "constant"

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        self.k = self.coeffs.size
        _validate_ranges(self.albedo, self.rho, self.kappa)

    def eval(self, x) -> MaterialSample:
        x = _check_domain(x, self.bounds) if self.bounds else np.atleast_2d(x)
        n = x.shape[0]
        return MaterialSample(
            np.broadcast_to(self.albedo, (n, 3)).copy(),
            np.full((n, 1), self.rho),
            np.full((n, 1), self.kappa),
            np.broadcast_to(self.coeffs, (n, self.k)).copy())

    def to_json(self):
        return {"kind": "constant", "albedo": list(map(float, self.albedo)),
                "rho": float(self.rho), "kappa": float(self.kappa),
                "coeffs": list(map(float, self.coeffs))}


@dataclass
class RampMaterialField(MaterialField):
    """Linear interpolation of albedo and coefficients along an axis.

    The ramp coordinate s = (1 + x_hat . axis) / 2 spans [0, 1] across the
    bounding sphere, so endpoint parameters bound the field values.
    """

    bounds: BoundingSphere
    albedo_lo: np.ndarray
    albedo_hi: np.ndarray
    rho: float
    kappa: float
    coeffs_lo: np.ndarray
    coeffs_hi: np.ndarray
    axis: np.ndarray = None

    kind = "ramp"

    def __post_init__(self):
        self.albedo_lo = np.asarray(self.albedo_lo, dtype=np.float64)
        self.albedo_hi = np.asarray(self.albedo_hi, dtype=np.float64)
        self.coeffs_lo = np.asarray(self.coeffs_lo, dtype=np.float64)
        self.coeffs_hi = np.asarray(self.coeffs_hi, dtype=np.float64)
        self.axis = (np.array([0.0, 0.0, 1.0]) if self.axis is None
                     else np.asarray(self.axis, dtype=np.float64))
        self.k = self.coeffs_lo.size
        _validate_ranges(self.albedo_lo, self.rho, self.kappa)
        _validate_ranges(self.albedo_hi, self.rho, self.kappa)

    def _s(self, x):
        xh = (x - self.bounds.center) / self.bounds.radius
        return (1.0 + xh @ self.axis)[:, None] * 0.5

    def eval(self, x) -> MaterialSample:
        x = _check_domain(x, self.bounds)
        s = self._s(x)
        albedo = self.albedo_lo + s * (self.albedo_hi - self.albedo_lo)
        coeffs = self.coeffs_lo + s * (self.coeffs_hi - self.coeffs_lo)
        n = x.shape[0]
        return MaterialSample(albedo, np.full((n, 1), self.rho),
                              np.full((n, 1), self.kappa), coeffs)

    def to_json(self):
        return {"kind": "ramp", "albedo_lo": list(map(float, self.albedo_lo)),
                "albedo_hi": list(map(float, self.albedo_hi)),
                "rho": float(self.rho), "kappa": float(self.kappa),
                "coeffs_lo": list(map(float, self.coeffs_lo)),
                "coeffs_hi": list(map(float, self.coeffs_hi)),
                "axis": list(map(float, self.axis))}


@dataclass
class TwoLobeMaterialField(MaterialField):
    """Logistic switch between two coefficient vectors along an axis."""

    bounds: BoundingSphere
    albedo: np.ndarray
    rho: float
    kappa: float
    coeffs_a: np.ndarray
    coeffs_b: np.ndarray
    axis: np.ndarray = None
    width: float = 0.25  # switch softness in normalized coordinates

    kind = "two_lobe"

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.coeffs_a = np.asarray(self.coeffs_a, dtype=np.float64)
        self.coeffs_b = np.asarray(self.coeffs_b, dtype=np.float64)
        self.axis = (np.array([1.0, 0.0, 0.0]) if self.axis is None
                     else np.asarray(self.axis, dtype=np.float64))
        self.k = self.coeffs_a.size
        _validate_ranges(self.albedo, self.rho, self.kappa)

    def eval(self, x) -> MaterialSample:
        x = _check_domain(x, self.bounds)
        xh = (x - self.bounds.center) / self.bounds.radius
        t = (xh @ self.axis) / self.width
        s = 1.0 / (1.0 + np.exp(-t))[:, None]
        coeffs = self.coeffs_a + s * (self.coeffs_b - self.coeffs_a)
        n = x.shape[0]
        return MaterialSample(np.broadcast_to(self.albedo, (n, 3)).copy(),
                              np.full((n, 1), self.rho),
                              np.full((n, 1), self.kappa), coeffs)

    def to_json(self):
        return {"kind": "two_lobe", "albedo": list(map(float, self.albedo)),
                "rho": float(self.rho), "kappa": float(self.kappa),
                "coeffs_a": list(map(float, self.coeffs_a)),
                "coeffs_b": list(map(float, self.coeffs_b)),
                "axis": list(map(float, self.axis)), "width": float(self.width)}


def _validate_ranges(albedo, rho, kappa):
    if np.any((np.asarray(albedo) < 0) | (np.asarray(albedo) > 1)):
        raise ValueError("albedo components must lie in [0, 1]")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if kappa <= 0:
        raise ValueError("kappa must be positive")


def material_field_from_json(obj: dict, bounds: BoundingSphere) -> MaterialField:
    kind = obj.get("kind")
    kwargs = {k: v for k, v in obj.items() if k != "kind"}
    if kind == "constant":
        return ConstantMaterialField(bounds=bounds, **kwargs)
    if kind == "ramp":
        return RampMaterialField(bounds=bounds, **kwargs)
    if kind == "two_lobe":
        return TwoLobeMaterialField(bounds=bounds, **kwargs)
    raise ValueError(f"unknown material field kind {kind!r}")


def eval_material(field: MaterialField, x) -> MaterialSample:
    """Evaluate an appearance field at positions inside the scene domain."""
    return field.eval(x)


# ---------------------------------------------------------------------------
# integrated basis
# ---------------------------------------------------------------------------

class IntegratedBasis:
    k: int

    def eval_mu(self, omega_o, n, mu):
        raise NotImplementedError


class BasisTable(IntegratedBasis):
    """Monotone-cubic lookup of integrated basis values over mu = omega_o . n.

    Node values come from the oracle hemisphere integration of each analytic
    lobe; evaluation gathers the per-interval cubic coefficients (constants)
    and runs the polynomial in tape ops, so it is differentiable in mu.
    """

    def __init__(self, nodes: np.ndarray, values: np.ndarray, meta=None):
        self.nodes = np.asarray(nodes, dtype=np.float64)
        self.values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        self.k = self.values.shape[0]
        self.meta = meta or []
        # (k, 4, n-1) cubic coefficients per basis
        self._coeffs = np.stack(
            [PchipInterpolator(self.nodes, v).c for v in self.values])

    def eval_mu(self, omega_o, n, mu):
        mu_v = np.clip(ad.value_of(mu), self.nodes[0], self.nodes[-1])
        idx = np.clip(np.searchsorted(self.nodes, mu_v.ravel(), side="right") - 1,
                      0, len(self.nodes) - 2).reshape(mu_v.shape)
        dt = ad.clamp(mu, self.nodes[0], self.nodes[-1]) - self.nodes[idx]
        cols = []
        for j in range(self.k):
            c = self._coeffs[j]
            val = ((c[0][idx] * dt + c[1][idx]) * dt + c[2][idx]) * dt + c[3][idx]
            cols.append(val[..., 0] if ad.value_of(val).ndim > 1 else val)
        return ad.stack(cols, axis=-1)

    def to_json(self):
        return {"kind": "table", "nodes": list(map(float, self.nodes)),
                "values": [list(map(float, v)) for v in self.values],
                "meta": self.meta}

    @classmethod
    def from_json(cls, obj: dict) -> "BasisTable":
        return cls(np.asarray(obj["nodes"]), np.asarray(obj["values"]),
                   obj.get("meta"))


class BasisNetwork(IntegratedBasis):
    """Learnable integrated basis over (omega_o, n, omega_o . n)."""

    def __init__(self, mlp: MLP, k: int):
        self.mlp = mlp
        self.k = k

    @classmethod
    def create(cls, tape, name: str, gen, hidden=(128, 128, 128),
               k: int = DEFAULT_BASIS_COUNT, group: str = "basis"):
        spec = MLPSpec(in_dim=7, hidden=list(hidden), out_dim=k, activation="tanh")
        return cls(MLP.create(tape, name, spec, gen, group=group), k)

    def eval_mu(self, omega_o, n, mu):
        inp = ad.concatenate([omega_o, n, mu], axis=-1)
        return self.mlp.forward(inp)


def eval_integrated_basis(basis: IntegratedBasis, omega_o, n):
    """Integrated basis values B(omega_o, n), shape (N, k) or (k,).

    Raises BackFacingError when omega_o . n <= 0 anywhere.
    """
    single = ad.value_of(omega_o).ndim == 1
    wo = ad.reshape(omega_o, (1, 3)) if single else omega_o
    nn = ad.reshape(n, (1, 3)) if single else n
    check_unit(wo, what="omega_o")
    check_unit(nn, what="normal")
    mu = dot3(wo, nn)
    if np.any(ad.value_of(mu) <= 0.0):
        raise BackFacingError("omega_o . n must be positive (front-facing)")
    out = basis.eval_mu(wo, nn, mu)
    if single and not ad.is_tensor(out):
        return out[0]
    return out


def specular_radiance(m: MaterialSample, basis_out, prefiltered):
    """rho * max(c . B, 0) * prefiltered, per channel.

    `prefiltered` is the lobe-filtered light (N, 3); the material factor is a
    scalar per point, so the output chroma equals the light chroma.
    """
    cv = ad.value_of(m.coeffs)
    bv = ad.value_of(basis_out)
    if cv.shape[-1] != bv.shape[-1]:
        raise ValueError(f"coefficient/basis rank mismatch: {cv.shape[-1]} vs {bv.shape[-1]}")
    scalar = ad.relu((m.coeffs * basis_out).sum(axis=-1, keepdims=True))
    return m.rho * scalar * prefiltered
