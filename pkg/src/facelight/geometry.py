"""Signed-distance geometry: analytic priors plus a learnable displacement.

The total field is ``sdf(x) = prior(x) + displacement(x)`` in millimeters,
negative inside.  Priors are closed-form shapes with closed-form gradients;
the displacement is either an analytic test field or a positionally-encoded
MLP whose spatial gradient is assembled from tape ops (never finite
differences), so normals stay differentiable with respect to the weights.

Positions entering field evaluation are plain arrays: sample locations are
treated as constants of the current step, and all learnable structure lives
in the displacement/coefficient parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nets import MLP, MLPSpec

TRUNCATION_MM = 50.0     # tracing consumers clamp the field to +-5 cm
BLOB_BLEND_MM = 10.0     # fixed smooth-min blend radius
GRAD_EPS = 1e-8


class GeometryError(RuntimeError):
    pass


@dataclass
class BoundingSphere:
    """The sampling domain: everything renderable lives inside this sphere."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("bounding radius must be positive")

    def contains(self, x: np.ndarray, slack: float = 0.0) -> np.ndarray:
        d = np.linalg.norm(np.asarray(x) - self.center, axis=-1)
        return d <= self.radius * (1.0 + slack)

    def ray_range(self, origins: np.ndarray, dirs: np.ndarray):
        """Entry/exit parameters of rays against the sphere.

        Returns (t_enter, t_exit, hits) with t clamped to t >= 0; rays whose
        segment lies entirely behind the origin report hits = False.
        """
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        hits = disc > 0.0
        s = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - s
        t1 = -b + s
        hits &= t1 > 0.0
        return np.maximum(t0, 0.0), t1, hits

    def to_json(self) -> dict:
        return {"center": list(map(float, self.center)), "radius": float(self.radius)}

    @classmethod
    def from_json(cls, obj: dict) -> "BoundingSphere":
        return cls(np.asarray(obj["center"]), float(obj["radius"]))


# ---------------------------------------------------------------------------
# analytic priors
# ---------------------------------------------------------------------------

class Prior:
    """Closed-form SDF prior; 1-Lipschitz (step_scale compensates when only
    approximately so)."""

    kind = "prior"
    step_scale = 1.0
    open_back = False
    back_axis = np.array([0.0, 0.0, 1.0])

    def sdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def in_backspace(self, x: np.ndarray) -> np.ndarray:
        if not self.open_back:
            return np.zeros(np.asarray(x).shape[:-1], dtype=bool)
        return (np.asarray(x) - self.center) @ self.back_axis < 0.0


@dataclass
class SpherePrior(Prior):
    center: np.ndarray
    radius: float
    open_back: bool = False
    back_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    kind = "sphere"
    step_scale = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.back_axis = np.asarray(self.back_axis, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def sdf(self, x):
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def grad(self, x):
        p = np.asarray(x) - self.center
        n = np.linalg.norm(p, axis=-1, keepdims=True)
        return p / np.maximum(n, 1e-300)

    def to_json(self):
        d = {"kind": "sphere", "center": list(map(float, self.center)),
             "radius": float(self.radius)}
        if self.open_back:
            d["open_back"] = True
            d["back_axis"] = list(map(float, self.back_axis))
        return d


@dataclass
class EllipsoidPrior(Prior):
    center: np.ndarray
    radii: np.ndarray
    open_back: bool = False
    back_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    kind = "ellipsoid"
    step_scale = 0.9  # the bound below is only approximately a distance

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        self.back_axis = np.asarray(self.back_axis, dtype=np.float64)
        if np.any(self.radii <= 0):
            raise ValueError("radii must be positive")

    def sdf(self, x):
        p = np.asarray(x) - self.center
        k0 = np.linalg.norm(p / self.radii, axis=-1)
        k1 = np.linalg.norm(p / self.radii**2, axis=-1)
        return np.where(k1 > 0, k0 * (k0 - 1.0) / np.maximum(k1, 1e-300),
                        -np.min(self.radii))

    def grad(self, x):
        p = np.asarray(x) - self.center
        k0 = np.linalg.norm(p / self.radii, axis=-1, keepdims=True)
        k1 = np.linalg.norm(p / self.radii**2, axis=-1, keepdims=True)
        k0 = np.maximum(k0, 1e-300)
        k1 = np.maximum(k1, 1e-300)
        dk0 = p / (self.radii**2 * k0)
        dk1 = p / (self.radii**4 * k1)
        return (2.0 * k0 - 1.0) / k1 * dk0 - k0 * (k0 - 1.0) / k1**2 * dk1

    def to_json(self):
        d = {"kind": "ellipsoid", "center": list(map(float, self.center)),
             "radii": list(map(float, self.radii))}
        if self.open_back:
            d["open_back"] = True
            d["back_axis"] = list(map(float, self.back_axis))
        return d


@dataclass
class BlobsPrior(Prior):
    """Smooth-min union of spheres (exponential blend, fixed 10 mm radius).

    The soft minimum is a convex combination of the child gradients, so the
    blend stays 1-Lipschitz; the value under-reports distance near overlaps,
    hence the conservative step scale.
    """

    centers: np.ndarray
    radii: np.ndarray
    blend: float = BLOB_BLEND_MM
    open_back: bool = False
    back_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    kind = "blobs"
    step_scale = 0.9

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.radii = np.atleast_1d(np.asarray(self.radii, dtype=np.float64))
        self.back_axis = np.asarray(self.back_axis, dtype=np.float64)
        if len(self.centers) != len(self.radii):
            raise ValueError("one radius per blob center")
        if np.any(self.radii <= 0) or self.blend <= 0:
            raise ValueError("radii and blend must be positive")

    @property
    def center(self):
        return self.centers.mean(axis=0)

    def _dists(self, x):
        p = np.asarray(x)[..., None, :] - self.centers  # (..., m, 3)
        return np.linalg.norm(p, axis=-1) - self.radii, p

    def sdf(self, x):
        d, _ = self._dists(x)
        m = d.min(axis=-1, keepdims=True)
        return (m - self.blend * np.log(np.sum(np.exp(-(d - m) / self.blend),
                                               axis=-1, keepdims=True)))[..., 0]

    def grad(self, x):
        d, p = self._dists(x)
        m = d.min(axis=-1, keepdims=True)
        w = np.exp(-(d - m) / self.blend)
        w /= w.sum(axis=-1, keepdims=True)
        g = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-300)
        return np.sum(w[..., None] * g, axis=-2)

    def to_json(self):
        d = {"kind": "blobs", "centers": [list(map(float, c)) for c in self.centers],
             "radii": list(map(float, self.radii)), "blend": float(self.blend)}
        if self.open_back:
            d["open_back"] = True
            d["back_axis"] = list(map(float, self.back_axis))
        return d


def prior_from_json(obj: dict) -> Prior:
    kinds = {"sphere": SpherePrior, "ellipsoid": EllipsoidPrior, "blobs": BlobsPrior}
    kind = obj.get("kind")
    if kind not in kinds:
        raise ValueError(f"unknown prior kind {kind!r}")
    kwargs = {k: v for k, v in obj.items() if k != "kind"}
    for key in ("center", "centers", "radii", "back_axis"):
        if key in kwargs:
            kwargs[key] = np.asarray(kwargs[key], dtype=np.float64)
    return kinds[kind](**kwargs)


# ---------------------------------------------------------------------------
# displacement fields
# ---------------------------------------------------------------------------

class Displacement:
    kind = "displacement"

    def eval(self, x: np.ndarray):
        raise NotImplementedError

    def grad(self, x: np.ndarray):
        raise NotImplementedError


@dataclass
class ConstantDisplacement(Displacement):
    value: float = 0.0
    kind = "constant"

    def eval(self, x):
        return np.full(np.asarray(x).shape[:-1], self.value)

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def to_json(self):
        return {"kind": "constant", "value": float(self.value)}


def _encoding_freqs(bands: int) -> np.ndarray:
    return (2.0 ** np.arange(bands)) * math.pi


def positional_encoding(xh, bands: int):
    """NeRF-style encoding of normalized coordinates, laid out per band as
    [sin(2^j pi x), cos(2^j pi x)]; shape (N, 6*bands)."""
    xh = np.asarray(xh, dtype=np.float64)
    z = xh[:, None, :] * _encoding_freqs(bands)[None, :, None]  # (N, L, 3)
    enc = np.stack([np.sin(z), np.cos(z)], axis=2)              # (N, L, 2, 3)
    return enc.reshape(xh.shape[0], 6 * bands)


class NetDisplacement(Displacement):
    """Positional-encoded MLP displacement, in millimeters.

    The spatial gradient chains the analytic encoding Jacobian with the
    network's input gradient: every factor is a tape op, so d(normal)/d(weights)
    is available to the optimizer.
    """

    kind = "network"

    def __init__(self, mlp: MLP, bounds: BoundingSphere, bands: int = 6):
        self.mlp = mlp
        self.bounds = bounds
        self.bands = bands

    @classmethod
    def create(cls, tape, name: str, bounds: BoundingSphere, gen,
               hidden=(64, 64), bands: int = 6, group: str = "geometry"):
        spec = MLPSpec(in_dim=6 * bands, hidden=list(hidden), out_dim=1,
                       activation="softplus", final_zero=True)
        return cls(MLP.create(tape, name, spec, gen, group=group), bounds, bands)

    def _normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.bounds.center) / self.bounds.radius

    def eval(self, x):
        xh = self._normalize(x)
        enc = positional_encoding(xh, self.bands)
        out = self.mlp.forward(enc)
        return out[..., 0]

    def frozen_view(self) -> "NetDisplacement":
        """Numpy view on the current weight values (no tape nodes)."""
        mlp = MLP(self.mlp.spec,
                  [ad.value_of(w) for w in self.mlp.weights],
                  [ad.value_of(b) for b in self.mlp.biases])
        return NetDisplacement(mlp, self.bounds, self.bands)

    def eval_and_grad(self, x):
        """(displacement, spatial gradient): one shared forward pass.

        The gradient chains the encoding Jacobian (each encoded component
        touches exactly one coordinate) with the network's input gradient,
        as a handful of reshaped tape ops.
        """
        xh = self._normalize(x)
        n = xh.shape[0]
        freqs = _encoding_freqs(self.bands)
        z = xh[:, None, :] * freqs[None, :, None]      # (N, L, 3)
        sin_z = np.sin(z)
        cos_z = np.cos(z)
        enc = np.stack([sin_z, cos_z], axis=2).reshape(n, 6 * self.bands)
        out, pre = self.mlp.forward(enc, keep_pre=True)
        g_enc = self.mlp.input_gradient(enc, pre=pre)  # (N, 6*bands)
        deriv = np.stack([freqs[None, :, None] * cos_z,
                          -freqs[None, :, None] * sin_z], axis=2)
        g = ad.reshape(g_enc, (n, self.bands, 2, 3)) * deriv
        grad_xh = g.sum(axis=(1, 2)) if ad.is_tensor(g) \
            else np.sum(g, axis=(1, 2))
        return out[..., 0], grad_xh / self.bounds.radius

    def grad(self, x):
        return self.eval_and_grad(x)[1]

    def to_json(self):
        return {"kind": "network", "bands": self.bands,
                "spec": self.mlp.spec.to_json()}


# ---------------------------------------------------------------------------
# composed field
# ---------------------------------------------------------------------------

class SdfField:
    """prior + displacement, with the bounding sphere that scopes sampling."""

    def __init__(self, prior: Prior, displacement: Displacement,
                 bounds: BoundingSphere):
        self.prior = prior
        self.displacement = displacement
        self.bounds = bounds

    def sdf(self, x):
        if not np.all(np.isfinite(np.asarray(x))):
            raise GeometryError("non-finite query positions")
        return self.prior.sdf(x) + self.displacement.eval(x)

    def sdf_truncated(self, x):
        return ad.clamp(self.sdf(x), -TRUNCATION_MM, TRUNCATION_MM)

    def grad(self, x):
        return self.prior.grad(x) + self.displacement.grad(x)

    def sdf_and_grad(self, x):
        if isinstance(self.displacement, NetDisplacement):
            d, g = self.displacement.eval_and_grad(x)
            return self.prior.sdf(x) + d, self.prior.grad(x) + g
        return self.sdf(x), self.grad(x)

    def frozen_view(self) -> "SdfField":
        """Field over the current weight values only (safe for tracing)."""
        disp = self.displacement
        if hasattr(disp, "frozen_view"):
            disp = disp.frozen_view()
        return SdfField(self.prior, disp, self.bounds)

    def normal(self, x, validate: bool = True):
        g = self.grad(x)
        norms = np.linalg.norm(ad.value_of(g), axis=-1, keepdims=True)
        if validate and np.any(norms < GRAD_EPS):
            raise GeometryError(
                f"degenerate field gradient at {int((norms < GRAD_EPS).sum())} point(s)")
        if ad.is_tensor(g):
            return g / ad.clamp_min(ad.sqrt((g * g).sum(axis=-1, keepdims=True)), GRAD_EPS)
        return g / np.maximum(norms, GRAD_EPS)
