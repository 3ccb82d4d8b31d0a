"""Small 3-vector helpers shared by the shading and geometry code.

All functions accept plain ndarrays or tape Tensors with a trailing axis of
size 3 and preserve the input kind.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def dot3(a, b, keepdims: bool = True):
    """Dot product over the trailing axis."""
    prod = a * b
    if ad.is_tensor(prod):
        return prod.sum(axis=-1, keepdims=keepdims)
    return np.sum(prod, axis=-1, keepdims=keepdims)


def norm3(v, keepdims: bool = True):
    return ad.sqrt(dot3(v, v, keepdims=keepdims))


def normalize(v, eps: float = 0.0):
    n = norm3(v, keepdims=True)
    if eps:
        n = ad.clamp_min(n, eps)
    return v / n


def reflect(omega_o, n):
    """Mirror omega_o about n: 2 (omega_o . n) n - omega_o."""
    return 2.0 * dot3(omega_o, n) * n - omega_o


def check_unit(v, tol: float = 1e-9, what: str = "direction"):
    """Raise ValueError unless every vector has unit Euclidean norm."""
    val = ad.value_of(v)
    n = np.linalg.norm(val, axis=-1)
    if not np.all(np.abs(n - 1.0) <= tol):
        worst = float(np.max(np.abs(n - 1.0)))
        raise ValueError(f"{what} must be unit-norm (max |norm-1| = {worst:.3e})")


def orthonormal_frame(n: np.ndarray):
    """Right-handed tangent frame (t, b, n) for unit normals, branch-free.

    Follows the copysign construction of Duff et al.; numpy only.
    """
    n = np.asarray(n, dtype=np.float64)
    single = n.ndim == 1
    if single:
        n = n[None, :]
    s = np.copysign(1.0, n[:, 2])
    a = -1.0 / (s + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t1 = np.stack([1.0 + s * n[:, 0] ** 2 * a, s * b, -s * n[:, 0]], axis=-1)
    t2 = np.stack([b, s + n[:, 1] ** 2 * a, -n[:, 1]], axis=-1)
    if single:
        return t1[0], t2[0]
    return t1, t2
