"""Counter-based random streams and spherical samplers.

All randomness in the toolkit flows through Philox4x32-10 (fixed constants,
counter-based), keyed by a (seed, stream) pair, so every consumer draws from
an independent, platform-reproducible sequence.  Stratified variants jitter a
near-square grid over the unit square; they are used by the high-accuracy
estimator gates where plain Monte-Carlo variance would swamp the tolerance.
"""

from __future__ import annotations

import numpy as np

from .vec import orthonormal_frame

# stream ids for the library's internal consumers
STREAM_RAYS = 1
STREAM_EIKONAL = 2
STREAM_INIT = 3
STREAM_ORACLE = 4
STREAM_ENVMAP = 5


def generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator for an independent (seed, stream) pair."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(stream & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def unit_square(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    u = rng.random((n, 2))
    return u[:, 0], u[:, 1]


def unit_square_stratified(rng: np.random.Generator, n: int):
    """Jittered samples on a near-square grid with at least n points.

    Returns (u1, u2, n_actual); n_actual = ceil(sqrt(n))**2 >= n.
    """
    side = int(np.ceil(np.sqrt(n)))
    n_actual = side * side
    jitter = rng.random((n_actual, 2))
    idx = np.arange(n_actual)
    u1 = (idx // side + jitter[:, 0]) / side
    u2 = (idx % side + jitter[:, 1]) / side
    return u1, u2, n_actual


def _sphere_from_uv(u1, u2):
    z = 1.0 - 2.0 * u1
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = 2.0 * np.pi * u2
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def uniform_sphere(rng, n: int, stratified: bool = False):
    """Uniform directions on S^2; pdf = 1/(4 pi)."""
    if stratified:
        u1, u2, _ = unit_square_stratified(rng, n)
    else:
        u1, u2 = unit_square(rng, n)
    return _sphere_from_uv(u1, u2)


def uniform_hemisphere(rng, n_axis: np.ndarray, n: int, stratified: bool = False):
    """Uniform directions on the hemisphere around n_axis; pdf = 1/(2 pi)."""
    if stratified:
        u1, u2, _ = unit_square_stratified(rng, n)
    else:
        u1, u2 = unit_square(rng, n)
    z = u1
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = 2.0 * np.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    return _to_frame(local, n_axis)


def cosine_hemisphere(rng, n_axis: np.ndarray, n: int, stratified: bool = False):
    """Cosine-weighted directions around n_axis; pdf = cos(theta)/pi."""
    if stratified:
        u1, u2, _ = unit_square_stratified(rng, n)
    else:
        u1, u2 = unit_square(rng, n)
    z = np.sqrt(1.0 - u1)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    return _to_frame(local, n_axis)


def vmf(rng, axis: np.ndarray, kappa: float, n: int, stratified: bool = False):
    """von Mises-Fisher directions around `axis` with concentration kappa.

    Inverse-CDF on the axial cosine:
        w = 1 + log(u + (1-u) e^{-2 kappa}) / kappa,  u ~ U(0,1]
    which is exact and stable for kappa up to ~1e8 (e^{-2k} underflows to 0
    and the expression degrades gracefully to 1 + log(u)/kappa).
    """
    if kappa <= 0.0:
        raise ValueError("kappa must be positive")
    if stratified:
        u1, u2, _ = unit_square_stratified(rng, n)
    else:
        u1, u2 = unit_square(rng, n)
    u = 1.0 - u1  # (0, 1]
    w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    w = np.clip(w, -1.0, 1.0)
    r = np.sqrt(np.maximum(1.0 - w * w, 0.0))
    phi = 2.0 * np.pi * u2
    local = np.stack([r * np.cos(phi), r * np.sin(phi), w], axis=-1)
    return _to_frame(local, axis)


def _to_frame(local: np.ndarray, axis: np.ndarray) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    t, b = orthonormal_frame(axis)
    return (local[:, 0:1] * t[None, :] + local[:, 1:2] * b[None, :]
            + local[:, 2:3] * axis[None, :])


def uniform_ball(rng, center: np.ndarray, radius: float, n: int) -> np.ndarray:
    """Uniform positions inside a ball (rejection-free, radial CDF)."""
    dirs = uniform_sphere(rng, n)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return np.asarray(center, dtype=np.float64)[None, :] + dirs * r[:, None]


def fibonacci_sphere(n: int) -> np.ndarray:
    """Deterministic, seedless near-uniform direction set (Fibonacci lattice)."""
    i = np.arange(n, dtype=np.float64)
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = 2.0 * np.pi * i / golden
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
