"""Synthetic scenes and datasets used by the demos, the validation suites,
and the recovery benchmark.

The fit benchmark scene is a 100 mm sphere with a smooth linear-ramp albedo
around mid-gray, a rank-2 known specular basis (two lobes of different
sharpness), and a mildly colored order-4 light; ground-truth images come
from the deterministic forward renderer on these analytic fields.
"""

from __future__ import annotations

import numpy as np

from . import oracle
from . import render as rmod
from . import sh as shmod
from .geometry import (BlobsPrior, BoundingSphere, ConstantDisplacement,
                       SdfField, SpherePrior)
from .material import ConstantMaterialField, RampMaterialField

SPHERE_RADIUS_MM = 100.0
BOUNDS_RADIUS_MM = 150.0
CAMERA_RADIUS_MM = 420.0
DEFAULT_FOV_DEG = 32.0


def camera_ring(n: int, width: int, height: int, fov_deg: float = DEFAULT_FOV_DEG,
                radius: float = CAMERA_RADIUS_MM, z_span: float = 0.6):
    """Cameras on a spiral band around the scene, all aimed at the origin."""
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(n):
        z = -z_span + 2.0 * z_span * (i + 0.5) / n
        az = golden * i
        r = np.sqrt(max(1.0 - z * z, 1e-9))
        pos = radius * np.array([r * np.cos(az), r * np.sin(az), z])
        cams.append(rmod.CameraModel.look_at(pos, [0.0, 0.0, 0.0],
                                             width, height, fov_deg))
    return cams


def default_basis(k: int = 3) -> "oracle.BasisTable":
    kinds = [oracle.AnalyticBrdf.vmf_lobe(48.0),
             oracle.AnalyticBrdf.vmf_lobe(192.0),
             oracle.AnalyticBrdf.lambertian(1.0)]
    return oracle.make_basis_table(kinds[:k])


def soft_studio_light(l_max: int = 4, intensity: float = 1.0,
                      tint=(1.0, 0.98, 0.94)) -> shmod.SHLight:
    """Band-limited, everywhere-positive light: a broad lobe plus ambient.

    Projected exactly (the target is a low-order polynomial on the sphere),
    so the coefficient set is reproducible without sampling noise.
    """
    axis = np.array([0.45, 0.25, 0.86])
    axis /= np.linalg.norm(axis)
    tint = np.asarray(tint, dtype=np.float64)

    def radiance(dirs):
        t = np.clip(dirs @ axis, -1.0, 1.0)
        lobe = 0.55 * (0.5 + 0.5 * t) ** 3
        side = 0.10 * (0.5 - 0.5 * dirs[:, 2])
        base = 0.45 + lobe + side
        return intensity * base[:, None] * tint[None, :]

    return shmod.project_function_to_sh(radiance, l_max)


def make_sphere_scene(*, rho: float = 0.06, kappa: float = 64.0,
                      width: int = 128, height: int = 128,
                      beta: float = 0.02, light: shmod.SHLight | None = None,
                      n_cameras: int = 1) -> rmod.Scene:
    """The bundled demo scene: constant mid-gray material on a sphere."""
    bounds = BoundingSphere([0.0, 0.0, 0.0], BOUNDS_RADIUS_MM)
    geometry = SdfField(SpherePrior([0.0, 0.0, 0.0], SPHERE_RADIUS_MM),
                        ConstantDisplacement(0.0), bounds)
    material = ConstantMaterialField([0.5, 0.5, 0.5], rho, kappa,
                                     [1.0, 0.0, 0.0], bounds=bounds)
    basis = default_basis(3)
    if light is None:
        light = soft_studio_light(l_max=4)
    cams = camera_ring(n_cameras, width, height)
    return rmod.Scene(geometry, material, basis, light, beta=beta, cameras=cams)


def make_blobs_scene(*, width: int = 128, height: int = 128,
                     beta: float = 0.02) -> rmod.Scene:
    """Two-blob smooth-min test shape under the studio light."""
    bounds = BoundingSphere([0.0, 0.0, 0.0], BOUNDS_RADIUS_MM)
    prior = BlobsPrior(centers=[[-35.0, 0.0, 0.0], [45.0, 10.0, 5.0]],
                       radii=[70.0, 55.0])
    geometry = SdfField(prior, ConstantDisplacement(0.0), bounds)
    material = ConstantMaterialField([0.55, 0.45, 0.40], 0.06, 96.0,
                                     [0.7, 0.3, 0.0], bounds=bounds)
    basis = default_basis(3)
    light = soft_studio_light(l_max=4)
    cams = camera_ring(1, width, height, fov_deg=40.0)
    return rmod.Scene(geometry, material, basis, light, beta=beta, cameras=cams)


def make_fit_ground_truth(*, width: int = 128, height: int = 128,
                          n_views: int = 20, beta: float = 0.1,
                          l_max: int = 4) -> rmod.Scene:
    """Ground truth for the inverse-rendering benchmark (rank-2 known basis)."""
    bounds = BoundingSphere([0.0, 0.0, 0.0], BOUNDS_RADIUS_MM)
    geometry = SdfField(SpherePrior([0.0, 0.0, 0.0], SPHERE_RADIUS_MM),
                        ConstantDisplacement(0.0), bounds)
    axis = np.array([0.8, 0.55, 0.24])
    axis /= np.linalg.norm(axis)
    material = RampMaterialField(
        bounds=bounds,
        albedo_lo=[0.40, 0.42, 0.48], albedo_hi=[0.62, 0.55, 0.47],
        rho=0.06, kappa=64.0,
        coeffs_lo=[0.9, 0.1], coeffs_hi=[0.2, 0.8], axis=axis)
    basis = oracle.make_basis_table([oracle.AnalyticBrdf.vmf_lobe(48.0),
                                     oracle.AnalyticBrdf.phong_lobe(90.0)])
    light = soft_studio_light(l_max=l_max, intensity=0.92)
    cams = camera_ring(n_views, width, height)
    return rmod.Scene(geometry, material, basis, light, beta=beta, cameras=cams)


def render_views(scene: rmod.Scene, cameras=None, **render_kwargs):
    cameras = cameras if cameras is not None else scene.cameras
    images = []
    for cam in cameras:
        img, _ = rmod.render_image(scene, cam, **render_kwargs)
        images.append(img)
    return images
