"""Forward rendering: cameras, aggressive sphere tracing, windowed volume
integration, and radiance composition.

Tracing runs on frozen field values (sample positions are constants of the
current step); gradients reach the geometry through the density and the
normals evaluated at those positions, which is where the volume formulation
puts them.  Shading is evaluated per window sample with per-sample normals.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dfield

import numpy as np

from . import autodiff as ad
from . import sh as shmod
from .geometry import SdfField, GeometryError
from .material import MaterialField, IntegratedBasis, specular_radiance
from .vec import check_unit, dot3, reflect

HIT_EPS_MM = 0.05        # sphere-trace surface threshold
STEP_FACTOR = 1.2        # aggressive step scale on the queried distance
MAX_TRACE_ITERS = 256
WINDOW_HALF_MM = 0.5
WINDOW_SAMPLES = 32
UNHIT_SAMPLES = 8        # sparse in-domain samples for rays with no surface hit
BACKFACE_EPS = 1e-6

# unhit reason codes
REASON_HIT = 0
REASON_MISS_BOUNDS = 1
REASON_EXITED = 2
REASON_BACKSPACE = 3
REASON_NEG_ENTRY = 4
REASON_ITER_CAP = 5


@dataclass
class CameraModel:
    """Pinhole camera; pose maps camera coordinates into the world.

    Camera axes: +x right, +y down (image rows), +z forward.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray   # (3, 3) world-from-camera
    position: np.ndarray   # (3,) camera center, mm

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (err {err:.2e})")

    @classmethod
    def look_at(cls, position, target, width, height, fov_deg: float,
                up=(0.0, 0.0, 1.0)) -> "CameraModel":
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - position
        forward = forward / np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        nr = np.linalg.norm(right)
        if nr < 1e-12:  # forward parallel to up; pick another up
            up = np.array([0.0, 1.0, 0.0])
            right = np.cross(forward, up)
            nr = np.linalg.norm(right)
        right /= nr
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=1)
        focal = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(width, height, focal, focal, width / 2.0, height / 2.0,
                   rot, position)

    def rays(self, pixels: np.ndarray | None = None):
        """Ray origins/directions for (col, row) pixel indices (default: all).

        Rays pass through pixel centers; directions are unit length.
        """
        if pixels is None:
            cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
            pixels = np.stack([cols.ravel(), rows.ravel()], axis=-1)
        pixels = np.asarray(pixels)
        u = (pixels[:, 0] + 0.5 - self.cx) / self.fx
        v = (pixels[:, 1] + 0.5 - self.cy) / self.fy
        d_cam = np.stack([u, v, np.ones_like(u)], axis=-1)
        d_world = d_cam @ self.rotation.T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.position, d_world.shape).copy()
        return origins, d_world

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height,
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": [list(map(float, r)) for r in self.rotation],
                "position": list(map(float, self.position))}

    @classmethod
    def from_json(cls, obj: dict) -> "CameraModel":
        return cls(int(obj["width"]), int(obj["height"]),
                   float(obj["fx"]), float(obj["fy"]),
                   float(obj["cx"]), float(obj["cy"]),
                   np.asarray(obj["rotation"]), np.asarray(obj["position"]))


# ---------------------------------------------------------------------------
# sphere tracing
# ---------------------------------------------------------------------------

@dataclass
class TraceResult:
    hit: np.ndarray        # (N,) bool
    t: np.ndarray          # (N,) hit parameter (mm); undefined where unhit
    reason: np.ndarray     # (N,) reason codes
    iterations: np.ndarray # (N,) advance iterations used
    t_enter: np.ndarray
    t_exit: np.ndarray


def sphere_trace(field: SdfField, origins: np.ndarray, dirs: np.ndarray,
                 max_iters: int = MAX_TRACE_ITERS) -> TraceResult:
    """Aggressive sphere tracing against the truncated field.

    The march advances monotonically by ``1.2 * truncated sdf`` (scaled by
    the prior's conservative step factor) while outside the surface.  A step
    that lands beyond ``-0.05 mm`` brackets the crossing and bisects inside
    the bracket until the ``|sdf| < 0.05 mm`` hit criterion holds.  Rays are
    declared unhit when they miss the bounding sphere, exit it, enter it (or
    cross) in negative back-space, or exhaust the iteration budget.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    frozen = field.frozen_view()

    def sdf_eval(x):
        return ad.value_of(frozen.sdf_truncated(x))

    t_enter, t_exit, in_bounds = field.bounds.ray_range(origins, dirs)
    reason = np.full(n, REASON_MISS_BOUNDS, dtype=np.int32)
    t = t_enter.copy()
    iterations = np.zeros(n, dtype=np.int32)
    hit_t = np.zeros(n)
    active = in_bounds.copy()
    reason[active] = REASON_ITER_CAP  # provisional until resolved

    # bracket state for overshoots
    br_lo = np.zeros(n)
    br_hi = np.zeros(n)
    needs_bisect = np.zeros(n, dtype=bool)

    step_scale = STEP_FACTOR * field.prior.step_scale
    prev_t = t.copy()

    for it in range(max_iters):
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        x = origins[idx] + t[idx, None] * dirs[idx]
        s = sdf_eval(x)
        iterations[idx] += 1

        neg = s < -HIT_EPS_MM
        if np.any(neg):
            xi = x[neg]
            back = field.prior.in_backspace(xi)
            jneg = idx[neg]
            # entering negative back-space means no surface along this ray
            jback = jneg[back]
            reason[jback] = REASON_BACKSPACE
            active[jback] = False
            # first query already inside (not back-space): negative entry
            first = iterations[jneg] == 1
            jfirst = jneg[first & ~back]
            reason[jfirst] = REASON_NEG_ENTRY
            active[jfirst] = False
            # otherwise bracket [prev_t, t] and refine by bisection
            jbr = jneg[~back & ~first]
            needs_bisect[jbr] = True
            br_lo[jbr] = prev_t[jbr]
            br_hi[jbr] = t[jbr]
            active[jbr] = False

        close = np.abs(s) <= HIT_EPS_MM
        jhit = idx[close & ~neg]
        reason[jhit] = REASON_HIT
        hit_t[jhit] = t[jhit]
        active[jhit] = False

        step_mask = active[idx]
        jstep = idx[step_mask]
        prev_t[jstep] = t[jstep]
        t[jstep] += step_scale * s[step_mask]
        exited = t[jstep] > t_exit[jstep]
        jexit = jstep[exited]
        reason[jexit] = REASON_EXITED
        active[jexit] = False

    # bisection refinement on bracketed crossings
    if np.any(needs_bisect):
        jb = np.nonzero(needs_bisect)[0]
        lo = br_lo[jb].copy()
        hi = br_hi[jb].copy()
        done = np.zeros(len(jb), dtype=bool)
        tmid = 0.5 * (lo + hi)
        for _ in range(80):
            if np.all(done):
                break
            mid = 0.5 * (lo + hi)
            x = origins[jb] + mid[:, None] * dirs[jb]
            s = sdf_eval(x)
            newly = (np.abs(s) <= HIT_EPS_MM) & ~done
            tmid[newly] = mid[newly]
            done |= newly
            go_lo = (s > 0) & ~done
            lo[go_lo] = mid[go_lo]
            hi[(~go_lo) & ~done] = mid[(~go_lo) & ~done]
        reason[jb[done]] = REASON_HIT
        hit_t[jb[done]] = tmid[done]
        reason[jb[~done]] = REASON_ITER_CAP

    hit = reason == REASON_HIT
    return TraceResult(hit, hit_t, reason, iterations, t_enter, t_exit)


def sample_window(t0: np.ndarray, n_samples: int = WINDOW_SAMPLES,
                  half_width: float = WINDOW_HALF_MM) -> np.ndarray:
    """Uniform samples on [t0 - 0.5 mm, t0 + 0.5 mm], endpoints included."""
    t0 = np.atleast_1d(np.asarray(t0, dtype=np.float64))
    offsets = np.linspace(-half_width, half_width, n_samples)
    return t0[:, None] + offsets[None, :]


def laplace_density(sdf_value, beta):
    """sigma = Psi_beta(-sdf) / beta with the zero-mean Laplace CDF Psi.

    Continuous through sdf = 0 (both branches give 1/(2 beta)); evaluated via
    exp(-|s|/beta) so large magnitudes cannot overflow.
    """
    bv = ad.value_of(beta)
    if np.any(bv <= 0.0):
        raise ValueError("beta must be positive")
    e = ad.exp(-ad.absolute(sdf_value) / beta)
    pos = ad.value_of(sdf_value) >= 0.0
    return ad.where(pos, 0.5 * e, 1.0 - 0.5 * e) / beta


def volume_integrate(ts: np.ndarray, sigma, radiance):
    """Discrete transparency-weighted quadrature along each ray.

    Per uniform-spacing interval, occupancy alpha_i = 1 - exp(-sigma_i dt)
    composes with the cumulative transparency T_i = exp(-sum_{j<i} sigma_j dt),
    so the weights w_i = alpha_i T_i telescope to 1 - exp(-tau_total) and can
    never exceed one.

    Returns (rgb (N, 3), weights (N, S)).
    """
    ts = np.asarray(ts, dtype=np.float64)
    if ts.shape[1] < 2:
        raise ValueError("need at least two samples per ray")
    dt = (ts[:, 1] - ts[:, 0])[:, None]
    tau = sigma * dt
    cum = ad.cumsum(tau, axis=-1)
    t_excl = ad.exp(-(cum - tau))
    alpha = 1.0 - ad.exp(-tau)
    w = alpha * t_excl
    n, s = ts.shape
    rgb = (ad.reshape(w, (n, s, 1)) * radiance).sum(axis=1)
    return rgb, w


# ---------------------------------------------------------------------------
# shading
# ---------------------------------------------------------------------------

def shade(x: np.ndarray, omega_o, geometry: SdfField, field: MaterialField,
          basis: IntegratedBasis, light: shmod.SHLight, *,
          light_coeffs=None, normals=None, grads=None, split: bool = False):
    """Radiance leaving x toward omega_o: Lambertian term plus the low-rank
    prefiltered specular term.

    omega_o points from the surface toward the camera.  Back-facing points
    (omega_o . n <= 0) contribute no specular.  With `split=True` returns
    (rgb, diffuse, specular).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    single = ad.value_of(omega_o).ndim == 1
    wo = ad.reshape(omega_o, (1, 3)) if single else omega_o
    if normals is None:
        if grads is None:
            grads = geometry.grad(x)
        gn = ad.sqrt((grads * grads).sum(axis=-1, keepdims=True)) \
            if ad.is_tensor(grads) else np.linalg.norm(grads, axis=-1, keepdims=True)
        normals = grads / ad.clamp_min(gn, 1e-8) if ad.is_tensor(grads) \
            else grads / np.maximum(gn, 1e-8)

    m = field.eval(x)
    irradiance = shmod.diffuse_irradiance(light, normals, coeffs=light_coeffs)
    diffuse = m.albedo / math.pi * irradiance

    mu = dot3(wo, normals)
    front = ad.value_of(mu) > BACKFACE_EPS
    mu_safe = ad.clamp(mu, BACKFACE_EPS, 1.0)
    w_r = reflect(wo, normals)
    basis_out = basis.eval_mu(wo, normals, mu_safe)
    prefiltered = shmod.prefiltered_specular_batch(light, w_r, m.kappa,
                                                   coeffs=light_coeffs)
    spec = specular_radiance(m, basis_out, prefiltered) * front
    rgb = diffuse + spec
    if single and not ad.is_tensor(rgb):
        rgb, diffuse, spec = rgb[0], diffuse[0], spec[0]
    if split:
        return rgb, diffuse, spec
    return rgb


# ---------------------------------------------------------------------------
# scene bundle and the ray/image loops
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    """Everything the renderer needs, already constructed."""

    geometry: SdfField
    material: MaterialField
    basis: IntegratedBasis
    light: shmod.SHLight
    beta: float = 0.1
    cameras: list = dfield(default_factory=list)
    seed: int = 0
    # optional learnable overrides (Tensors) used during fitting
    light_coeffs: object = None
    beta_param: object = None

    def beta_value(self):
        return self.beta_param if self.beta_param is not None else self.beta


@dataclass
class RenderAux:
    hit: np.ndarray
    reason: np.ndarray
    iterations: np.ndarray
    weight_sum: np.ndarray
    timings: dict


def render_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray, *,
                n_window: int = WINDOW_SAMPLES, shade_weight_eps: float = 0.0,
                collect_spec: bool = False, trace: TraceResult | None = None):
    """Trace, window-sample, shade and integrate a batch of rays.

    shade_weight_eps > 0 skips shading of samples whose volume weight is
    below the threshold (their radiance is exactly the fill value zero);
    densities and weights are still computed everywhere, so the quadrature
    and its gradients are unaffected up to the dropped radiance mass.

    Sample positions are constants of the current parameter values: pass a
    precomputed `trace` to hold them fixed (e.g. for derivative checks).

    Returns (rgb, spec, aux); `spec` is the volume-integrated specular-only
    component (None unless collect_spec).
    """
    t0 = time.perf_counter()
    geometry = scene.geometry
    if trace is None:
        trace = sphere_trace(geometry, origins, dirs)
    t1 = time.perf_counter()

    n = origins.shape[0]
    rgb_parts = []
    spec_parts = []
    weight_sum = np.zeros(n)
    row_idx = []

    groups = []
    hit_idx = np.nonzero(trace.hit)[0]
    if hit_idx.size:
        ts_hit = sample_window(trace.t[hit_idx], n_window)
        groups.append((hit_idx, ts_hit))
    unhit_idx = np.nonzero(np.isin(trace.reason, (REASON_EXITED, REASON_ITER_CAP)))[0]
    if unhit_idx.size:
        lo = trace.t_enter[unhit_idx]
        hi = trace.t_exit[unhit_idx]
        frac = np.linspace(0.0, 1.0, UNHIT_SAMPLES)
        ts_un = lo[:, None] + (hi - lo)[:, None] * frac[None, :]
        groups.append((unhit_idx, ts_un))

    shade_s = 0.0
    integrate_s = 0.0
    for idx, ts in groups:
        nb, ns = ts.shape
        x = (origins[idx, None, :] + ts[..., None] * dirs[idx, None, :])
        x_flat = x.reshape(-1, 3)
        ta = time.perf_counter()
        sdf, grads = geometry.sdf_and_grad(x_flat)
        sigma = laplace_density(sdf, scene.beta_value())
        sigma = ad.reshape(sigma, (nb, ns))

        # choose which samples are worth shading
        if shade_weight_eps > 0.0:
            sig_np = ad.value_of(sigma)
            dt = ts[0, 1] - ts[0, 0]
            tau = sig_np * dt
            t_excl = np.exp(-(np.cumsum(tau, axis=-1) - tau))
            w_np = (1.0 - np.exp(-tau)) * t_excl
            sel = w_np.ravel() > shade_weight_eps
        else:
            sel = np.ones(nb * ns, dtype=bool)

        if np.any(sel):
            sel_idx = np.nonzero(sel)[0]
            g_sel = grads[sel_idx]
            wo = np.repeat(-dirs[idx], ns, axis=0)[sel_idx]
            rgb_sel, _, spec_sel = shade(
                x_flat[sel_idx], wo, geometry, scene.material, scene.basis,
                scene.light, light_coeffs=scene.light_coeffs, grads=g_sel,
                split=True)
            radiance = ad.scatter(rgb_sel, (sel_idx,), (nb * ns, 3))
            spec_rad = ad.scatter(spec_sel, (sel_idx,), (nb * ns, 3)) \
                if collect_spec else None
        else:
            radiance = np.zeros((nb * ns, 3))
            spec_rad = np.zeros((nb * ns, 3)) if collect_spec else None
        tb = time.perf_counter()
        shade_s += tb - ta

        radiance = ad.reshape(radiance, (nb, ns, 3))
        rgb, w = volume_integrate(ts, sigma, radiance)
        rgb_parts.append(rgb)
        row_idx.append(idx)
        weight_sum[idx] = ad.value_of(w).sum(axis=-1)
        if collect_spec:
            spec_rad = ad.reshape(spec_rad, (nb, ns, 3))
            spec_px, _ = volume_integrate(ts, sigma, spec_rad)
            spec_parts.append(spec_px)
        integrate_s += time.perf_counter() - tb

    # assemble the full batch (background stays black)
    if rgb_parts:
        all_idx = np.concatenate(row_idx)
        rgb_all = ad.concatenate(rgb_parts, axis=0) if len(rgb_parts) > 1 else rgb_parts[0]
        rgb_out = ad.scatter(rgb_all, (all_idx,), (n, 3))
        spec_out = None
        if collect_spec:
            spec_all = ad.concatenate(spec_parts, axis=0) if len(spec_parts) > 1 else spec_parts[0]
            spec_out = ad.scatter(spec_all, (all_idx,), (n, 3))
    else:
        rgb_out = np.zeros((n, 3))
        spec_out = np.zeros((n, 3)) if collect_spec else None

    aux = RenderAux(trace.hit, trace.reason, trace.iterations, weight_sum,
                    {"trace_s": t1 - t0, "shade_s": shade_s,
                     "integrate_s": integrate_s})
    return rgb_out, spec_out, aux


def render_image(scene: Scene, camera: CameraModel, *,
                 n_window: int = WINDOW_SAMPLES, chunk: int = 16384,
                 shade_weight_eps: float = 0.0):
    """Full-frame render; returns (image (H, W, 3) linear RGB, aux)."""
    origins, dirs = camera.rays()
    n = origins.shape[0]
    out = np.zeros((n, 3))
    hit = np.zeros(n, dtype=bool)
    reason = np.zeros(n, dtype=np.int32)
    iters = np.zeros(n, dtype=np.int32)
    wsum = np.zeros(n)
    timings = {"trace_s": 0.0, "shade_s": 0.0, "integrate_s": 0.0}
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        rgb, _, aux = render_rays(scene, origins[sl], dirs[sl],
                                  n_window=n_window,
                                  shade_weight_eps=shade_weight_eps)
        out[sl] = ad.value_of(rgb)
        hit[sl] = aux.hit
        reason[sl] = aux.reason
        iters[sl] = aux.iterations
        wsum[sl] = aux.weight_sum
        for k in timings:
            timings[k] += aux.timings[k]
    image = out.reshape(camera.height, camera.width, 3)
    aux = RenderAux(hit.reshape(camera.height, camera.width),
                    reason.reshape(camera.height, camera.width),
                    iters.reshape(camera.height, camera.width),
                    wsum.reshape(camera.height, camera.width), timings)
    return image, aux
