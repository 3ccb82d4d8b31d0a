"""Training machinery: the compound loss, Adam with the halving schedule,
photometric calibration, and the end-to-end fitting loop.

The learnable state lives on a ParamTape (flat parameter/gradient vectors
with per-group learning-rate multipliers): SH light coefficients, the
spatial material network, the displacement network, the density scale beta,
and optional per-image calibration embeddings.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field as dfield
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import render as rmod
from . import rng as frng
from . import sh as shmod
from .autodiff import ParamTape, GradientError
from .geometry import NetDisplacement, SdfField
from .material import NetworkMaterialField
from .nets import MLP, MLPSpec

WHITE_LOSS_DIRS = 512     # fixed sphere quadrature for the light chroma loss
EIKONAL_SAMPLES = 1024    # fresh in-domain samples per step


class FitDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    rgb: float = 1.0
    white: float = 5e-3
    spec: float = 8e-3
    eikonal: float = 1e-1
    residual: float = 1e-3

    @classmethod
    def from_json(cls, obj: dict) -> "LossWeights":
        return cls(**obj)


@dataclass
class LossBreakdown:
    rgb: float
    white: float
    spec: float
    eikonal: float
    residual: float
    total: float
    node: object = None  # scalar Tensor for backward

    def as_row(self):
        return [self.rgb, self.white, self.spec, self.eikonal, self.residual,
                self.total]


def _white_basis(l_max: int) -> np.ndarray:
    dirs = frng.fibonacci_sphere(WHITE_LOSS_DIRS)
    return shmod.eval_sh_basis(dirs, l_max)


def loss_total(rendered, observed, light_coeffs, l_max: int, spec_pixels,
               grad_norms, disp_values, weights: LossWeights) -> LossBreakdown:
    """Compound training loss.

    rgb: mean absolute error between (calibrated) renders and observations;
    white: mean absolute chroma deviation of the light evaluated on a fixed
    512-direction sphere quadrature; spec: mean integrated specular radiance;
    eikonal: mean |  ||grad sdf|| - 1 |; residual: mean |displacement|.
    """
    obs = np.asarray(observed, dtype=np.float64)
    if ad.value_of(rendered).shape != obs.shape:
        raise ValueError("rendered/observed shape mismatch")
    rgb = ad.absolute(rendered - obs).mean()

    basis = _white_basis(l_max)
    li = ad.matmul(basis, ad.transpose(light_coeffs))   # (D, 3)
    li_bar = li.mean(axis=-1, keepdims=True)
    white = ad.absolute(li - li_bar).mean()

    spec = spec_pixels.mean() if ad.is_tensor(spec_pixels) \
        else np.mean(ad.value_of(spec_pixels))
    eikonal = ad.absolute(grad_norms - 1.0).mean()
    residual = ad.absolute(disp_values).mean()

    node = (weights.rgb * rgb + weights.white * white + weights.spec * spec
            + weights.eikonal * eikonal + weights.residual * residual)
    return LossBreakdown(float(ad.value_of(rgb)), float(ad.value_of(white)),
                         float(ad.value_of(spec)), float(ad.value_of(eikonal)),
                         float(ad.value_of(residual)), float(ad.value_of(node)),
                         node)


def backward(tape: ParamTape, loss_node) -> np.ndarray:
    """Reverse pass over the recorded graph; returns the flat gradient."""
    return tape.backward(loss_node)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class LrSchedule:
    """Base rate halves every `halve_every` steps; halvings stop at 75% of
    the configured run (lr after k halvings is exactly base * 2^-k)."""

    base_lr: float
    total_steps: int
    n_halvings: int = 12
    halve_every: int | None = None

    def __post_init__(self):
        if self.halve_every is None:
            self.halve_every = max(1, int(0.75 * self.total_steps / self.n_halvings)) \
                if self.n_halvings > 0 else self.total_steps + 1

    def max_halvings(self) -> int:
        return int((0.75 * self.total_steps) // self.halve_every)

    def lr_at(self, step: int) -> float:
        k = min(step // self.halve_every, self.max_halvings())
        return self.base_lr * 2.0 ** (-k)


class AdamState:
    def __init__(self, tape: ParamTape):
        self.m = {name: np.zeros_like(p.value) for name, p in tape.params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in tape.params.items()}
        self.step = 0

    def state_arrays(self) -> dict:
        out = {"step": np.array([self.step])}
        for name in self.m:
            out[f"m::{name}"] = self.m[name]
            out[f"v::{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, tape: ParamTape, arrays: dict) -> "AdamState":
        state = cls(tape)
        state.step = int(np.asarray(arrays["step"]).ravel()[0])
        for name in state.m:
            state.m[name] = np.asarray(arrays[f"m::{name}"], dtype=np.float64).copy()
            state.v[name] = np.asarray(arrays[f"v::{name}"], dtype=np.float64).copy()
        return state


def adam_step(tape: ParamTape, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update honoring per-group multipliers."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in tape.params.items():
        g = p.grad
        if g is None:
            continue
        g = np.asarray(g)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mult = tape.multipliers.get(tape.groups[name], 1.0)
        p.value = p.value - (lr * mult) * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# photometric calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibrationMap:
    """Per-image linear RGB map."""

    matrix: np.ndarray
    ridged: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (3, 3):
            raise ValueError("calibration matrix must be 3x3")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("calibration matrix must be finite")

    @classmethod
    def identity(cls) -> "CalibrationMap":
        return cls(np.eye(3))

    def apply(self, rgb):
        return calibrate_apply(self, rgb)


def calibrate_apply(cal: CalibrationMap, rgb):
    """Per-pixel matrix-vector product (rows of rgb are pixels)."""
    return ad.matmul(rgb, ad.transpose(cal.matrix)) if ad.is_tensor(rgb) \
        else np.asarray(rgb) @ cal.matrix.T


def calibrate_solve(rendered: np.ndarray, observed: np.ndarray,
                    ridge: float = 1e-8) -> CalibrationMap:
    """Least-squares 3x3 map A minimizing ||A r - o||^2 over pixels.

    Falls back to a ridge-regularized solve (and flags it) when the pixel
    Gram matrix is rank-deficient, e.g. grayscale-only content.
    """
    r = np.asarray(rendered, dtype=np.float64).reshape(-1, 3)
    o = np.asarray(observed, dtype=np.float64).reshape(-1, 3)
    if r.shape[0] < 3:
        raise ValueError("need at least 3 pixels")
    gram = r.T @ r
    rhs = r.T @ o
    ridged = np.linalg.matrix_rank(gram, tol=1e-10 * max(np.trace(gram), 1e-30)) < 3
    if ridged:
        gram = gram + ridge * np.eye(3)
    at = np.linalg.solve(gram, rhs)
    return CalibrationMap(at.T, ridged=ridged)


class CalibrationModel:
    """Per-image 3x3 maps from a small network on learnable embeddings.

    Initialization is exactly the identity map for every image (zeroed head
    plus identity bias), so enabling calibration never perturbs the start.
    """

    EMBED_DIM = 8

    def __init__(self, embeddings, mlp: MLP, n_images: int):
        self.embeddings = embeddings
        self.mlp = mlp
        self.n_images = n_images

    @classmethod
    def create(cls, tape: ParamTape, n_images: int, gen,
               hidden=(32, 32), group: str = "calibration"):
        emb = tape.add("calibration.embed",
                       0.01 * gen.standard_normal((n_images, cls.EMBED_DIM)),
                       group=group)
        spec = MLPSpec(in_dim=cls.EMBED_DIM, hidden=list(hidden), out_dim=9,
                       activation="tanh", final_zero=True,
                       final_bias=[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        mlp = MLP.create(tape, "calibration.net", spec, gen, group=group)
        return cls(emb, mlp, n_images)

    def matrices(self, image_idx: np.ndarray):
        """(N, 9) calibration entries for the given image indices."""
        emb = self.embeddings[image_idx]
        return self.mlp.forward(emb)

    def apply(self, image_idx: np.ndarray, rgb):
        flat = self.matrices(image_idx)           # (N, 9)
        out = []
        for c in range(3):
            row = flat[:, 3 * c:3 * c + 3]
            out.append((row * rgb).sum(axis=-1))
        return ad.stack(out, axis=-1)


# ---------------------------------------------------------------------------
# trainable scene assembly
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    k: int = 2
    material_hidden: tuple = (64, 64)
    displacement_hidden: tuple = (48, 48)
    pe_bands: int = 6
    init_rho: float = 0.05
    init_kappa: float = 64.0
    init_coeff: float = 0.5
    material_w0: float = 30.0
    basis: str = "scene"            # "scene": keep the scene's (known) basis
    basis_hidden: tuple = (128, 128, 128)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        for key in ("material_hidden", "displacement_hidden", "basis_hidden"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


@dataclass
class TrainableScene:
    scene: rmod.Scene
    tape: ParamTape
    light_coeffs: object
    beta_raw: object
    material: NetworkMaterialField
    displacement: NetDisplacement
    calibration: CalibrationModel | None = None

    def frozen_scene(self) -> rmod.Scene:
        """Plain-numpy snapshot for evaluation renders."""
        from .material import BasisNetwork
        frozen_geom = self.scene.geometry.frozen_view()
        mat = NetworkMaterialField(
            MLP(self.material.mlp.spec,
                [ad.value_of(w) for w in self.material.mlp.weights],
                [ad.value_of(b) for b in self.material.mlp.biases]),
            self.material.bounds, self.material.k)
        basis = self.scene.basis
        if isinstance(basis, BasisNetwork):
            basis = BasisNetwork(
                MLP(basis.mlp.spec,
                    [ad.value_of(w) for w in basis.mlp.weights],
                    [ad.value_of(b) for b in basis.mlp.biases]), basis.k)
        light = shmod.SHLight(self.scene.light.l_max,
                              ad.value_of(self.light_coeffs).copy())
        return rmod.Scene(frozen_geom, mat, basis, light,
                          beta=float(self.current_beta()),
                          cameras=self.scene.cameras, seed=self.scene.seed)

    def current_beta(self):
        return ad.value_of(_beta_from_raw(self.beta_raw)).ravel()[0]


def _beta_from_raw(raw):
    # softplus keeps the learnable density scale positive
    return ad.softplus(raw) + 1e-5


def _beta_raw_init(beta: float) -> float:
    return math.log(math.expm1(max(beta - 1e-5, 1e-6)))


def build_trainable_scene(base: rmod.Scene, model_cfg: ModelConfig, seed: int,
                          n_images: int, calibration: str = "none",
                          group_lr: dict | None = None) -> TrainableScene:
    """Wrap a scene's geometry prior/basis with learnable light, material,
    displacement, beta, and optional calibration, all on a fresh tape."""
    tape = ParamTape()
    gen = frng.generator(seed, frng.STREAM_INIT)

    light_coeffs = tape.add("light.coeffs", base.light.coeffs.copy(), group="light")
    material = NetworkMaterialField.create(
        tape, "material", base.geometry.bounds, gen,
        hidden=model_cfg.material_hidden, k=model_cfg.k, w0=model_cfg.material_w0,
        init_rho=model_cfg.init_rho, init_kappa=model_cfg.init_kappa,
        init_coeff=model_cfg.init_coeff)
    displacement = NetDisplacement.create(
        tape, "displacement", base.geometry.bounds, gen,
        hidden=model_cfg.displacement_hidden, bands=model_cfg.pe_bands)
    beta_raw = tape.add("beta.raw", np.array([_beta_raw_init(base.beta)]),
                        group="density")

    basis = base.basis
    if model_cfg.basis == "network":
        from .material import BasisNetwork
        basis = BasisNetwork.create(tape, "basis", gen,
                                    hidden=model_cfg.basis_hidden, k=model_cfg.k)
    elif model_cfg.basis != "scene":
        raise ValueError(f"unknown basis mode {model_cfg.basis!r}")
    if basis.k != model_cfg.k:
        raise ValueError(f"basis rank {basis.k} does not match model k={model_cfg.k}")

    geometry = SdfField(base.geometry.prior, displacement, base.geometry.bounds)
    scene = rmod.Scene(geometry, material, basis, base.light,
                       beta=base.beta, cameras=base.cameras, seed=seed,
                       light_coeffs=light_coeffs,
                       beta_param=_beta_from_raw(beta_raw))
    cal = None
    if calibration == "network":
        cal = CalibrationModel.create(tape, n_images, gen)
    elif calibration != "none":
        raise ValueError(f"unknown calibration mode {calibration!r}")

    for grp, mult in (group_lr or {}).items():
        tape.set_multiplier(grp, mult)
    return TrainableScene(scene, tape, light_coeffs, beta_raw, material,
                          displacement, cal)


# ---------------------------------------------------------------------------
# the fitting loop
# ---------------------------------------------------------------------------

@dataclass
class FitConfig:
    steps: int = 2000
    batch_rays: int = 2048
    lr: float = 1e-4
    weights: LossWeights = dfield(default_factory=LossWeights)
    n_halvings: int = 12
    seed: int = 0
    deterministic: bool = True
    calibration: str = "none"
    model: ModelConfig = dfield(default_factory=ModelConfig)
    group_lr: dict = dfield(default_factory=dict)
    eval_every: int = 500
    log_every: int = 25
    shade_weight_eps: float = 1e-5
    n_window: int = rmod.WINDOW_SAMPLES
    eikonal_samples: int = EIKONAL_SAMPLES
    checkpoint_every: int = 0  # 0: only at the end

    @classmethod
    def from_json(cls, obj: dict) -> "FitConfig":
        obj = dict(obj)
        if "lambda" in obj:
            obj["weights"] = LossWeights.from_json(obj.pop("lambda"))
        if "model" in obj:
            obj["model"] = ModelConfig.from_json(obj["model"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class FitResult:
    trainable: TrainableScene
    history: list
    psnr_holdout: float
    checkpoint_path: Path | None


def _draw_ray_batch(gen, images, cameras, view_ids, batch: int):
    """Random (view, pixel) pairs; returns origins, dirs, observed rgb, view idx."""
    views = gen.integers(0, len(view_ids), size=batch)
    h, w = images[view_ids[0]].shape[:2]
    rows = gen.integers(0, h, size=batch)
    cols = gen.integers(0, w, size=batch)
    origins = np.empty((batch, 3))
    dirs = np.empty((batch, 3))
    obs = np.empty((batch, 3))
    for i_local, vid in enumerate(view_ids):
        mask = views == i_local
        if not np.any(mask):
            continue
        pix = np.stack([cols[mask], rows[mask]], axis=-1)
        o, d = cameras[vid].rays(pix)
        origins[mask] = o
        dirs[mask] = d
        obs[mask] = images[vid][rows[mask], cols[mask]]
    return origins, dirs, obs, views


def holdout_psnr(trainable: TrainableScene, images, cameras, holdout_ids,
                 n_window: int) -> float:
    from .metrics import psnr
    scene = trainable.frozen_scene()
    vals = []
    for vid in holdout_ids:
        img, _ = rmod.render_image(scene, cameras[vid], n_window=n_window)
        vals.append(psnr(img, images[vid]))
    return float(np.mean(vals))


def save_checkpoint(path: Path, trainable: TrainableScene, adam: AdamState,
                    cfg: FitConfig, step: int, arrays: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = arrays if arrays is not None else trainable.tape.state_arrays()
    blob = {f"param::{k}": v for k, v in arrays.items()}
    blob.update({f"adam::{k}": v for k, v in adam.state_arrays().items()})
    np.savez(path, **blob)
    sidecar = {"version": 1, "step": step,
               "groups": trainable.tape.groups,
               "beta": trainable.current_beta(),
               "l_max": trainable.scene.light.l_max,
               "material_spec": trainable.material.mlp.spec.to_json(),
               "displacement_spec": trainable.displacement.mlp.spec.to_json()}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_checkpoint(path: Path, trainable: TrainableScene) -> AdamState:
    data = np.load(path)
    params = {k[len("param::"):]: data[k] for k in data.files
              if k.startswith("param::")}
    trainable.tape.load_state_arrays(params)
    adam_arrays = {k[len("adam::"):]: data[k] for k in data.files
                   if k.startswith("adam::")}
    return AdamState.from_arrays(trainable.tape, adam_arrays)


def fit_scene(cfg: FitConfig, base_scene: rmod.Scene, images, cameras,
              train_ids, holdout_ids, out_dir: Path | None = None,
              resume: Path | None = None) -> FitResult:
    """Gradient-descent recovery of material, light, geometry and beta.

    Per step: sample `batch_rays` random rays across the training views,
    render them differentiably, assemble the compound loss, backpropagate and
    take one Adam step.  Emits a CSV history and checkpoints; a non-finite
    loss aborts with the last good checkpoint.
    """
    trainable = build_trainable_scene(base_scene, cfg.model, cfg.seed,
                                      n_images=len(images),
                                      calibration=cfg.calibration,
                                      group_lr=cfg.group_lr)
    tape = trainable.tape
    adam = AdamState(tape)
    if resume is not None:
        adam = load_checkpoint(resume, trainable)
    schedule = LrSchedule(cfg.lr, cfg.steps, n_halvings=cfg.n_halvings)
    out_dir = Path(out_dir) if out_dir is not None else None
    history = []
    last_good = tape.state_arrays()
    last_good_step = adam.step
    t_start = time.perf_counter()

    start_step = adam.step
    for step in range(start_step, cfg.steps):
        gen = frng.generator(cfg.seed, (frng.STREAM_RAYS << 32) + step)
        origins, dirs, obs, views = _draw_ray_batch(gen, images, cameras,
                                                    train_ids, cfg.batch_rays)
        # learnable beta enters the graph fresh each step
        trainable.scene.beta_param = _beta_from_raw(trainable.beta_raw)
        rgb, spec_px, _ = rmod.render_rays(
            trainable.scene, origins, dirs, n_window=cfg.n_window,
            shade_weight_eps=cfg.shade_weight_eps, collect_spec=True)
        if trainable.calibration is not None:
            img_idx = np.asarray([train_ids[v] for v in views])
            rgb = trainable.calibration.apply(img_idx, rgb)

        egen = frng.generator(cfg.seed, (frng.STREAM_EIKONAL << 32) + step)
        pts = frng.uniform_ball(egen, trainable.scene.geometry.bounds.center,
                                trainable.scene.geometry.bounds.radius,
                                cfg.eikonal_samples)
        disp, dgrad = trainable.displacement.eval_and_grad(pts)
        total_grad = trainable.scene.geometry.prior.grad(pts) + dgrad
        grad_norms = ad.sqrt((total_grad * total_grad).sum(axis=-1))

        loss = loss_total(rgb, obs, trainable.light_coeffs,
                          trainable.scene.light.l_max, spec_px, grad_norms,
                          disp, cfg.weights)
        if not math.isfinite(loss.total):
            ckpt = None
            if out_dir is not None:
                ckpt = out_dir / "checkpoint_last_good.npz"
                save_checkpoint(ckpt, trainable, adam, cfg, last_good_step,
                                arrays=last_good)
            raise FitDiverged(f"non-finite loss at step {step}", checkpoint=ckpt)
        try:
            tape.backward(loss.node)
        except GradientError as exc:
            ckpt = None
            if out_dir is not None:
                ckpt = out_dir / "checkpoint_last_good.npz"
                save_checkpoint(ckpt, trainable, adam, cfg, last_good_step,
                                arrays=last_good)
            raise FitDiverged(str(exc), checkpoint=ckpt)
        lr = schedule.lr_at(step)
        adam_step(tape, adam, lr)
        last_good = tape.state_arrays()
        last_good_step = adam.step

        entry = {"step": step, "lr": lr, "loss": loss, "psnr": None}
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and holdout_ids:
            entry["psnr"] = holdout_psnr(trainable, images, cameras,
                                         holdout_ids, cfg.n_window)
        if (cfg.log_every and step % cfg.log_every == 0) or entry["psnr"] is not None:
            history.append(entry)
        if (cfg.checkpoint_every and out_dir is not None
                and (step + 1) % cfg.checkpoint_every == 0):
            save_checkpoint(out_dir / f"checkpoint_{step + 1:06d}.npz",
                            trainable, adam, cfg, adam.step)

    final_psnr = (holdout_psnr(trainable, images, cameras, holdout_ids,
                               cfg.n_window) if holdout_ids else float("nan"))
    history.append({"step": cfg.steps, "lr": schedule.lr_at(cfg.steps - 1),
                    "loss": None, "psnr": final_psnr,
                    "wall_s": time.perf_counter() - t_start})
    ckpt_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint_final.npz"
        save_checkpoint(ckpt_path, trainable, adam, cfg, adam.step)
        write_history_csv(out_dir / "metrics.csv", history)
    return FitResult(trainable, history, final_psnr, ckpt_path)


def write_history_csv(path: Path, history):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "rgb", "white", "spec", "eikonal", "residual",
                     "total", "psnr_holdout", "lr"])
        for e in history:
            loss = e.get("loss")
            row = [e["step"]]
            row += loss.as_row() if loss is not None else [""] * 6
            row += [e["psnr"] if e.get("psnr") is not None else "", e["lr"]]
            wr.writerow(row)
