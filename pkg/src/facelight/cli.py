"""Command-line entry point.

Subcommands: render, relight, fit, validate, metrics.  Exit codes: 0 on
success, 1 when a validation gate fails, 2 for usage or schema errors.
Thread use is capped via --threads (or the FACELIGHT_THREADS environment
variable); deterministic mode pins the resolved thread count so repeated
runs are bitwise identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import optim as omod
from . import render as rmod
from . import sceneio
from . import validate as vmod
from .imageio import read_pfm, read_png_linear, write_pfm, write_png
from .metrics import compute_metrics, sdf_probe_error
from .sh import SHLight, fit_light_from_equirect

DEFAULT_THREADS = 4


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("FACELIGHT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"FACELIGHT_THREADS must be an integer, got {env!r}")
    return min(DEFAULT_THREADS, os.cpu_count() or 1)


class UsageError(ValueError):
    pass


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="override the scene/config seed")
    p.add_argument("--deterministic", action="store_true",
                   help="pin threads and seeds for bitwise-reproducible output")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread cap (default: FACELIGHT_THREADS or 4)")


def _load_image_any(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png_linear(path)


def _select_cameras(doc: sceneio.SceneDocument, camera_arg: str, holdout: bool):
    cams = doc.scene.cameras
    if holdout:
        ids = doc.holdout_views
        if not ids:
            raise UsageError("--holdout given but the scene lists no holdout_views")
        return [(i, cams[i]) for i in ids]
    if camera_arg == "all":
        return list(enumerate(cams))
    try:
        idx = int(camera_arg)
    except ValueError:
        raise UsageError(f"--camera must be an index or 'all', got {camera_arg!r}")
    if not 0 <= idx < len(cams):
        raise UsageError(f"camera index {idx} out of range (scene has {len(cams)})")
    return [(idx, cams[idx])]


def _render_views(doc, pairs, out_dir: Path, label: str = "view"):
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {"trace_s": 0.0, "shade_s": 0.0, "integrate_s": 0.0}
    t0 = time.perf_counter()
    written = []
    for idx, cam in pairs:
        img, aux = rmod.render_image(doc.scene, cam)
        for k in timings:
            timings[k] += aux.timings[k]
        stem = out_dir / f"{label}_{idx:03d}"
        write_pfm(f"{stem}.pfm", img)
        write_png(f"{stem}.png", img)
        written.append(stem)
        if np.any(aux.reason == rmod.REASON_ITER_CAP):
            n_bad = int((aux.reason == rmod.REASON_ITER_CAP).sum())
            print(f"warning: {n_bad} rays hit the trace iteration cap in view {idx}",
                  file=sys.stderr)
    wall = time.perf_counter() - t0
    print(f"rendered {len(pairs)} view(s) in {wall:.2f}s "
          f"(trace {timings['trace_s']:.2f}s, shade {timings['shade_s']:.2f}s, "
          f"integrate {timings['integrate_s']:.2f}s)")
    return written


def cmd_render(args) -> int:
    doc = sceneio.load_scene(args.scene)
    if args.seed is not None:
        doc.scene.seed = args.seed
    pairs = _select_cameras(doc, args.camera, args.holdout)
    _render_views(doc, pairs, Path(args.out))
    return 0


def cmd_relight(args) -> int:
    doc = sceneio.load_scene(args.scene)
    light_path = Path(args.light)
    if light_path.suffix.lower() == ".pfm":
        envmap = read_pfm(light_path)
        light = fit_light_from_equirect(envmap, l_max=doc.scene.light.l_max,
                                        seed=args.seed or 0)
    else:
        light = SHLight.load(light_path)
    doc.scene.light = light
    pairs = _select_cameras(doc, args.camera, args.holdout)
    _render_views(doc, pairs, Path(args.out), label="relit")
    return 0


def cmd_fit(args) -> int:
    cfg_path = Path(args.config)
    try:
        raw = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise sceneio.SceneError(f"{cfg_path}: not valid JSON ({exc})")
    base = cfg_path.parent
    for key in ("scene", "dataset"):
        if key not in raw:
            raise sceneio.SceneError(f"fit config must reference a {key!r}")
    scene_doc = sceneio.load_scene(base / raw.pop("scene"))
    images, cameras, train_ids, holdout_ids = sceneio.load_dataset(
        base / raw.pop("dataset"))
    out_dir = Path(raw.pop("out_dir", args.out or "fit_out"))
    if not out_dir.is_absolute():
        out_dir = base / out_dir
    reference_scene = raw.pop("reference_scene", None)
    cfg = omod.FitConfig.from_json(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True

    if args.dry_run:
        trainable = omod.build_trainable_scene(
            scene_doc.scene, cfg.model, cfg.seed, n_images=len(images),
            calibration=cfg.calibration, group_lr=cfg.group_lr)
        print(f"config ok: {cfg.steps} steps, {cfg.batch_rays} rays/step, "
              f"{trainable.tape.n_params} learnable parameters")
        return 0

    result = omod.fit_scene(cfg, scene_doc.scene, images, cameras, train_ids,
                            holdout_ids, out_dir=out_dir,
                            resume=Path(args.resume) if args.resume else None)
    fitted_path = sceneio.export_fitted_scene(result.trainable, out_dir)
    report = {"psnr_holdout": result.psnr_holdout,
              "checkpoint": str(result.checkpoint_path),
              "fitted_scene": str(fitted_path)}
    if reference_scene is not None:
        ref_doc = sceneio.load_scene(base / reference_scene)
        frozen = result.trainable.frozen_scene()
        report["geom_err_mm"] = sdf_probe_error(
            frozen.geometry, lambda x: ref_doc.scene.geometry.sdf(x))
        report["albedo_mae"] = float(albedo_mae(frozen, ref_doc.scene))
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return 0


def albedo_mae(recovered_scene, reference_scene, n_points: int = 4096) -> float:
    """Mean absolute albedo error at reference surface points."""
    from . import rng as frng
    dirs = frng.fibonacci_sphere(n_points)
    bounds = reference_scene.geometry.bounds
    origins = bounds.center + dirs * (bounds.radius * 1.3)
    trace = rmod.sphere_trace(reference_scene.geometry, origins, -dirs)
    x = origins[trace.hit] + trace.t[trace.hit, None] * (-dirs[trace.hit])
    rec = recovered_scene.material.eval(x).albedo
    ref = reference_scene.material.eval(x).albedo
    return float(np.mean(np.abs(np.asarray(rec) - np.asarray(ref))))


def cmd_validate(args) -> int:
    rows, ok = vmod.run_suite(args.suite, seed=args.seed or 0)
    if args.out:
        vmod.write_csv(args.out, rows)
    n_fail = sum(1 for r in rows if not r["pass"])
    print(f"suite {args.suite}: {len(rows)} checks, {n_fail} failing")
    if not ok:
        for r in rows:
            if not r["pass"]:
                print(f"  FAIL {r['test']} [{r['parameter']}]: "
                      f"estimate {r['estimate']:.6g} vs reference "
                      f"{r['reference']:.6g}")
        return 1
    return 0


def cmd_metrics(args) -> int:
    a = _load_image_any(Path(args.image_a))
    b = _load_image_any(Path(args.image_b))
    report = compute_metrics(a, b)
    print(json.dumps(report.to_json(), indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_json(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facelight",
        description="Forward and inverse renderer for SH-lit low-rank "
                    "specular materials on signed-distance geometry.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render scene views to PNG + PFM")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", default="all", help="camera index or 'all'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--holdout", action="store_true",
                   help="render only the scene's holdout views")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("relight", help="swap the light and re-render")
    p.add_argument("--scene", required=True)
    p.add_argument("--light", required=True,
                   help="SH light JSON or equirectangular PFM environment map")
    p.add_argument("--camera", default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--holdout", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("fit", help="recover material/light/geometry from images")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config out_dir")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--dry-run", action="store_true",
                   help="validate the config and print the parameter count")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("validate", help="run an oracle validation suite")
    p.add_argument("--suite", required=True,
                   choices=sorted(vmod.SUITES) + ["all"])
    p.add_argument("--out", default=None, help="CSV output path")
    _add_common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--out", default=None, help="JSON output path")
    _add_common(p)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _resolve_threads(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (sceneio.SceneError, UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except omod.FitDiverged as exc:
        print(f"error: fit diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
