"""Scene documents: strict JSON schema, weight blobs, and datasets.

A scene file is a versioned JSON document describing geometry (prior +
displacement), material field, integrated basis, SH light, density scale,
cameras, and seeds.  Unknown keys are rejected so typos fail loudly before
any compute runs.  Network-backed fields reference a binary weight blob
(npz keyed by parameter name) sitting next to the scene file, with the
architecture spec inline in the JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import oracle
from . import render as rmod
from .geometry import (BoundingSphere, ConstantDisplacement, NetDisplacement,
                       SdfField, prior_from_json)
from .material import (BasisNetwork, BasisTable, NetworkMaterialField,
                       material_field_from_json)
from .nets import MLP, MLPSpec
from .sh import SHLight

SCENE_VERSION = 1


class SceneError(ValueError):
    """Schema violations and missing referenced files."""


def _check_keys(obj: dict, required: set, optional: set, where: str):
    if not isinstance(obj, dict):
        raise SceneError(f"{where}: expected an object")
    keys = set(obj)
    missing = required - keys
    if missing:
        raise SceneError(f"{where}: missing keys {sorted(missing)}")
    unknown = keys - required - optional
    if unknown:
        raise SceneError(f"{where}: unknown keys {sorted(unknown)}")


def _load_blob(path: Path) -> dict:
    if not path.exists():
        raise SceneError(f"missing weight blob: {path}")
    with np.load(path) as data:
        return {k: data[k].copy() for k in data.files}


def _net_from_section(section: dict, blob_dir: Path, prefix: str) -> MLP:
    spec = MLPSpec.from_json(section["spec"])
    blob = _load_blob(blob_dir / section["weights"])
    n = len(spec.layer_dims())
    try:
        arrays = {f"w{i}": blob[f"{prefix}.w{i}"] for i in range(n)}
        arrays.update({f"b{i}": blob[f"{prefix}.b{i}"] for i in range(n)})
    except KeyError as exc:
        raise SceneError(f"weight blob lacks entry {exc} for {prefix!r}")
    return MLP.frozen(spec, arrays)


@dataclass
class SceneDocument:
    """Parsed scene plus the raw JSON it came from (for fixed-point saves)."""

    scene: rmod.Scene
    raw: dict
    path: Path | None = None

    def save(self, path):
        path = Path(path)
        raw = dict(self.raw)
        raw["light"] = self.scene.light.to_json()
        raw["beta"] = float(self.scene.beta)
        with open(path, "w") as fh:
            json.dump(raw, fh, indent=2)

    @property
    def train_views(self):
        return self.raw.get("train_views")

    @property
    def holdout_views(self):
        return self.raw.get("holdout_views")


def load_scene(path) -> SceneDocument:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: not valid JSON ({exc})")
    scene = scene_from_json(raw, blob_dir=path.parent)
    return SceneDocument(scene, raw, path)


def scene_from_json(raw: dict, blob_dir: Path | None = None) -> rmod.Scene:
    blob_dir = Path(blob_dir) if blob_dir is not None else Path(".")
    _check_keys(raw, {"version", "bounding_sphere", "geometry", "material",
                      "basis", "light", "beta", "cameras"},
                {"seed", "train_views", "holdout_views", "images"}, "scene")
    if raw["version"] != SCENE_VERSION:
        raise SceneError(f"unsupported scene version {raw['version']!r}")

    _check_keys(raw["bounding_sphere"], {"center", "radius"}, set(),
                "bounding_sphere")
    bounds = BoundingSphere.from_json(raw["bounding_sphere"])

    geo = raw["geometry"]
    _check_keys(geo, {"prior", "displacement"}, set(), "geometry")
    prior = prior_from_json(geo["prior"])
    disp_sec = geo["displacement"]
    kind = disp_sec.get("kind")
    if kind == "constant":
        _check_keys(disp_sec, {"kind", "value"}, set(), "displacement")
        displacement = ConstantDisplacement(float(disp_sec["value"]))
    elif kind == "network":
        _check_keys(disp_sec, {"kind", "bands", "spec", "weights"}, set(),
                    "displacement")
        mlp = _net_from_section(disp_sec, blob_dir, "displacement")
        displacement = NetDisplacement(mlp, bounds, bands=int(disp_sec["bands"]))
    else:
        raise SceneError(f"unknown displacement kind {kind!r}")
    geometry = SdfField(prior, displacement, bounds)

    mat_sec = raw["material"]
    if mat_sec.get("kind") == "network":
        _check_keys(mat_sec, {"kind", "k", "spec", "weights"}, set(), "material")
        mlp = _net_from_section(mat_sec, blob_dir, "material")
        material = NetworkMaterialField(mlp, bounds, int(mat_sec["k"]))
    else:
        material = material_field_from_json(mat_sec, bounds)

    basis_sec = raw["basis"]
    bkind = basis_sec.get("kind")
    if bkind == "table":
        _check_keys(basis_sec, {"kind", "nodes", "values"}, {"meta"}, "basis")
        basis = BasisTable.from_json(basis_sec)
    elif bkind == "table_from":
        _check_keys(basis_sec, {"kind", "brdfs"}, {"nodes"}, "basis")
        brdfs = [oracle.AnalyticBrdf.from_json(b) for b in basis_sec["brdfs"]]
        basis = oracle.make_basis_table(brdfs, int(basis_sec.get("nodes", 128)))
    elif bkind == "network":
        _check_keys(basis_sec, {"kind", "k", "spec", "weights"}, set(), "basis")
        mlp = _net_from_section(basis_sec, blob_dir, "basis")
        basis = BasisNetwork(mlp, int(basis_sec["k"]))
    else:
        raise SceneError(f"unknown basis kind {bkind!r}")

    light = SHLight.from_json(raw["light"])
    beta = float(raw["beta"])
    if beta <= 0:
        raise SceneError("beta must be positive")
    cameras = [rmod.CameraModel.from_json(c) for c in raw["cameras"]]
    return rmod.Scene(geometry, material, basis, light, beta=beta,
                      cameras=cameras, seed=int(raw.get("seed", 0)))


def scene_to_json(scene: rmod.Scene, *, basis_section: dict | None = None,
                  material_section: dict | None = None,
                  displacement_section: dict | None = None,
                  extra: dict | None = None) -> dict:
    """Serialize a scene built from analytic parts (network parts need the
    caller to provide their sections alongside a written blob)."""
    geo = scene.geometry
    disp = displacement_section
    if disp is None:
        if not isinstance(geo.displacement, ConstantDisplacement):
            raise SceneError("network displacement requires an explicit section")
        disp = geo.displacement.to_json()
    mat = material_section
    if mat is None:
        if isinstance(scene.material, NetworkMaterialField):
            raise SceneError("network material requires an explicit section")
        mat = scene.material.to_json()
    basis = basis_section
    if basis is None:
        if isinstance(scene.basis, BasisTable) and scene.basis.meta:
            basis = {"kind": "table_from", "brdfs": scene.basis.meta,
                     "nodes": len(scene.basis.nodes)}
        elif isinstance(scene.basis, BasisTable):
            basis = scene.basis.to_json()
        else:
            raise SceneError("network basis requires an explicit section")
    doc = {"version": SCENE_VERSION,
           "seed": int(scene.seed),
           "bounding_sphere": geo.bounds.to_json(),
           "geometry": {"prior": geo.prior.to_json(), "displacement": disp},
           "material": mat,
           "basis": basis,
           "light": scene.light.to_json(),
           "beta": float(scene.beta),
           "cameras": [c.to_json() for c in scene.cameras]}
    if extra:
        doc.update(extra)
    return doc


def export_fitted_scene(trainable, out_dir: Path, name: str = "fitted") -> Path:
    """Write a self-contained trained scene: JSON + weight blob + sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob_name = f"{name}_weights.npz"
    arrays = trainable.tape.state_arrays()
    np.savez(out_dir / blob_name, **arrays)
    sidecar = {"version": 1,
               "material_spec": trainable.material.mlp.spec.to_json(),
               "displacement_spec": trainable.displacement.mlp.spec.to_json(),
               "groups": trainable.tape.groups}
    (out_dir / f"{blob_name}.json").write_text(json.dumps(sidecar, indent=2))

    frozen = trainable.frozen_scene()
    mat_section = {"kind": "network", "k": trainable.material.k,
                   "spec": trainable.material.mlp.spec.to_json(),
                   "weights": blob_name}
    disp_section = {"kind": "network", "bands": trainable.displacement.bands,
                    "spec": trainable.displacement.mlp.spec.to_json(),
                    "weights": blob_name}
    doc = scene_to_json(frozen, material_section=mat_section,
                        displacement_section=disp_section)
    out_path = out_dir / f"{name}_scene.json"
    with open(out_path, "w") as fh:
        json.dump(doc, fh, indent=2)
    return out_path


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def save_dataset(out_dir: Path, images, cameras, train_views, holdout_views):
    from .imageio import write_pfm
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = f"view_{i:03d}.pfm"
        write_pfm(out_dir / name, img)
        names.append(name)
    doc = {"version": 1, "images": names,
           "cameras": [c.to_json() for c in cameras],
           "train_views": list(map(int, train_views)),
           "holdout_views": list(map(int, holdout_views))}
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump(doc, fh, indent=2)
    return out_dir / "dataset.json"


def load_dataset(path: Path):
    from .imageio import read_pfm
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: not valid JSON ({exc})")
    _check_keys(doc, {"version", "images", "cameras", "train_views",
                      "holdout_views"}, set(), "dataset")
    base = path.parent
    images = [read_pfm(base / n) for n in doc["images"]]
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise SceneError("dataset images must share one resolution")
    cameras = [rmod.CameraModel.from_json(c) for c in doc["cameras"]]
    return images, cameras, list(doc["train_views"]), list(doc["holdout_views"])
