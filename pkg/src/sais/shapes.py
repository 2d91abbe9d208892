"""Procedural watertight shape families with grasp annotations.

Scene units are metres, but shapes are sized like normalised ShapeNet
models (mugs span roughly one unit).  Every object stands on the ``z = 0``
plane with its vertical axis through the origin, except the centred
primitives (``make_cylinder`` / ``make_cuboid``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lie import RigidTransform, rotation_about_z, translation
from .mesh import MeshError, TriangleMesh, marching_cubes

FAMILIES = ("cylinder", "cuboid", "mug", "bowl")

# documented parameter bounds per family (scene units)
PARAM_BOUNDS: dict[str, dict[str, tuple[float, float]]] = {
    "cylinder": {"diameter": (0.10, 0.80), "height": (0.25, 1.00)},
    "cuboid": {"side": (0.10, 0.80), "height": (0.25, 1.00)},
    "mug": {
        "body_diameter": (0.30, 0.90),
        "body_height": (0.40, 1.00),
        "wall_thickness": (0.015, 0.08),
        "handle_radius": (0.08, 0.30),
        "handle_tube_radius": (0.02, 0.08),
    },
    "bowl": {"diameter": (0.40, 1.20), "depth": (0.15, 0.60), "wall_thickness": (0.015, 0.08)},
}

DEFAULT_MUG = dict(body_diameter=0.6, body_height=0.7, wall_thickness=0.035,
                   handle_radius=0.17, handle_tube_radius=0.045)


def _check_range(family: str, name: str, value: float):
    lo, hi = PARAM_BOUNDS[family][name]
    if not lo <= value <= hi:
        raise ValueError(f"{family} {name}={value:g} outside [{lo:g}, {hi:g}]")


def make_cylinder(diameter: float, height: float, segments: int = 64) -> TriangleMesh:
    """Closed cylinder centred at the origin with its axis along z."""
    _check_range("cylinder", "diameter", diameter)
    _check_range("cylinder", "height", height)
    if segments < 8:
        raise ValueError("cylinder needs at least 8 segments")
    r, h = diameter / 2, height / 2
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, -h)])
    top = np.column_stack([ring, np.full(segments, h)])
    verts = np.vstack([bottom, top, [[0, 0, -h], [0, 0, h]]])
    i = np.arange(segments)
    j = (i + 1) % segments
    cb, ct = 2 * segments, 2 * segments + 1
    tris = np.vstack([
        np.column_stack([i, j, segments + j]),
        np.column_stack([i, segments + j, segments + i]),
        np.column_stack([np.full(segments, cb), j, i]),
        np.column_stack([np.full(segments, ct), segments + i, segments + j]),
    ])
    return TriangleMesh(verts, tris)


def make_box(extents=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned box centred at the origin (12 outward-facing triangles)."""
    ex = np.asarray(extents, dtype=np.float64).reshape(3)
    if np.any(ex <= 0):
        raise ValueError("box extents must be positive")
    sx, sy, h = ex / 2
    verts = np.array([[x, y, z] for z in (-h, h) for y in (-sy, sy) for x in (-sx, sx)])
    tris = np.array([
        [0, 2, 1], [1, 2, 3],  # bottom
        [4, 5, 6], [5, 7, 6],  # top
        [0, 1, 4], [1, 5, 4],  # y = -s
        [2, 6, 3], [3, 6, 7],  # y = +s
        [0, 4, 2], [2, 4, 6],  # x = -s
        [1, 3, 5], [3, 7, 5],  # x = +s
    ])
    return TriangleMesh(verts, tris)


def make_cuboid(side: float, height: float) -> TriangleMesh:
    """Box with a square ``side x side`` cross-section, centred at the origin."""
    _check_range("cuboid", "side", side)
    _check_range("cuboid", "height", height)
    return make_box((side, side, height))


# -- analytic SDFs used to build the compound shapes -------------------------


def _sdf_capped_cylinder(p, radius, z0, z1):
    dr = np.hypot(p[..., 0], p[..., 1]) - radius
    dz = np.maximum(z0 - p[..., 2], p[..., 2] - z1)
    outside = np.hypot(np.maximum(dr, 0), np.maximum(dz, 0))
    return outside + np.minimum(np.maximum(dr, dz), 0)


def _sdf_torus_xz(p, center, major, minor):
    q = p - center
    ring = np.hypot(q[..., 0], q[..., 2]) - major
    return np.hypot(ring, q[..., 1]) - minor


def mug_sdf(p, body_diameter, body_height, wall_thickness, handle_radius, handle_tube_radius):
    """Analytic (bound) SDF of the mug: open-topped shell plus a torus handle."""
    radius = body_diameter / 2
    outer = _sdf_capped_cylinder(p, radius, 0.0, body_height)
    cavity = _sdf_capped_cylinder(p, radius - wall_thickness, wall_thickness, 2 * body_height)
    shell = np.maximum(outer, -cavity)
    torus = _sdf_torus_xz(p, np.array([radius, 0.0, body_height / 2]), handle_radius, handle_tube_radius)
    handle = np.maximum(torus, -outer)
    return np.minimum(shell, handle)


def bowl_geometry(diameter, depth, wall_thickness):
    """Sphere radius and centre height of a spherical-cap bowl with its rim at ``z = depth``."""
    a = diameter / 2
    radius = (a * a + depth * depth) / (2 * depth)
    return radius, radius


def bowl_sdf(p, diameter, depth, wall_thickness):
    radius, cz = bowl_geometry(diameter, depth, wall_thickness)
    d = np.linalg.norm(p - np.array([0.0, 0.0, cz]), axis=-1)
    shell = np.maximum(d - radius, (radius - wall_thickness) - d)
    return np.maximum(shell, p[..., 2] - depth)


def _grid_mesh(sdf, lo, hi, spacing) -> TriangleMesh:
    lo = np.asarray(lo) - 2 * spacing
    hi = np.asarray(hi) + 2 * spacing
    counts = np.ceil((hi - lo) / spacing).astype(int) + 1
    axes = [lo[k] + spacing * np.arange(counts[k]) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return marching_cubes(sdf(grid), lo, spacing)


def make_mug(body_diameter=0.6, body_height=0.7, wall_thickness=0.035, handle_radius=0.17,
             handle_tube_radius=0.045, resolution: int = 80) -> TriangleMesh:
    """Watertight genus-1 mug meshed from its analytic SDF.

    The grid spacing is ``body_height / resolution`` so uniformly scaled
    parameters give an exactly scaled mesh.  Parameter combinations whose
    handle would intersect itself or miss the body raise ``MeshError``.
    """
    p = dict(body_diameter=body_diameter, body_height=body_height, wall_thickness=wall_thickness,
             handle_radius=handle_radius, handle_tube_radius=handle_tube_radius)
    for k, v in p.items():
        _check_range("mug", k, v)
    radius = body_diameter / 2
    if handle_tube_radius >= handle_radius:
        raise MeshError("handle tube radius >= handle radius: handle self-intersects")
    if handle_radius + handle_tube_radius >= min(body_height / 2, radius):
        raise MeshError("handle does not fit on the body side")
    if 2 * wall_thickness >= radius:
        raise MeshError("wall too thick for the body radius")
    spacing = body_height / resolution
    lo = [-radius, -radius, 0.0]
    hi = [radius + handle_radius + handle_tube_radius, radius, body_height]
    mesh = _grid_mesh(lambda g: mug_sdf(g, **p), lo, hi, spacing)
    if not mesh.is_watertight() or mesh.euler_characteristic() != 0:
        raise MeshError("mug mesh is not a watertight genus-1 surface; increase resolution")
    return mesh


def mug_grasps(body_diameter=0.6, body_height=0.7, wall_thickness=0.035, handle_radius=0.17,
               handle_tube_radius=0.045, **_) -> dict[str, RigidTransform]:
    """Ground-truth grasp frames: handle (outermost tube centre) and rim (+x side)."""
    radius = body_diameter / 2
    return {
        "handle": translation([radius + handle_radius, 0.0, body_height / 2]),
        "rim": translation([radius - wall_thickness / 2, 0.0, body_height]),
    }


def make_bowl(diameter=0.7, depth=0.3, wall_thickness=0.035, resolution: int = 80) -> TriangleMesh:
    """Spherical-cap shell with its bottom at ``z = 0`` and rim at ``z = depth``."""
    p = dict(diameter=diameter, depth=depth, wall_thickness=wall_thickness)
    for k, v in p.items():
        _check_range("bowl", k, v)
    if depth > diameter / 2:
        raise MeshError("bowl deeper than a hemisphere")
    a = diameter / 2
    spacing = diameter / resolution
    mesh = _grid_mesh(lambda g: bowl_sdf(g, **p), [-a, -a, 0.0], [a, a, depth], spacing)
    if not mesh.is_watertight() or mesh.euler_characteristic() != 2:
        raise MeshError("bowl mesh is not a watertight sphere-like surface")
    return mesh


def bowl_rim(diameter=0.7, depth=0.3, wall_thickness=0.035, **_) -> tuple[np.ndarray, float]:
    """Centre and radius of the rim circle through the middle of the wall."""
    radius, cz = bowl_geometry(diameter, depth, wall_thickness)
    outer = diameter / 2
    inner = np.sqrt((radius - wall_thickness) ** 2 - (cz - depth) ** 2)
    return np.array([0.0, 0.0, depth]), 0.5 * (outer + inner)


def bowl_grasps(diameter=0.7, depth=0.3, wall_thickness=0.035, **_) -> dict[str, RigidTransform]:
    center, r = bowl_rim(diameter, depth, wall_thickness)
    return {"rim": translation(center + [r, 0.0, 0.0])}


def perturb_pose(mesh: TriangleMesh, yaw_range: float, translation_range: float, seed: int):
    """Random table-top pose change: yaw about z and an x/y translation.

    Yaw is uniform in ``[-yaw_range, yaw_range]`` radians and each of the x
    and y offsets uniform in ``[-translation_range, translation_range]``.
    Returns the moved mesh and the exact transform that was applied.
    """
    if yaw_range < 0 or translation_range < 0:
        raise ValueError("perturbation ranges must be non-negative")
    rng = np.random.default_rng(seed)
    yaw = rng.uniform(-yaw_range, yaw_range)
    dx, dy = rng.uniform(-translation_range, translation_range, size=2)
    t = translation([dx, dy, 0.0]) @ rotation_about_z(yaw)
    return mesh.transformed(t), t


# -- families and corpora ----------------------------------------------------


@dataclass(frozen=True)
class ShapeFamilySpec:
    family: str
    ranges: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        for name, (lo, hi) in self.ranges.items():
            if name not in PARAM_BOUNDS[self.family]:
                raise ValueError(f"{self.family} has no parameter {name!r}")
            blo, bhi = PARAM_BOUNDS[self.family][name]
            if not (blo <= lo <= hi <= bhi):
                raise ValueError(f"{self.family} range {name}=[{lo}, {hi}] outside [{blo}, {bhi}]")

    def sample_params(self, count: int) -> list[dict]:
        rng = np.random.default_rng(self.seed)
        base = DEFAULT_MUG if self.family == "mug" else {}
        out = []
        for _ in range(count):
            p = {}
            for name, (blo, bhi) in PARAM_BOUNDS[self.family].items():
                lo, hi = self.ranges.get(name, (base[name], base[name]) if name in base else (blo, bhi))
                p[name] = float(rng.uniform(lo, hi))
            out.append(p)
        return out


@dataclass
class GeneratedShape:
    name: str
    family: str
    params: dict
    mesh: TriangleMesh
    pose: RigidTransform = field(default_factory=RigidTransform)
    grasps: dict = field(default_factory=dict)

    def to_json(self, file: str | None = None) -> dict:
        return {
            "name": self.name, "family": self.family, "params": self.params,
            "file": file, "pose": self.pose.to_json("canonical->world"),
            "grasps": {k: g.to_json(k) for k, g in self.grasps.items()},
        }


def build_shape(family: str, params: dict, name: str = "", resolution: int = 80) -> GeneratedShape:
    """Mesh plus canonical-pose grasp annotations for one parameter set."""
    if family == "cylinder":
        mesh, grasps = make_cylinder(params["diameter"], params["height"]), {}
    elif family == "cuboid":
        mesh, grasps = make_cuboid(params["side"], params["height"]), {}
    elif family == "mug":
        mesh, grasps = make_mug(**params, resolution=resolution), mug_grasps(**params)
    elif family == "bowl":
        mesh, grasps = make_bowl(**params, resolution=resolution), bowl_grasps(**params)
    else:
        raise ValueError(f"unknown shape family {family!r}")
    return GeneratedShape(name or family, family, dict(params), mesh, RigidTransform(), grasps)


def generate_family(spec: ShapeFamilySpec, count: int, prefix: str | None = None,
                    resolution: int = 80) -> list[GeneratedShape]:
    prefix = prefix or spec.family
    return [build_shape(spec.family, p, f"{prefix}_{k:03d}", resolution)
            for k, p in enumerate(spec.sample_params(count))]


def place(shape: GeneratedShape, pose: RigidTransform) -> GeneratedShape:
    """Move a shape (and its grasp annotations) by ``pose``."""
    return GeneratedShape(shape.name, shape.family, shape.params, shape.mesh.transformed(pose),
                          pose @ shape.pose, {k: pose @ g for k, g in shape.grasps.items()})


def write_manifest(path, shapes_json: list[dict], meta: dict | None = None) -> None:
    payload = {"meta": meta or {}, "shapes": shapes_json}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return json.loads(path.read_text())
