"""Chamfer distance, field reconstruction, pose errors and report tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .lie import AffineTransform, RigidTransform, invert
from .mesh import MeshError, TriangleMesh, marching_cubes
from .network import LocalSurfaceModel, alignment_transform

__all__ = ["chamfer", "marching_cubes", "reconstruct_shape", "pose_error", "ChamferReport",
           "PoseErrorReport", "emit_reports", "crop_to_sphere"]

PERTURBATION_ROWS = (0, 10, 20, 30, 40)


def _points(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    return p


def chamfer(a, b) -> float:
    """Two-way squared Chamfer distance, halved.

    ``(mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2) / 2``.
    """
    a, b = _points(a), _points(b)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    # sum the two directions in a fixed order so chamfer(a, b) == chamfer(b, a)
    ma, mb = float(np.mean(da * da)), float(np.mean(db * db))
    return (min(ma, mb) + max(ma, mb)) / 2


def crop_to_sphere(points, radius: float, h: AffineTransform | None = None) -> np.ndarray:
    """Points whose image under ``h`` lies within ``radius`` of the origin."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    moved = p if h is None else h.apply(p)
    return p[np.einsum("ij,ij->i", moved, moved) <= radius * radius]


def reconstruct_shape(model: LocalSurfaceModel, code, beta=None, scale=None, grid_res: int = 64,
                      frame: str = "demo", chunk: int = 65536) -> TriangleMesh:
    """Zero level set of one shape's field inside the sampling sphere.

    The field is evaluated on a ``grid_res``^3 grid over the sphere's
    bounding cube in the alignment frame; triangles with a vertex outside
    the sphere are dropped.  ``frame="demo"`` maps the vertices back through
    ``invert(H)``.
    """
    if frame not in ("demo", "alignment"):
        raise ValueError("frame must be 'demo' or 'alignment'")
    if grid_res < 8:
        raise ValueError("grid_res must be at least 8")
    beta = np.zeros(6) if beta is None else np.asarray(beta, dtype=np.float64)
    scale = np.ones(3) if scale is None else np.asarray(scale, dtype=np.float64)
    r = model.sphere_radius
    ticks = np.linspace(-r, r, grid_res)
    grid = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 3)
    dt = model.dtype
    code_t = torch.as_tensor(np.asarray(code, dtype=np.float64), dtype=dt).reshape(1, -1)
    values = np.empty(len(grid))
    with torch.no_grad():
        for s in range(0, len(grid), chunk):
            x = torch.as_tensor(grid[s:s + chunk], dtype=dt)[None]
            values[s:s + chunk] = model.net(code_t, x)[0].to(torch.float64).numpy()
    mesh = marching_cubes(values.reshape((grid_res,) * 3), origin=(-r, -r, -r), spacing=ticks[1] - ticks[0])
    if len(mesh.triangles) == 0:
        raise MeshError("reconstruction has an empty level set")
    inside = np.einsum("ij,ij->i", mesh.vertices, mesh.vertices) <= r * r
    tris = mesh.triangles[inside[mesh.triangles].all(axis=1)]
    if len(tris) == 0:
        raise MeshError("reconstruction has no surface inside the sampling sphere")
    used, tris = np.unique(tris, return_inverse=True)
    mesh = TriangleMesh(mesh.vertices[used], tris.reshape(-1, 3))
    if frame == "demo":
        mesh = mesh.transformed(invert(AffineTransform(alignment_transform(beta, scale))))
    return mesh


def pose_error(predicted: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """(distance between origins, geodesic rotation angle in degrees)."""
    dt = float(np.linalg.norm(predicted.translation - truth.translation))
    rel = predicted.rotation.T @ truth.rotation
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    # arccos loses precision near 0 and 180 degrees; atan2 of the skew part does not
    s = np.linalg.norm([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]]) / 2
    return dt, float(np.degrees(np.arctan2(s, c)))


# -- reports -------------------------------------------------------------------


@dataclass
class ChamferReport:
    names: list[str]
    reconstructed: list[float]
    perturbed: list[float]
    convention: str = "two-way squared nearest distance, averaged over both directions"

    def __post_init__(self):
        if not len(self.names) == len(self.reconstructed) == len(self.perturbed):
            raise ValueError("per-shape lists must have equal length")
        if any(v < 0 for v in self.reconstructed + self.perturbed):
            raise ValueError("Chamfer distances are non-negative")

    def summary(self) -> dict:
        rec, per = np.asarray(self.reconstructed), np.asarray(self.perturbed)
        stat = lambda v: (float(v.mean()), float(v.std())) if len(v) else (None, None)  # noqa: E731
        (rm, rs), (pm, ps) = stat(rec), stat(per)
        return {"reconstructed_mean": rm, "reconstructed_std": rs, "perturbed_mean": pm, "perturbed_std": ps}


@dataclass
class PoseErrorReport:
    """Per-case grasp errors keyed by method and yaw perturbation (degrees)."""

    rows: list[dict] = field(default_factory=list)

    def add(self, method: str, perturbation_deg: float, case: str, translation: float, rotation: float):
        """Record one case; ``inf`` errors mean the method produced no grasp."""
        if not (0.0 <= rotation <= 180.0 or math.isnan(rotation) or rotation == math.inf):
            raise ValueError("rotation error must lie in [0, 180] degrees")
        if not translation >= 0.0:
            raise ValueError("translation error must be non-negative")
        self.rows.append({"method": method, "perturbation_deg": float(perturbation_deg), "case": case,
                          "translation_error": float(translation), "rotation_error_deg": float(rotation)})

    def precision(self, tolerance: float) -> list[dict]:
        """Fraction of cases within ``tolerance`` per (method, perturbation)."""
        methods = sorted({r["method"] for r in self.rows})
        out = []
        for m in methods:
            for eps in PERTURBATION_ROWS:
                sel = [r for r in self.rows if r["method"] == m and r["perturbation_deg"] == eps]
                ok = sum(r["translation_error"] < tolerance for r in sel)
                found = [r["translation_error"] for r in sel if math.isfinite(r["translation_error"])]
                out.append({"method": m, "perturbation_deg": eps, "cases": len(sel),
                            "success_rate": ok / len(sel) if sel else None,
                            "mean_translation_error": float(np.mean(found)) if found else None})
        return out


def _write_csv(path: Path, header: list[str], rows: list[dict]):
    try:
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in header})
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def _write_json(path: Path, payload):
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def emit_reports(out_dir, alignment: ChamferReport | None = None, poses: PoseErrorReport | None = None,
                 tolerance: float = 0.05, meta: dict | None = None) -> list[Path]:
    """Write alignment, per-case and precision tables as CSV plus one JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    alignment = alignment or ChamferReport([], [], [])
    poses = poses or PoseErrorReport()
    written = []

    rows = [{"shape": n, "reconstructed": r, "perturbed": p}
            for n, r, p in zip(alignment.names, alignment.reconstructed, alignment.perturbed)]
    path = out / "alignment.csv"
    _write_csv(path, ["shape", "reconstructed", "perturbed"], rows)
    written.append(path)

    path = out / "grasp_errors.csv"
    _write_csv(path, ["method", "perturbation_deg", "case", "translation_error", "rotation_error_deg"], poses.rows)
    written.append(path)

    precision = poses.precision(tolerance) if poses.rows else []
    path = out / "precision.csv"
    _write_csv(path, ["method", "perturbation_deg", "cases", "success_rate", "mean_translation_error"], precision)
    written.append(path)

    path = out / "report.json"
    _write_json(path, {"meta": {**(meta or {}), "chamfer_convention": alignment.convention,
                                "tolerance": tolerance},
                       "alignment": {"rows": rows, **alignment.summary()},
                       "grasp_errors": poses.rows, "precision": precision})
    written.append(path)
    return written
