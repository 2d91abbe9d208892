"""Signed distances to meshes and SDF sample generation.

Nearest-triangle queries go through an axis-aligned bounding-volume
hierarchy compiled with numba; the inside/outside sign comes from ray
crossing parity.  ``brute_force_distance`` evaluates the same point-triangle
kernel against every triangle and serves as the reference for the tree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.spatial import cKDTree

from .lie import AffineTransform, apply_transform
from .mesh import MeshError, TriangleMesh

LEAF_SIZE = 4
DEFAULT_NOISE_VARIANCE = 0.0025 * 15

# fixed, deliberately irrational ray directions for the parity test
_RAY_DIRS = np.array([
    [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
    [-0.2672612419124244, 0.5345224838248488, 0.8017837257372732],
    [0.8164965809277261, -0.4082482904638631, 0.4082482904638631],
    [-0.3015113445777636, -0.3015113445777636, -0.9045340337332909],
    [0.1230914909793327, 0.4923659639173309, -0.8616404368553291],
])


class SignUndefinedError(MeshError):
    """Raised when asked for signed distances to an open (non-watertight) mesh."""


# -- numba kernels -----------------------------------------------------------


@numba.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    """Squared distance from ``p`` to triangle ``abc`` (Ericson's region test)."""
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ac0, ac1, ac2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        q0, q1, q2 = a[0], a[1], a[2]
    else:
        bp0, bp1, bp2 = p[0] - b[0], p[1] - b[1], p[2] - b[2]
        d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
        d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
        cp0, cp1, cp2 = p[0] - c[0], p[1] - c[1], p[2] - c[2]
        d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
        d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0.0 and d4 <= d3:
            q0, q1, q2 = b[0], b[1], b[2]
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            v = d1 / (d1 - d3)
            q0, q1, q2 = a[0] + v * ab0, a[1] + v * ab1, a[2] + v * ab2
        elif d6 >= 0.0 and d5 <= d6:
            q0, q1, q2 = c[0], c[1], c[2]
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            w = d2 / (d2 - d6)
            q0, q1, q2 = a[0] + w * ac0, a[1] + w * ac1, a[2] + w * ac2
        elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            q0 = b[0] + w * (c[0] - b[0])
            q1 = b[1] + w * (c[1] - b[1])
            q2 = b[2] + w * (c[2] - b[2])
        else:
            denom = 1.0 / (va + vb + vc)
            v = vb * denom
            w = vc * denom
            q0 = a[0] + ab0 * v + ac0 * w
            q1 = a[1] + ab1 * v + ac1 * w
            q2 = a[2] + ab2 * v + ac2 * w
    e0, e1, e2 = p[0] - q0, p[1] - q1, p[2] - q2
    return e0 * e0 + e1 * e1 + e2 * e2


@numba.njit(cache=True)
def _box_dist2(p, lo, hi):
    s = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d = lo[k] - p[k]
            s += d * d
        elif p[k] > hi[k]:
            d = p[k] - hi[k]
            s += d * d
    return s


@numba.njit(cache=True)
def _bvh_nearest(points, corners, lo, hi, left, right, start, count, order):
    n = points.shape[0]
    out = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    for i in range(n):
        p = points[i]
        best = np.inf
        best_t = -1
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(p, lo[node], hi[node]) >= best:
                continue
            if count[node] > 0:
                for k in range(start[node], start[node] + count[node]):
                    t = order[k]
                    d = _closest_on_triangle(p, corners[t, 0], corners[t, 1], corners[t, 2])
                    if d < best or (d == best and t < best_t):
                        best = d
                        best_t = t
            else:
                l, r = left[node], right[node]
                dl = _box_dist2(p, lo[l], hi[l])
                dr = _box_dist2(p, lo[r], hi[r])
                # push the farther child first so the nearer one is popped next
                if dl < dr:
                    stack[top] = r
                    stack[top + 1] = l
                else:
                    stack[top] = l
                    stack[top + 1] = r
                top += 2
        out[i] = np.sqrt(best)
        idx[i] = best_t
    return out, idx


@numba.njit(cache=True)
def _brute_nearest(points, corners):
    n = points.shape[0]
    out = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        best_t = -1
        for t in range(corners.shape[0]):
            d = _closest_on_triangle(points[i], corners[t, 0], corners[t, 1], corners[t, 2])
            if d < best:
                best = d
                best_t = t
        out[i] = np.sqrt(best)
        idx[i] = best_t
    return out, idx


@numba.njit(cache=True)
def _ray_hits_box(o, inv_d, lo, hi):
    tmin = 0.0
    tmax = np.inf
    for k in range(3):
        t1 = (lo[k] - o[k]) * inv_d[k]
        t2 = (hi[k] - o[k]) * inv_d[k]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tmin:
            tmin = t1
        if t2 < tmax:
            tmax = t2
        if tmin > tmax:
            return False
    return True


@numba.njit(cache=True)
def _parity(o, d, corners, lo, hi, left, right, start, count, order, eps):
    """Crossing count along ray ``o + s d``; -1 flags a grazing (ambiguous) hit."""
    inv_d = 1.0 / d
    stack = np.empty(128, dtype=np.int64)
    stack[0] = 0
    top = 1
    hits = 0
    while top > 0:
        top -= 1
        node = stack[top]
        if not _ray_hits_box(o, inv_d, lo[node], hi[node]):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                t = order[k]
                a, b, c = corners[t, 0], corners[t, 1], corners[t, 2]
                e1 = b - a
                e2 = c - a
                px = d[1] * e2[2] - d[2] * e2[1]
                py = d[2] * e2[0] - d[0] * e2[2]
                pz = d[0] * e2[1] - d[1] * e2[0]
                det = e1[0] * px + e1[1] * py + e1[2] * pz
                scale = np.sqrt((e1 * e1).sum() * (e2 * e2).sum())
                if abs(det) <= eps * scale:
                    # ray parallel to the triangle plane: only matters if coplanar
                    s = o - a
                    nx = e1[1] * e2[2] - e1[2] * e2[1]
                    ny = e1[2] * e2[0] - e1[0] * e2[2]
                    nz = e1[0] * e2[1] - e1[1] * e2[0]
                    if abs(s[0] * nx + s[1] * ny + s[2] * nz) <= eps * scale:
                        return -1
                    continue
                inv = 1.0 / det
                s = o - a
                u = (s[0] * px + s[1] * py + s[2] * pz) * inv
                if u < -eps or u > 1.0 + eps:
                    continue
                qx = s[1] * e1[2] - s[2] * e1[1]
                qy = s[2] * e1[0] - s[0] * e1[2]
                qz = s[0] * e1[1] - s[1] * e1[0]
                v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
                if v < -eps or u + v > 1.0 + eps:
                    continue
                tt = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
                if tt < -eps:
                    continue
                if u <= eps or v <= eps or u + v >= 1.0 - eps or tt <= eps:
                    return -1
                hits += 1
        else:
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
    return hits


@numba.njit(cache=True)
def _inside(points, dirs, corners, lo, hi, left, right, start, count, order, eps):
    n = points.shape[0]
    out = np.zeros(n, dtype=np.int8)
    for i in range(n):
        votes_in = 0
        votes = 0
        for j in range(dirs.shape[0]):
            h = _parity(points[i], dirs[j], corners, lo, hi, left, right, start, count, order, eps)
            if h < 0:
                continue
            votes += 1
            votes_in += h % 2
            if votes == 1 and j == 0:
                break
        if votes == 0:
            out[i] = -1
        else:
            out[i] = 1 if 2 * votes_in > votes else 0
    return out


def _build_bvh(corners: np.ndarray):
    """Median-split AABB tree over triangle centroids (iterative build)."""
    m = len(corners)
    tri_lo = corners.min(axis=1)
    tri_hi = corners.max(axis=1)
    cent = corners.mean(axis=1)
    order = np.arange(m)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        lo.append(tri_lo[idx].min(0))
        hi.append(tri_hi[idx].max(0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(lo) - 1

    stack = [(new_node(0, m), 0, m)]
    while stack:
        node, s, e = stack.pop()
        if e - s <= LEAF_SIZE:
            continue
        idx = order[s:e]
        c = cent[idx]
        axis = int(np.argmax(c.max(0) - c.min(0)))
        mid = (e - s) // 2
        part = np.argpartition(c[:, axis], mid)
        order[s:e] = idx[part]
        ln = new_node(s, s + mid)
        rn = new_node(s + mid, e)
        left[node], right[node], count[node] = ln, rn, 0
        stack.append((ln, s, s + mid))
        stack.append((rn, s + mid, e))
    return (np.array(lo), np.array(hi), np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
            np.array(start, dtype=np.int64), np.array(count, dtype=np.int64), order.astype(np.int64))


class MeshSdf:
    """Query structure for distances and signed distances to one mesh."""

    def __init__(self, mesh: TriangleMesh):
        if len(mesh.triangles) == 0:
            raise MeshError("mesh has no triangles")
        self.mesh = mesh
        self.watertight = mesh.is_watertight()
        self.corners = np.ascontiguousarray(mesh.corners)
        self._tree = _build_bvh(self.corners)
        self._eps = 1e-10

    def distance(self, points) -> np.ndarray:
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        d, _ = _bvh_nearest(pts, self.corners, *self._tree)
        return d

    def brute_force_distance(self, points) -> np.ndarray:
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        d, _ = _brute_nearest(pts, self.corners)
        return d

    def contains(self, points) -> np.ndarray:
        if not self.watertight:
            raise SignUndefinedError("inside/outside is undefined for a non-watertight mesh")
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        flags = _inside(pts, _RAY_DIRS, self.corners, *self._tree, self._eps)
        if np.any(flags < 0):
            # every ray grazed an edge; only possible for points on the surface
            flags = np.where(flags < 0, 0, flags)
        return flags.astype(bool)

    def signed_distance(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = pts.reshape(-1, 3)
        d = self.distance(pts)
        sign = np.where(self.contains(pts), -1.0, 1.0)
        out = sign * d
        return out[0] if single else out


def signed_distance(mesh: TriangleMesh, x) -> np.ndarray | float:
    return MeshSdf(mesh).signed_distance(x)


# -- sample sets -------------------------------------------------------------

RECORD_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("distance", "<f8"),
                         ("flags", "u1"), ("shape", "<u4")])
FLAG_UNSIGNED = 1


@dataclass(frozen=True, eq=False)
class SdfSampleSet:
    positions: np.ndarray
    distances: np.ndarray
    unsigned: np.ndarray
    shape_index: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(pos)
        dist = np.asarray(self.distances, dtype=np.float64).reshape(n)
        uns = np.broadcast_to(np.asarray(self.unsigned, dtype=bool), (n,)).copy()
        idx = np.broadcast_to(np.asarray(self.shape_index, dtype=np.int64), (n,)).copy()
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(dist))):
            raise ValueError("samples must be finite")
        if np.any(dist[uns] < 0):
            raise ValueError("unsigned samples must have non-negative distance")
        for name, val in (("positions", pos), ("distances", dist), ("unsigned", uns), ("shape_index", idx)):
            object.__setattr__(self, name, val)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, bool), np.zeros(0, np.int64))

    def subset(self, mask) -> "SdfSampleSet":
        return SdfSampleSet(self.positions[mask], self.distances[mask], self.unsigned[mask],
                            self.shape_index[mask])

    @staticmethod
    def concat(sets) -> "SdfSampleSet":
        sets = list(sets)
        if not sets:
            return SdfSampleSet.empty()
        return SdfSampleSet(np.concatenate([s.positions for s in sets]),
                            np.concatenate([s.distances for s in sets]),
                            np.concatenate([s.unsigned for s in sets]),
                            np.concatenate([s.shape_index for s in sets]))

    def transformed(self, h: AffineTransform) -> "SdfSampleSet":
        """Move positions rigidly; distances are unchanged (rigid ``h`` only)."""
        return SdfSampleSet(apply_transform(h, self.positions), self.distances, self.unsigned,
                            self.shape_index)

    def save(self, path, meta: dict | None = None) -> None:
        """Binary little-endian records plus a ``.json`` sidecar manifest."""
        path = Path(path)
        rec = np.zeros(len(self), dtype=RECORD_DTYPE)
        rec["x"], rec["y"], rec["z"] = self.positions.T
        rec["distance"] = self.distances
        rec["flags"] = self.unsigned.astype(np.uint8) * FLAG_UNSIGNED
        rec["shape"] = self.shape_index
        path.write_bytes(rec.tobytes())
        sidecar = {"count": len(self), "record": "float64 x,y,z,distance; uint8 flags; uint32 shape",
                   "record_bytes": RECORD_DTYPE.itemsize, "meta": meta or {}}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SdfSampleSet":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"sample archive not found: {path}")
        raw = path.read_bytes()
        if len(raw) % RECORD_DTYPE.itemsize:
            raise ValueError(f"{path}: truncated sample archive")
        rec = np.frombuffer(raw, dtype=RECORD_DTYPE)
        pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
        return cls(pos, rec["distance"].copy(), (rec["flags"] & FLAG_UNSIGNED).astype(bool),
                   rec["shape"].astype(np.int64))


def padded_bounds(lo, hi, pad: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    margin = pad * (hi - lo)
    return lo - margin, hi + margin


def sample_training_set(mesh: TriangleMesh | MeshSdf, n_surface: int, n_free: int,
                        variance: float = DEFAULT_NOISE_VARIANCE, *, fine_variance: float | None = None,
                        bounds=None, seed: int = 0, shape_index: int = 0) -> SdfSampleSet:
    """Near-surface and free-space samples labelled with exact signed distances.

    Surface points are drawn proportionally to area and jittered with
    isotropic Gaussian noise of the given per-axis ``variance``.  When
    ``fine_variance`` is set, half of the surface points use it instead (a
    tighter band around the surface).  Free-space points are uniform in
    ``bounds`` (default: mesh bounding box padded by 10% per side).
    """
    if n_surface <= 0 or n_free <= 0:
        raise ValueError("n_surface and n_free must be positive")
    if variance < 0:
        raise ValueError("variance must be non-negative")
    sdf = mesh if isinstance(mesh, MeshSdf) else MeshSdf(mesh)
    if sdf.mesh.area() <= 0:
        raise MeshError("degenerate mesh: zero surface area")
    rng = np.random.default_rng(seed)
    surf = sdf.mesh.sample_surface(n_surface, rng)
    std = np.full(n_surface, np.sqrt(variance))
    if fine_variance is not None:
        std[n_surface // 2:] = np.sqrt(fine_variance)
    surf = surf + rng.normal(size=surf.shape) * std[:, None]
    lo, hi = bounds if bounds is not None else padded_bounds(*sdf.mesh.bounds())
    free = rng.uniform(lo, hi, size=(n_free, 3))
    pos = np.vstack([surf, free])
    return SdfSampleSet(pos, sdf.signed_distance(pos), False, shape_index)


def sphere_filter(samples: SdfSampleSet, h: AffineTransform, r: float) -> SdfSampleSet:
    """Keep samples that ``h`` maps into the radius-``r`` ball at the origin."""
    if r <= 0:
        raise ValueError("sphere radius must be positive")
    moved = apply_transform(h, samples.positions)
    return samples.subset(np.einsum("ij,ij->i", moved, moved) <= r * r)


def cloud_unsigned_samples(cloud, bounds, n: int, seed: int = 0, shape_index: int = 0) -> SdfSampleSet:
    """Uniform workspace samples labelled by distance to the nearest cloud point.

    The observed points themselves are appended with distance zero.
    """
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point cloud is empty")
    rng = np.random.default_rng(seed)
    lo, hi = bounds
    query = rng.uniform(lo, hi, size=(n, 3))
    dist, _ = cKDTree(pts).query(query)
    pos = np.vstack([query, pts])
    d = np.concatenate([dist, np.zeros(len(pts))])
    return SdfSampleSet(pos, d, True, shape_index)


def nearest_cloud_distance(cloud, query) -> np.ndarray:
    dist, _ = cKDTree(np.asarray(cloud, dtype=np.float64)).query(np.asarray(query, dtype=np.float64))
    return dist
