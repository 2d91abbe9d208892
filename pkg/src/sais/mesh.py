"""Triangle meshes, topology checks and OBJ/PLY file I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lie import AffineTransform, apply_transform


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshError("mesh vertices must be finite")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def corners(self) -> np.ndarray:
        """``[M, 3, 3]`` triangle corner coordinates."""
        return self.vertices[self.triangles]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(0), self.vertices.max(0)

    def extent(self) -> np.ndarray:
        lo, hi = self.bounds()
        return hi - lo

    def triangle_areas(self) -> np.ndarray:
        c = self.corners
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def volume(self) -> float:
        """Signed volume (positive for outward-oriented closed meshes)."""
        c = self.corners
        return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)

    def edge_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Undirected edges and how many triangles use each."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two triangles with opposite orientation."""
        if len(self.triangles) == 0:
            return False
        t = self.triangles
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        _, counts = self.edge_counts()
        if not np.all(counts == 2):
            return False
        # consistent orientation: each directed edge appears exactly once
        return len(np.unique(directed, axis=0)) == len(directed)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        edges, _ = self.edge_counts()
        return int(len(used) - len(edges) + len(self.triangles))

    def transformed(self, h: AffineTransform) -> "TriangleMesh":
        tris = self.triangles
        if np.linalg.det(h.linear) < 0:
            tris = tris[:, ::-1]
        return TriangleMesh(apply_transform(h, self.vertices), tris)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[:, ::-1])

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` points uniformly distributed over the surface area."""
        areas = self.triangle_areas()
        total = areas.sum()
        if not total > 0:
            raise MeshError("cannot sample a mesh with zero surface area")
        idx = rng.choice(len(areas), size=n, p=areas / total)
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        c = self.corners[idx]
        return ((1 - r1)[:, None] * c[:, 0] + (r1 * (1 - r2))[:, None] * c[:, 1]
                + (r1 * r2)[:, None] * c[:, 2])


def weld(vertices: np.ndarray, triangles: np.ndarray, decimals: int = 12) -> TriangleMesh:
    """Merge coincident vertices and drop degenerate triangles."""
    key = np.round(vertices, decimals)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    # keep the first original coordinate of each merged group
    first = np.full(len(uniq), -1)
    first[inverse[::-1]] = np.arange(len(vertices))[::-1]
    tris = inverse[triangles]
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 2] != tris[:, 0])
    return TriangleMesh(vertices[first], tris[keep])


# -- file I/O --------------------------------------------------------------


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
        path.write_text("\n".join(lines) + "\n")
    elif suffix == ".ply":
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(mesh.vertices)}\n"
            "property double x\nproperty double y\nproperty double z\n"
            f"element face {len(mesh.triangles)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        ).encode()
        faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("i", "<i4", 3)])
        faces["n"] = 3
        faces["i"] = mesh.triangles
        path.write_bytes(header + mesh.vertices.astype("<f8").tobytes() + faces.tobytes())
    else:
        raise MeshError(f"{path}: unsupported mesh format {suffix!r} (use .obj or .ply)")


def load_mesh(path) -> TriangleMesh:
    """Read an OBJ or PLY mesh; polygons are fan-triangulated."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        vertices, faces = read_ply(path)
        if faces is None:
            raise MeshError(f"{path}: PLY file has no faces")
        return TriangleMesh(vertices, faces)
    raise MeshError(f"{path}: unsupported mesh format {suffix!r}")


def _fan(poly):
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def _load_obj(path: Path) -> TriangleMesh:
    vertices, tris = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for p in parts[1:]:
                    k = int(p.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(vertices) + k)
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                tris.extend(_fan(idx))
        except ValueError as exc:
            raise MeshError(f"{path}:{lineno}: malformed line {line.strip()!r}: {exc}") from None
    if not vertices:
        raise MeshError(f"{path}: no vertices")
    return TriangleMesh(np.array(vertices), np.array(tris, dtype=np.int64).reshape(-1, 3))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Vertices (and faces, if present) from an ASCII or binary little-endian PLY."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError(f"{path}:1: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:body_start].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for lineno, line in enumerate(header, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise MeshError(f"{path}:{lineno}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise MeshError(f"{path}:{lineno}: unknown property type {parts[1]!r}")
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt == "ascii":
        return _read_ply_ascii(path, data[body_start:].decode(), elements, len(header))
    if fmt != "binary_little_endian":
        raise MeshError(f"{path}: unsupported PLY format {fmt!r}")
    offset = body_start
    vertices, faces = None, None
    for name, count, props in elements:
        if any(isinstance(p[1], tuple) for p in props):
            rows = []
            for _ in range(count):
                row = []
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        ct = np.dtype("<" + ptype[1])
                        it = np.dtype("<" + ptype[2])
                        (n,) = np.frombuffer(data, ct, 1, offset)
                        offset += ct.itemsize
                        vals = np.frombuffer(data, it, int(n), offset)
                        offset += it.itemsize * int(n)
                        row.append(vals)
                    else:
                        dt = np.dtype("<" + ptype)
                        offset += dt.itemsize
                rows.append(row)
            if name == "face":
                faces = _triangulate([r[0] for r in rows])
        else:
            dt = np.dtype([(p, "<" + t) for p, t in props])
            arr = np.frombuffer(data, dt, count, offset)
            offset += dt.itemsize * count
            if name == "vertex":
                vertices = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    if vertices is None:
        raise MeshError(f"{path}: PLY file has no vertex element")
    return vertices, faces


def _read_ply_ascii(path, text, elements, header_lines):
    lines = iter(enumerate(text.splitlines(), start=header_lines + 1))
    vertices, faces = None, None
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            try:
                lineno, line = next(lines)
            except StopIteration:
                raise MeshError(f"{path}: unexpected end of file in element {name!r}") from None
            try:
                vals = line.split()
                if name == "vertex":
                    names = [p[0] for p in props]
                    rows.append([float(vals[names.index(a)]) for a in "xyz"])
                elif name == "face":
                    n = int(vals[0])
                    rows.append([int(v) for v in vals[1:1 + n]])
            except (ValueError, IndexError) as exc:
                raise MeshError(f"{path}:{lineno}: malformed line: {exc}") from None
        if name == "vertex":
            vertices = np.array(rows, dtype=np.float64).reshape(-1, 3)
        elif name == "face":
            faces = _triangulate(rows)
    if vertices is None:
        raise MeshError(f"{path}: PLY file has no vertex element")
    return vertices, faces


def _triangulate(polys) -> np.ndarray:
    tris = []
    for p in polys:
        tris.extend(_fan([int(v) for v in p]))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def write_point_cloud(points: np.ndarray, path) -> None:
    pts = np.asarray(points, dtype="<f8").reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    ).encode()
    Path(path).write_bytes(header + pts.tobytes())


def read_point_cloud(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"point cloud not found: {path}")
    vertices, _ = read_ply(path)
    return vertices



def marching_cubes(field, origin=(0.0, 0.0, 0.0), spacing=1.0, iso: float = 0.0) -> TriangleMesh:
    """Triangulate the ``iso`` level set of a sampled scalar grid.

    ``field[i, j, k]`` is the value at ``origin + spacing * (i, j, k)``.
    Vertices are placed by linear interpolation along grid edges and
    triangles are oriented with normals pointing towards increasing values
    (outward for an SDF).  A grid without a sign change yields an empty mesh.
    """
    from skimage.measure import marching_cubes as _mc

    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 3 or min(f.shape) < 8:
        raise MeshError(f"marching cubes needs a 3-D grid of at least 8^3, got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise MeshError("scalar field must be finite")
    if not (f.min() < iso < f.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # samples exactly on the level set create zero-area triangles; nudge them
    f = np.where(f == iso, np.nextafter(iso, np.inf), f)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    verts, faces, _, _ = _mc(f, level=iso, spacing=tuple(spacing), gradient_direction="descent",
                             allow_degenerate=False)
    verts = verts.astype(np.float64) + np.asarray(origin, dtype=np.float64)
    return weld(verts, faces.astype(np.int64))
