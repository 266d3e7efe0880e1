"""Triangle meshes, surface sampling, nearest neighbors and chamfer statistics.

Lengths are in meters throughout the package; anything quoted in cm/mm is
converted at the boundary.  Medians are lower-medians for even counts so
every statistic is an order statistic of the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Mesh", "SurfaceSample", "vertex_normals", "sample_surface",
    "nearest_neighbors", "chamfer_stats", "euler_rotation", "lower_median",
    "load_obj", "save_obj", "load_ply", "save_ply",
]


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray          # (V, 3) float64, meters
    faces: np.ndarray             # (F, 3) int
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must be (F, 3) triangles")

    def validate(self):
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        if np.any(self.face_areas() <= 0.0):
            raise MeshError("degenerate (zero-area) face")
        return self

    def triangles(self):
        return self.vertices[self.faces]

    def face_cross(self):
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self):
        c = self.face_cross()
        return c / np.linalg.norm(c, axis=1, keepdims=True)

    def edges_with_faces(self):
        """Undirected edges (E, 2) and the list of incident face ids per edge."""
        f = self.faces
        raw = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        key = np.sort(raw, axis=1)
        face_ids = np.tile(np.arange(len(f)), 3)
        order = np.lexsort((key[:, 1], key[:, 0]))
        key, face_ids = key[order], face_ids[order]
        uniq, start = np.unique(key, axis=0, return_index=True)
        counts = np.diff(np.append(start, len(key)))
        return uniq, face_ids, start, counts

    def is_watertight(self):
        """True when every edge is shared by exactly two faces."""
        _, _, _, counts = self.edges_with_faces()
        return bool(np.all(counts == 2))

    def copy_with(self, vertices):
        return Mesh(np.asarray(vertices, dtype=np.float64), self.faces, self.colors)


@dataclass
class SurfaceSample:
    points: np.ndarray       # (N, 3)
    normals: np.ndarray      # (N, 3) unit
    face_ids: np.ndarray = field(default=None)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized.

    The raw triangle cross product already carries twice the face area,
    so summing cross products per vertex is the area weighting.
    """
    cross = mesh.face_cross()
    acc = np.zeros_like(mesh.vertices)
    for c in range(3):
        for col in range(3):
            acc[:, col] += np.bincount(mesh.faces[:, c], weights=cross[:, col],
                                       minlength=len(mesh.vertices))
    norms = np.linalg.norm(acc, axis=1)
    if np.any(norms == 0.0):
        raise MeshError("vertex with zero accumulated normal (isolated or degenerate)")
    return acc / norms[:, None]


def sample_surface(mesh: Mesh, n: int, seed) -> SurfaceSample:
    """n points uniform over surface area; face normals attached; seeded."""
    if n <= 0:
        raise ValueError("sample count must be positive")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0.0:
        raise MeshError("mesh has no positive area")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    face_ids = np.searchsorted(cdf, rng.random(n), side="right")
    face_ids = np.minimum(face_ids, len(areas) - 1)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    tri = mesh.triangles()[face_ids]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return SurfaceSample(pts, mesh.face_normals()[face_ids], face_ids)


def nearest_neighbors(query: np.ndarray, target: np.ndarray):
    """Exact Euclidean nearest neighbor of each query in target: (index, distance)."""
    target = np.asarray(target, dtype=np.float64)
    if len(target) == 0:
        raise ValueError("empty target")
    dist, idx = cKDTree(target).query(np.asarray(query, dtype=np.float64), k=1)
    return idx, dist


def lower_median(values: np.ndarray) -> float:
    """Order-statistic median: element (n-1)//2 of the sorted data."""
    values = np.sort(np.asarray(values).ravel())
    return float(values[(len(values) - 1) // 2])


def chamfer_stats(a: SurfaceSample, b: SurfaceSample) -> dict:
    """Bidirectional chamfer statistics pooled over a→b and b→a pairs.

    Angular error is arccos of the clamped dot of unit normals, in
    degrees.  Pooling both directions makes the result symmetric.
    """
    ia, da = nearest_neighbors(a.points, b.points)
    ib, db = nearest_neighbors(b.points, a.points)
    dists = np.concatenate([da, db])
    cos_ab = np.sum(a.normals * b.normals[ia], axis=1)
    cos_ba = np.sum(b.normals * a.normals[ib], axis=1)
    ang = np.degrees(np.arccos(np.clip(np.concatenate([cos_ab, cos_ba]), -1.0, 1.0)))
    return {
        "mean_distance": float(dists.mean()),
        "median_distance": lower_median(dists),
        "mean_normal_deg": float(ang.mean()),
        "median_normal_deg": lower_median(ang),
    }


def euler_rotation(r) -> np.ndarray:
    """Extrinsic XYZ Euler rotation: R = Rz(rz) @ Ry(ry) @ Rx(rx)."""
    rx, ry, rz = np.asarray(r, dtype=np.float64)
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


# ---------------------------------------------------------------------------
# Mesh file formats: ASCII OBJ and binary little-endian PLY.

def save_obj(path, mesh: Mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if len(idx) != 3:
                    raise MeshError("only triangular faces are supported")
                faces.append(idx)
    if not verts:
        raise MeshError("OBJ contains no vertices")
    return Mesh(np.array(verts, dtype=np.float64),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {nv}
property double x
property double y
property double z
element face {nf}
property list uchar int vertex_indices
end_header
"""


def save_ply(path, mesh: Mesh):
    with open(path, "wb") as fh:
        fh.write(_PLY_HEADER.format(nv=len(mesh.vertices), nf=len(mesh.faces)).encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        if len(mesh.faces):
            counts = np.full((len(mesh.faces), 1), 3, dtype=np.uint8)
            idx = np.ascontiguousarray(mesh.faces, dtype="<i4")
            rec = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("v", "<i4", (3,))])
            rec["n"] = counts[:, 0]
            rec["v"] = idx
            fh.write(rec.tobytes())


def load_ply(path) -> Mesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError("not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise MeshError("only binary little-endian PLY is supported")
    nv = nf = 0
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
    body = data[end + len(b"end_header\n"):]
    verts = np.frombuffer(body, dtype="<f8", count=nv * 3).reshape(nv, 3).astype(np.float64)
    offset = nv * 24
    faces = np.zeros((nf, 3), dtype=np.int64)
    for i in range(nf):
        count = body[offset]
        if count != 3:
            raise MeshError("only triangular faces are supported")
        faces[i] = np.frombuffer(body, dtype="<i4", count=3, offset=offset + 1)
        offset += 1 + 12
    return Mesh(verts, faces)
