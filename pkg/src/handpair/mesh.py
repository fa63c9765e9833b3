"""Triangle-mesh container and the geometry ops shared across modules.

Vertices are meters; faces are counter-clockwise when viewed from outside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ZeroAreaStar
from .rotations import MIRROR_MAT


@dataclass
class HandMesh:
    vertices: np.ndarray          # (V, 3) float
    faces: np.ndarray             # (F, 3) int, CCW outward
    normals: np.ndarray = field(default=None)  # (V, 3) unit, area-weighted

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.faces)
        else:
            self.normals = np.asarray(self.normals, dtype=float)

    def validate(self) -> None:
        if not np.isfinite(self.vertices).all():
            raise ValueError("non-finite vertices")
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=-1) >= len(self.vertices):
            raise ValueError("face index out of range")
        norms = np.linalg.norm(self.normals, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("normals not unit length")


def face_normals_areas(vertices: np.ndarray, faces: np.ndarray):
    """Unnormalized face normals (cross product) and triangle areas."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    cross = np.cross(v1 - v0, v2 - v0)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    return cross, areas


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals, normalized to unit length.

    The unnormalized face cross products already carry the area weighting;
    each vertex accumulates the cross products of its incident faces.
    Raises ZeroAreaStar if any accumulated normal has norm < 1e-12.
    """
    cross, _ = face_normals_areas(vertices, faces)
    acc = np.zeros_like(vertices, dtype=float)
    for k in range(3):
        np.add.at(acc, faces[:, k], cross)
    norms = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise ZeroAreaStar(f"degenerate vertex star(s) at indices {bad[:8].tolist()}")
    return acc / norms[:, None]


def mirror_mesh(mesh: HandMesh) -> HandMesh:
    """x-negated copy with face orientation flipped (stays outward-CCW)."""
    verts = mesh.vertices @ MIRROR_MAT.T
    faces = mesh.faces[:, ::-1].copy()
    return HandMesh(verts, faces)


def sample_surface_points(meshes, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform surface samples over the union of ``meshes``.

    Deterministic for a given seed: triangle choice is multinomial in the
    concatenated area table, positions use the sqrt barycentric trick.
    """
    if isinstance(meshes, HandMesh):
        meshes = [meshes]
    tri_verts = []
    for m in meshes:
        tri_verts.append(m.vertices[m.faces])
    tris = np.concatenate(tri_verts, axis=0)         # (F, 3, 3)
    _, areas = face_normals_areas(
        np.concatenate([m.vertices for m in meshes]),
        _offset_faces(meshes),
    )
    probs = areas / areas.sum()
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 0x5A3E]))
    idx = rng.choice(len(tris), size=n, p=probs)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    chosen = tris[idx]
    return a[:, None] * chosen[:, 0] + b[:, None] * chosen[:, 1] + c[:, None] * chosen[:, 2]


def _offset_faces(meshes) -> np.ndarray:
    out, off = [], 0
    for m in meshes:
        out.append(m.faces + off)
        off += len(m.vertices)
    return np.concatenate(out, axis=0)


def write_obj(path, mesh: HandMesh) -> None:
    """ASCII OBJ export: v/f records, 1-based indices, fixed float format."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path) -> HandMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return HandMesh(np.array(verts), np.array(faces))


def edge_manifold_ok(faces: np.ndarray) -> bool:
    """True when every directed edge has exactly one opposite twin."""
    edges = {}
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edges[(a, b)] = edges.get((a, b), 0) + 1
    for (a, b), count in edges.items():
        if count != 1 or edges.get((b, a), 0) != 1:
            return False
    return True


def min_vertex_distance(mesh_a: HandMesh, mesh_b: HandMesh) -> float:
    """Minimum vertex-to-vertex distance between two meshes, meters."""
    from scipy.spatial import cKDTree

    tree = cKDTree(mesh_b.vertices)
    d, _ = tree.query(mesh_a.vertices, k=1)
    return float(d.min())
