"""Icosahedral sphere meshes built by recursive edge-midpoint subdivision.

A level-``l`` mesh is obtained from the unit icosahedron by ``l`` rounds of
subdivision: every edge spawns one new vertex at its re-normalized midpoint
and every face splits into four.  Vertex counts follow ``10 * 4**l + 2``.

The vertex ordering is stable across levels: the first ``n`` vertices of a
level-``(l+1)`` mesh are exactly the vertices of the level-``l`` mesh, and the
new midpoint vertices are appended in sorted-edge order.  Downstream code
relies on this prefix property ("drop" pooling is a prefix slice).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CapacityError

#: Highest supported subdivision level.  Level 7 has 163842 vertices, which
#: keeps full-mesh property tests affordable in memory and time.
MAX_LEVEL = 7


def vertex_count(level: int) -> int:
    """Number of vertices of the level-``level`` mesh: ``10 * 4**level + 2``."""
    return 10 * 4**level + 2


def face_count(level: int) -> int:
    return 20 * 4**level


def edge_count(level: int) -> int:
    return 30 * 4**level


def level_for_vertex_count(n_vertices: int) -> int:
    """Inverse of :func:`vertex_count`; raises if no level matches."""
    for level in range(MAX_LEVEL + 1):
        if vertex_count(level) == n_vertices:
            return level
    raise ValueError(f"no mesh level has {n_vertices} vertices")


@dataclass(frozen=True)
class IcoMesh:
    """Icosahedral mesh at a given subdivision level.

    Attributes
    ----------
    level : int
        Subdivision level (0 is the icosahedron itself).
    vertices : (n_v, 3) float64 array
        Unit vectors, two of them exactly at the poles.
    faces : (n_f, 3) int64 array
        Vertex-index triples with consistent outward (CCW) orientation.
    parent_edge : (n_new, 2) int64 array
        For each vertex created at this level (indices ``n_prev + i``), the
        ordered ``(min, max)`` pair of parent vertices whose midpoint it
        refines.  Empty at level 0.
    adj_indptr, adj_indices : int64 arrays
        CSR layout of the one-ring adjacency; neighbors of vertex ``i`` are
        ``adj_indices[adj_indptr[i]:adj_indptr[i + 1]]``, sorted ascending.
    """

    level: int
    vertices: np.ndarray
    faces: np.ndarray
    parent_edge: np.ndarray
    adj_indptr: np.ndarray
    adj_indices: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_edges(self) -> int:
        return self.adj_indices.shape[0] // 2

    def neighbors(self, vertex: int) -> np.ndarray:
        """Sorted one-ring neighbor indices of ``vertex``."""
        if not 0 <= vertex < self.n_vertices:
            raise IndexError(f"vertex {vertex} out of range [0, {self.n_vertices})")
        return self.adj_indices[self.adj_indptr[vertex]:self.adj_indptr[vertex + 1]]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adj_indptr)

    @cached_property
    def adjacency(self) -> list[np.ndarray]:
        """Per-vertex sorted neighbor lists (a view per vertex)."""
        return [self.neighbors(i) for i in range(self.n_vertices)]


@dataclass(frozen=True)
class MeshGeometry:
    """Per-face and per-vertex measures of an :class:`IcoMesh`.

    ``cell_areas`` uses barycentric cells: one third of the summed areas of
    the faces incident to each vertex.  This partitions the surface exactly,
    so ``cell_areas.sum() == face_areas.sum()`` up to float rounding.
    """

    face_areas: np.ndarray
    cell_areas: np.ndarray
    latlon: np.ndarray  # (n_v, 2): latitude in [-pi/2, pi/2], longitude in [-pi, pi)

    @property
    def surface_area(self) -> float:
        return float(self.face_areas.sum())


def build_icosahedron() -> IcoMesh:
    """Level-0 mesh: 12 vertices, 20 faces, poles exactly at ``(0, 0, +-1)``.

    The 10 non-pole vertices sit on two latitude rings at ``+-atan(1/2)``,
    the upper ring at longitudes ``72k`` degrees and the lower ring offset
    by 36 degrees.  This pins the mesh to the latitude/longitude frame used
    for equirectangular sampling and makes the two pole singularities
    explicit.
    """
    ring_z = 1.0 / math.sqrt(5.0)  # sin(atan(1/2))
    ring_r = 2.0 / math.sqrt(5.0)  # cos(atan(1/2))

    verts = np.zeros((12, 3), dtype=np.float64)
    verts[0] = (0.0, 0.0, 1.0)
    verts[11] = (0.0, 0.0, -1.0)
    for k in range(5):
        upper = 2.0 * math.pi * k / 5.0
        lower = upper + math.pi / 5.0
        verts[1 + k] = (ring_r * math.cos(upper), ring_r * math.sin(upper), ring_z)
        verts[6 + k] = (ring_r * math.cos(lower), ring_r * math.sin(lower), -ring_z)

    faces = []
    for k in range(5):
        k1 = (k + 1) % 5
        u, u1 = 1 + k, 1 + k1  # upper ring
        w, w1 = 6 + k, 6 + k1  # lower ring
        faces.append((0, u, u1))    # cap around north pole
        faces.append((u, w, u1))    # upper band
        faces.append((u1, w, w1))   # lower band
        faces.append((11, w1, w))   # cap around south pole
    faces = np.asarray(faces, dtype=np.int64)

    indptr, indices = _adjacency_from_faces(12, faces)
    return IcoMesh(
        level=0,
        vertices=verts,
        faces=faces,
        parent_edge=np.zeros((0, 2), dtype=np.int64),
        adj_indptr=indptr,
        adj_indices=indices,
    )


def subdivide(mesh: IcoMesh) -> IcoMesh:
    """One subdivision round: midpoint vertices re-projected to the sphere.

    Old vertices keep their indices and coordinates bitwise; one vertex per
    old edge is appended in sorted-edge order; each face splits into four
    with unchanged orientation.
    """
    n_old = mesh.n_vertices
    f = mesh.faces

    # Canonical (min, max) key per face edge; np.unique sorts the keys, which
    # fixes the new-vertex ordering deterministically.
    raw = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    raw.sort(axis=1)
    edges, inverse = np.unique(raw, axis=0, return_inverse=True)
    inverse = inverse.reshape(3, -1)  # midpoint index (offset by n_old) per face edge

    mid = mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    vertices = np.concatenate([mesh.vertices, mid], axis=0)

    m01 = n_old + inverse[0]
    m12 = n_old + inverse[1]
    m20 = n_old + inverse[2]
    corner0 = np.stack([f[:, 0], m01, m20], axis=1)
    corner1 = np.stack([m01, f[:, 1], m12], axis=1)
    corner2 = np.stack([m20, m12, f[:, 2]], axis=1)
    center = np.stack([m01, m12, m20], axis=1)
    faces = np.concatenate([corner0, corner1, corner2, center], axis=0)

    indptr, indices = _adjacency_from_faces(vertices.shape[0], faces)
    return IcoMesh(
        level=mesh.level + 1,
        vertices=vertices,
        faces=faces,
        parent_edge=edges.astype(np.int64),
        adj_indptr=indptr,
        adj_indices=indices,
    )


def build_mesh(level: int) -> IcoMesh:
    """Mesh at ``level``, i.e. ``level`` subdivisions of the icosahedron."""
    if level < 0:
        raise ValueError("level must be non-negative")
    if level > MAX_LEVEL:
        raise CapacityError(f"level {level} exceeds the supported cap {MAX_LEVEL}")
    mesh = build_icosahedron()
    for _ in range(level):
        mesh = subdivide(mesh)
    return mesh


def compute_geometry(mesh: IcoMesh) -> MeshGeometry:
    """Face areas, barycentric cell areas and per-vertex (lat, lon)."""
    p = mesh.vertices[mesh.faces]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    face_areas = 0.5 * np.linalg.norm(cross, axis=1)

    thirds = np.repeat(face_areas / 3.0, 3)
    cell_areas = np.bincount(mesh.faces.ravel(), weights=thirds,
                             minlength=mesh.n_vertices)

    lat = np.arcsin(np.clip(mesh.vertices[:, 2], -1.0, 1.0))
    lon = np.arctan2(mesh.vertices[:, 1], mesh.vertices[:, 0])
    lon[lon >= math.pi] -= 2.0 * math.pi  # atan2 returns (-pi, pi]; want [-pi, pi)
    return MeshGeometry(face_areas=face_areas, cell_areas=cell_areas,
                        latlon=np.stack([lat, lon], axis=1))


def ring_neighborhood(mesh: IcoMesh, vertex: int, k: int) -> set[int]:
    """All vertices within graph distance ``k`` of ``vertex`` (inclusive)."""
    if not 0 <= vertex < mesh.n_vertices:
        raise IndexError(f"vertex {vertex} out of range [0, {mesh.n_vertices})")
    if k < 1:
        raise ValueError("k must be positive")
    visited = {vertex}
    frontier = [vertex]
    for _ in range(k):
        nxt = []
        for v in frontier:
            for u in mesh.neighbors(v):
                u = int(u)
                if u not in visited:
                    visited.add(u)
                    nxt.append(u)
        frontier = nxt
    return visited


def graph_distances(mesh: IcoMesh, vertex: int, cutoff: int | None = None) -> np.ndarray:
    """Breadth-first graph distance from ``vertex`` (-1 beyond ``cutoff``)."""
    dist = np.full(mesh.n_vertices, -1, dtype=np.int64)
    dist[vertex] = 0
    frontier = [vertex]
    d = 0
    while frontier and (cutoff is None or d < cutoff):
        d += 1
        nxt = []
        for v in frontier:
            for u in mesh.neighbors(v):
                if dist[u] < 0:
                    dist[u] = d
                    nxt.append(int(u))
        frontier = nxt
    return dist


def export_mesh(mesh: IcoMesh, path) -> None:
    """Write a Wavefront OBJ file (1-based `f` records, fixed formatting).

    The output is byte-deterministic for a given mesh so exports can be
    compared and cached.
    """
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.15f} {y:.15f} {z:.15f}")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def import_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read `v`/`f` records back from an OBJ file (for round-trip checks)."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(t.split("/")[0]) - 1 for t in parts[1:4]])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def _adjacency_from_faces(n_vertices: int, faces: np.ndarray):
    """CSR one-ring adjacency with per-vertex sorted neighbor indices."""
    half = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    both = np.concatenate([half, half[:, ::-1]], axis=0)
    # Each undirected edge appears twice per direction (once per incident
    # face); dedupe and sort lexicographically in one pass.
    both = np.unique(both, axis=0)
    indptr = np.zeros(n_vertices + 1, dtype=np.int64)
    np.add.at(indptr, both[:, 0] + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, both[:, 1].copy()
