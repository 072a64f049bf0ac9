"""Sparse differential operators on icosahedral meshes.

Assembles the three operators that parameterize a mesh convolution: the
east-west gradient, the north-south gradient, and the cotangent
Laplace-Beltrami operator.  Per-face gradients come from the piecewise-linear
hat-function basis; per-vertex gradients are the area-weighted average over
incident faces, projected onto local east/north tangent directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, ShapeError
from .icomesh import IcoMesh, MeshGeometry
from .signal import MeshSignal

# Guard against near-degenerate triangle angles.  Icosahedral meshes are
# well-shaped, so this clamp should never bind (asserted in the test suite).
COT_CLAMP = 1e6


@dataclass(frozen=True)
class SparseOperator:
    """CSR linear map between vertex signals.

    Thin wrapper over ``scipy.sparse.csr_matrix`` that exposes the raw CSR
    arrays (``row_offsets``, ``col_indices``, ``values``) for serialization
    and keeps application semantics explicit: channel- and batch-wise sparse
    matrix-vector products along the vertex axis.
    """

    matrix: sp.csr_matrix

    def __post_init__(self):
        m = self.matrix
        if not sp.issparse(m):
            raise TypeError("SparseOperator wraps a scipy sparse matrix")
        if m.format != "csr":
            object.__setattr__(self, "matrix", m.tocsr())
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()

    @classmethod
    def from_arrays(cls, rows, cols, row_offsets, col_indices, values) -> "SparseOperator":
        m = sp.csr_matrix(
            (np.asarray(values, dtype=np.float64),
             np.asarray(col_indices, dtype=np.int64),
             np.asarray(row_offsets, dtype=np.int64)),
            shape=(rows, cols))
        return cls(m)

    @classmethod
    def identity(cls, n: int) -> "SparseOperator":
        return cls(sp.identity(n, dtype=np.float64, format="csr"))

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    @property
    def row_offsets(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def col_indices(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data

    @cached_property
    def transpose(self) -> "SparseOperator":
        return SparseOperator(self.matrix.T.tocsr())

    def astype(self, dtype) -> "SparseOperator":
        """Copy with downcast values (for reduced-precision execution)."""
        return SparseOperator(self.matrix.astype(dtype))

    def apply_array(self, values: np.ndarray) -> np.ndarray:
        """Apply along the last (vertex) axis of ``values``."""
        values = np.asarray(values)
        if values.shape[-1] != self.cols:
            raise ShapeError(f"operator has {self.cols} columns, signal has "
                             f"{values.shape[-1]} vertices")
        lead = values.shape[:-1]
        flat = values.reshape(-1, self.cols)
        out = self.matrix.dot(flat.T).T
        return np.ascontiguousarray(out.reshape(*lead, self.rows))

    def validate(self) -> None:
        """Check the CSR invariants; raises AssertionError on violation."""
        indptr, indices = self.row_offsets, self.col_indices
        assert indptr.shape[0] == self.rows + 1
        assert indptr[0] == 0 and indptr[-1] == self.nnz
        assert np.all(np.diff(indptr) >= 0)
        if self.nnz:
            assert indices.min() >= 0 and indices.max() < self.cols
            for i in range(self.rows):
                row = indices[indptr[i]:indptr[i + 1]]
                assert np.all(np.diff(row) > 0), f"row {i} not strictly increasing"


def apply(op: SparseOperator, signal: MeshSignal) -> MeshSignal:
    """Batch/channel-wise product; infers the output level from ``op.rows``."""
    from .icomesh import level_for_vertex_count

    out = op.apply_array(signal.values)
    level = signal.level if op.rows == op.cols else level_for_vertex_count(op.rows)
    return MeshSignal(level=level, values=out)


@dataclass(frozen=True)
class TangentFrames:
    """Per-vertex east (increasing longitude) and north (increasing latitude)
    unit tangent vectors; zero vectors at the two exact pole vertices."""

    east: np.ndarray
    north: np.ndarray
    pole_mask: np.ndarray


def tangent_frames(mesh: IcoMesh) -> TangentFrames:
    """East/north spherical tangent directions at every vertex.

    East and north are undefined at the poles; those two rows are zeroed and
    flagged in ``pole_mask`` so gradient rows for the poles vanish.
    """
    v = mesh.vertices
    pole_mask = np.abs(v[:, 2]) >= 1.0 - 1e-12

    lon = np.arctan2(v[:, 1], v[:, 0])
    lat = np.arcsin(np.clip(v[:, 2], -1.0, 1.0))
    east = np.stack([-np.sin(lon), np.cos(lon), np.zeros_like(lon)], axis=1)
    north = np.stack([-np.sin(lat) * np.cos(lon),
                      -np.sin(lat) * np.sin(lon),
                      np.cos(lat)], axis=1)
    east[pole_mask] = 0.0
    north[pole_mask] = 0.0
    return TangentFrames(east=east, north=north, pole_mask=pole_mask)


def _zero_row_sums(matrix: sp.csr_matrix) -> sp.csr_matrix:
    """Nudge each row's self entry so the float row sum cancels.

    Analytically every row of the gradient and Laplacian operators sums to
    zero (they annihilate constants).  Assembly leaves rounding residues
    around 1e-16; folding the residue into the diagonal entry makes the
    constant-signal product vanish at machine level.
    """
    matrix = matrix.tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    n = matrix.shape[0]
    indptr, indices, data = matrix.indptr, matrix.indices, matrix.data
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        if lo == hi:
            continue
        row = indices[lo:hi]
        diag = np.searchsorted(row, i)
        if diag == len(row) or row[diag] != i:
            continue
        for _ in range(4):
            residue = data[lo:hi].sum()
            if residue == 0.0:
                break
            data[lo + diag] -= residue
    return matrix


def assemble_gradients(mesh: IcoMesh, geometry: MeshGeometry,
                       frames: TangentFrames) -> tuple[SparseOperator, SparseOperator]:
    """East-west and north-south first-derivative operators.

    Each face carries the constant gradient of the linear interpolant,
    ``sum_u f_u grad(phi_u)`` with ``grad(phi_u) = n x e_u / (2A)`` for the
    edge ``e_u`` opposite vertex ``u``.  Vertex gradients average incident
    face gradients with weights proportional to face area (normalized per
    vertex), then project onto the east/north frame.  Rows of the two pole
    vertices are identically zero.
    """
    f = mesh.faces
    p = mesh.vertices[f]  # (F, 3, 3)
    n_v = mesh.n_vertices

    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    double_area = 2.0 * geometry.face_areas
    if np.any(double_area <= 0.0) or np.any(~np.isfinite(double_area)):
        raise AssemblyError("degenerate face with zero area")
    normal = cross / double_area[:, None]

    # grad(phi_u) for u = 0,1,2 on each face: normal x (opposite edge) / 2A
    edge = np.stack([p[:, 2] - p[:, 1],
                     p[:, 0] - p[:, 2],
                     p[:, 1] - p[:, 0]], axis=1)
    grad_phi = np.cross(normal[:, None, :], edge) / double_area[:, None, None]

    face_area = geometry.face_areas
    weight_sum = np.bincount(f.ravel(), weights=np.repeat(face_area, 3),
                             minlength=n_v)

    # COO triples: receiving vertex r (row), source vertex u (column) and the
    # 3-vector contribution (A_f / W_r) * grad(phi_u).
    rows = np.repeat(f, 3, axis=1).ravel()          # r: each face vertex, 3x
    cols = np.tile(f, (1, 3)).ravel()               # u: cycles over face verts
    coeff = (face_area[:, None] / weight_sum[f])    # (F, 3) per receiving vertex
    vec = coeff[:, :, None, None] * grad_phi[:, None, :, :]  # (F, r, u, 3)
    vec = vec.reshape(-1, 3)

    east_rows = frames.east[rows]
    north_rows = frames.north[rows]
    gx = sp.coo_matrix(((vec * east_rows).sum(axis=1), (rows, cols)),
                       shape=(n_v, n_v)).tocsr()
    gy = sp.coo_matrix(((vec * north_rows).sum(axis=1), (rows, cols)),
                       shape=(n_v, n_v)).tocsr()
    for m in (gx, gy):
        m.eliminate_zeros()  # pole rows project to exact zeros
    return SparseOperator(_zero_row_sums(gx)), SparseOperator(_zero_row_sums(gy))


def assemble_laplacian(mesh: IcoMesh, geometry: MeshGeometry) -> SparseOperator:
    """Cotangent Laplace-Beltrami operator.

    Row ``i`` encodes ``(1 / 2A_i) * sum_j (cot a_ij + cot b_ij) (f_j - f_i)``
    over the one-ring of ``i``; the diagonal makes each row sum cancel.
    """
    f = mesh.faces
    p = mesh.vertices[f]
    n_v = mesh.n_vertices

    rows_list, cols_list, vals_list = [], [], []
    # Corner c of each face contributes cot(angle at c) to the edge (a, b)
    # opposite it.
    for c, (a, b) in enumerate([(1, 2), (2, 0), (0, 1)]):
        u = p[:, a] - p[:, c]
        w = p[:, b] - p[:, c]
        cross_norm = np.linalg.norm(np.cross(u, w), axis=1)
        if np.any(cross_norm <= 0.0):
            raise AssemblyError("degenerate corner angle")
        cot = np.einsum("ij,ij->i", u, w) / cross_norm
        np.clip(cot, -COT_CLAMP, COT_CLAMP, out=cot)
        rows_list += [f[:, a], f[:, b]]
        cols_list += [f[:, b], f[:, a]]
        vals_list += [cot, cot]

    rows = np.concatenate(rows_list)
    cols = np.concatenate(cols_list)
    vals = np.concatenate(vals_list)
    w = sp.coo_matrix((vals, (rows, cols)), shape=(n_v, n_v)).tocsr()
    w.sum_duplicates()

    edge_use = sp.coo_matrix((np.ones_like(vals), (rows, cols)),
                             shape=(n_v, n_v)).tocsr()
    if edge_use.nnz and not np.all(edge_use.data == 2.0):
        raise AssemblyError("non-manifold edge (incident face count != 2)")

    degree = np.asarray(w.sum(axis=1)).ravel()
    lap = w - sp.diags(degree)
    lap = sp.diags(1.0 / (2.0 * geometry.cell_areas)) @ lap
    return SparseOperator(_zero_row_sums(lap.tocsr()))
