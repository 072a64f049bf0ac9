"""Level-transition operators and equirectangular input sampling.

Two down-sampling modes (keep shared vertices, or average over their fine
one-ring) and two up-sampling modes (zero-fill new vertices, or interpolate
between the two parents).  Zero-fill is the mode that turns constants into
dotted patterns; the mesh convolution's derivative stencils amplify those
dots into ring artifacts, which is why interpolation is the default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, InputError
from .icomesh import IcoMesh, MeshGeometry, vertex_count
from .signal import MeshSignal
from .sphops import SparseOperator

DOWN_MODES = ("drop", "average")
UP_MODES = ("zeropad", "bilinear")


@dataclass(frozen=True)
class ResampleSpec:
    """One row of the up/down-sampling design space."""

    down_mode: str = "average"
    up_mode: str = "bilinear"
    swapped: bool = True  # convolve before the level transition

    def __post_init__(self):
        if self.down_mode not in DOWN_MODES:
            raise InputError(f"down_mode must be one of {DOWN_MODES}")
        if self.up_mode not in UP_MODES:
            raise InputError(f"up_mode must be one of {UP_MODES}")


def assemble_downsample(mesh_fine: IcoMesh, mode: str) -> SparseOperator:
    """Operator mapping level-``l`` signals to level-``(l-1)``.

    ``drop`` selects the shared prefix vertices.  ``average`` takes the
    uniform mean over each shared vertex and its fine-mesh one-ring (weights
    1/7, or 1/6 at the twelve degree-5 vertices), so every row is convex.
    """
    if mesh_fine.level < 1:
        raise AssemblyError("level-0 mesh has no coarser level")
    if mode not in DOWN_MODES:
        raise InputError(f"unknown down-sampling mode {mode!r}")
    n_coarse = vertex_count(mesh_fine.level - 1)
    n_fine = mesh_fine.n_vertices

    if mode == "drop":
        m = sp.csr_matrix(
            (np.ones(n_coarse), np.arange(n_coarse), np.arange(n_coarse + 1)),
            shape=(n_coarse, n_fine))
        return SparseOperator(m)

    rows, cols, vals = [], [], []
    for i in range(n_coarse):
        ring = np.concatenate([[i], mesh_fine.neighbors(i)])
        rows.append(np.full(ring.shape[0], i, dtype=np.int64))
        cols.append(np.sort(ring))
        vals.append(np.full(ring.shape[0], 1.0 / ring.shape[0]))
    m = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_coarse, n_fine))
    return SparseOperator(m)


def assemble_upsample(mesh_fine: IcoMesh, mode: str) -> SparseOperator:
    """Operator mapping level-``(l-1)`` signals to level-``l``.

    Shared vertices are copied with weight one in both modes.  New vertices
    get an empty row (``zeropad``) or half of each parent (``bilinear``).
    """
    if mesh_fine.level < 1:
        raise AssemblyError("level-0 mesh has no finer ancestor")
    if mode not in UP_MODES:
        raise InputError(f"unknown up-sampling mode {mode!r}")
    n_coarse = vertex_count(mesh_fine.level - 1)
    n_fine = mesh_fine.n_vertices
    parents = mesh_fine.parent_edge
    if parents.shape[0] != n_fine - n_coarse:
        raise AssemblyError("fine mesh is missing subdivision lineage")

    rows = [np.arange(n_coarse)]
    cols = [np.arange(n_coarse)]
    vals = [np.ones(n_coarse)]
    if mode == "bilinear":
        new = np.arange(n_coarse, n_fine)
        rows.append(np.repeat(new, 2))
        cols.append(parents.ravel())
        vals.append(np.full(2 * (n_fine - n_coarse), 0.5))
    m = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_fine, n_coarse))
    return SparseOperator(m)


def sample_equirectangular(image: np.ndarray, mesh: IcoMesh,
                           interp: str = "bilinear",
                           geometry: MeshGeometry | None = None) -> MeshSignal:
    """Sample an equirectangular image at every mesh vertex.

    The grid registers pixel centers at ``lat = pi/2 * (1 - (2r + 1)/H)`` and
    ``lon = -pi + pi * (2c + 1)/W``: rows sweep latitude from north to south,
    columns sweep longitude with periodic wrap.  ``bilinear`` blends the four
    surrounding pixels (rows clamped at the poles, columns wrapped);
    ``nearest`` picks the closest pixel with ties toward the smaller row,
    then the smaller column.

    ``image`` is ``(H, W)`` or ``(H, W, C)``; the result keeps the input
    dtype for nearest sampling so integer label maps stay integral.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[0] < 2 or image.shape[1] < 2:
        raise InputError("image must be at least 2 x 2 with optional channels")
    if interp not in ("bilinear", "nearest"):
        raise InputError(f"unknown interpolation {interp!r}")
    if geometry is None:
        from .icomesh import compute_geometry

        geometry = compute_geometry(mesh)
    height, width = image.shape[:2]

    lat = geometry.latlon[:, 0]
    lon = geometry.latlon[:, 1]
    rf = (height * (1.0 - 2.0 * lat / np.pi) - 1.0) / 2.0
    cf = (width * (lon + np.pi) / np.pi - 1.0) / 2.0

    if interp == "nearest":
        r = np.clip(np.ceil(rf - 0.5), 0, height - 1).astype(np.int64)
        c = np.ceil(cf - 0.5).astype(np.int64) % width
        out = image[r, c, :]
    else:
        r0 = np.floor(rf).astype(np.int64)
        c0 = np.floor(cf).astype(np.int64)
        tr = (rf - r0)[:, None]
        tc = (cf - c0)[:, None]
        r0c = np.clip(r0, 0, height - 1)
        r1c = np.clip(r0 + 1, 0, height - 1)
        c0w = c0 % width
        c1w = (c0 + 1) % width
        out = ((1 - tr) * (1 - tc) * image[r0c, c0w, :]
               + (1 - tr) * tc * image[r0c, c1w, :]
               + tr * (1 - tc) * image[r1c, c0w, :]
               + tr * tc * image[r1c, c1w, :])

    return MeshSignal(level=mesh.level, values=out.T[None, :, :])
