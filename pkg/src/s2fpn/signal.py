"""Multi-channel scalar fields on mesh vertices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .icomesh import vertex_count


@dataclass
class MeshSignal:
    """Batched multi-channel signal on the vertices of a level mesh.

    ``values`` has shape ``(batch, channels, n_vertices)``; the vertex count
    must match ``10 * 4**level + 2``.
    """

    level: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == 1:
            self.values = self.values[None, None, :]
        elif self.values.ndim == 2:
            self.values = self.values[None, :, :]
        if self.values.ndim != 3:
            raise ShapeError(f"signal values must be 1-3 dimensional, got shape"
                             f" {self.values.shape}")
        if self.values.shape[2] != vertex_count(self.level):
            raise ShapeError(
                f"level-{self.level} signal needs {vertex_count(self.level)} "
                f"vertices, got {self.values.shape[2]}")

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.values.shape[2]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())
