import numpy as np
import pytest

from s2fpn.icomesh import build_mesh, compute_geometry
from s2fpn.model import build_level_ops


@pytest.fixture(scope="session")
def meshes():
    return {level: build_mesh(level) for level in range(6)}


@pytest.fixture(scope="session")
def geometries(meshes):
    return {level: compute_geometry(mesh) for level, mesh in meshes.items()}


@pytest.fixture(scope="session")
def level_ops(meshes):
    return {level: build_level_ops(meshes[level]) for level in range(1, 6)}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
