import numpy as np
import pytest

from bemfdtd.farfield_grid import FarFieldGrid
from bemfdtd.mesh_geometry import ElementSet, TriangleMesh, icosphere


@pytest.fixture
def unit_triangle():
    return TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]]), np.array([[0, 1, 2]]))


def small_sphere(n=16, level=1, frac=0.25):
    """Icosphere of diameter ``frac`` of a unit-h grid of size n, centered."""
    h = 0.02
    grid = FarFieldGrid((n, n, n), h)
    mesh = icosphere(level, 0.5 * frac * n * h, (0.5 * n * h,) * 3)
    return ElementSet.from_mesh(mesh), grid
