import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bemfdtd.farfield_grid import FarFieldGrid
from bemfdtd.mesh_geometry import (
    BinningError,
    ElementSet,
    MeshError,
    TriangleMesh,
    bin_elements,
    box_mesh,
    icosphere,
    load_obj,
    neighbor_elements,
    point_triangle_distance,
    quadrature_points,
    remesh_to_grid,
    save_obj,
    subdivided_rule,
)

CUBE_OBJ = """\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


def test_load_cube_obj(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    mesh = load_obj(p)
    assert mesh.n_triangles == 12
    assert mesh.areas().sum() == pytest.approx(6.0)


def test_quad_face_fan_triangulated(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/1 3/3/1 4/4/1\n")
    mesh = load_obj(p)
    assert mesh.n_triangles == 2
    assert mesh.areas().sum() == pytest.approx(1.0)


def test_load_obj_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_obj(tmp_path / "missing.obj")
    p = tmp_path / "line.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nf 1 2\n")
    with pytest.raises(MeshError):
        load_obj(p)
    p.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(MeshError):
        load_obj(p)


def test_icosphere_obj_roundtrip(tmp_path):
    mesh = icosphere(2, 0.5)
    p = tmp_path / "ico.obj"
    save_obj(mesh, p)
    back = load_obj(p)
    assert back.n_triangles == 320
    assert back.areas().sum() == pytest.approx(4 * math.pi * 0.25, rel=0.05)


def test_icosphere_normals_outward():
    el = ElementSet.from_mesh(icosphere(2, 1.0, (1.0, 2.0, 3.0)))
    radial = el.centers - np.array([1.0, 2.0, 3.0])
    assert np.all(np.einsum("ij,ij->i", radial, el.normals) > 0)


def test_box_mesh_closed_and_outward():
    el = ElementSet.from_mesh(box_mesh((1, 2, 3)))
    assert el.areas.sum() == pytest.approx(2 * (2 + 3 + 6))
    assert np.all(np.einsum("ij,ij->i", el.centers, el.normals) > 0)


def test_remesh_unchanged_when_fine():
    mesh = icosphere(3, 0.1)
    assert mesh.edge_lengths().max() < 0.05
    out = remesh_to_grid(mesh, 0.05)
    assert out.n_triangles == mesh.n_triangles
    np.testing.assert_array_equal(out.vertices, mesh.vertices)


def test_remesh_equilateral_splits_into_four(unit_triangle):
    out = remesh_to_grid(unit_triangle, 0.6)
    assert out.n_triangles == 4
    np.testing.assert_allclose(out.edge_lengths().max(), 0.5)
    np.testing.assert_array_equal(out.parent, 0)


def test_remesh_icosphere_constraint_and_area():
    mesh = icosphere(1, 0.35)
    assert mesh.edge_lengths().max() == pytest.approx(0.2164, abs=1e-3)
    out = remesh_to_grid(mesh, 0.06)
    assert out.edge_lengths().max() < 0.06
    assert out.areas().sum() == pytest.approx(mesh.areas().sum(), rel=1e-9)
    # original vertices survive
    d = np.linalg.norm(out.vertices[None] - mesh.vertices[:, None], axis=2).min(axis=1)
    assert d.max() == 0.0


def test_remesh_rejects_bad_h(unit_triangle):
    with pytest.raises(ValueError):
        remesh_to_grid(unit_triangle, 0.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.9), st.lists(st.floats(-1, 1), min_size=9, max_size=9))
def test_remesh_property(h, coords):
    v = np.array(coords).reshape(3, 3)
    area = 0.5 * np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0]))
    if area < 1e-3:
        return
    mesh = TriangleMesh(v, [[0, 1, 2]])
    out = remesh_to_grid(mesh, h)
    assert out.edge_lengths().max() < h
    assert out.areas().sum() == pytest.approx(area, rel=1e-9)


def test_quadrature_rules(unit_triangle):
    el = ElementSet.from_mesh(unit_triangle)[0]
    q1 = quadrature_points(el, 1)
    np.testing.assert_allclose(q1.points, [el.center])
    np.testing.assert_array_equal(q1.weights, [1.0])
    q3 = quadrature_points(el, 3)
    np.testing.assert_allclose(q3.weights, [1 / 3] * 3)
    np.testing.assert_allclose(q3.points[0], 2 / 3 * el.vertices[0] + 1 / 6 * (el.vertices[1] + el.vertices[2]))
    for q in (q1, q3):
        assert el.area * q.weights.sum() == pytest.approx(el.area)
    with pytest.raises(ValueError):
        quadrature_points(el, 2)


def test_subdivided_rule_exact_for_linears():
    pts, w = subdivided_rule(3, 2)
    assert len(pts) == 48
    assert w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(w @ pts, [1 / 3] * 3)


def test_point_triangle_distance():
    tri = np.array([[[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]])
    assert point_triangle_distance(np.array([0.2, 0.2, 0.5]), tri)[0] == pytest.approx(0.5)
    assert point_triangle_distance(np.array([2.0, 0, 0]), tri)[0] == pytest.approx(1.0)
    assert point_triangle_distance(np.array([-1.0, -1, 0]), tri)[0] == pytest.approx(math.sqrt(2))


def _one_element_at(center, grid):
    c = np.asarray(center, float)
    tri = c + 1e-3 * np.array([[-1.0, -1, 0], [2, -1, 0], [-1, 2, 0]]) / 1.0
    return ElementSet(tri[None], np.array([[0, 1, 2]]))


def test_bin_cell_center_and_face_tie():
    grid = FarFieldGrid((10, 10, 10), 0.1)
    el = _one_element_at(grid.cell_center((3, 4, 5)), grid)
    np.testing.assert_array_equal(bin_elements(el, grid).cell_of_element[0], [3, 4, 5])
    # center exactly on the face x = 0.375 between cells 2 and 3 (h = 0.125)
    grid = FarFieldGrid((10, 10, 10), 0.125)
    tri = np.array([[[0.375, 0.5, 0.5], [0.375, 0.5625, 0.5], [0.375, 0.5, 0.5625]]])
    el = ElementSet(tri, np.array([[0, 1, 2]]))
    assert el.centers[0, 0] == 0.375
    assert bin_elements(el, grid).cell_of_element[0, 0] == 3


def test_bin_rejects_boundary_layer():
    grid = FarFieldGrid((10, 10, 10), 0.1)
    el = _one_element_at(grid.cell_center((0, 4, 5)), grid)
    with pytest.raises(BinningError, match="element 0"):
        bin_elements(el, grid)


def test_binning_partition_sphere_32():
    h = 0.7 / 32
    grid = FarFieldGrid((32, 32, 32), h)
    el = ElementSet.from_mesh(icosphere(2, 0.7 / 12, (0.35,) * 3))
    b = bin_elements(el, grid)
    sets = b.elements_in_cell
    assert sum(len(s) for s in sets.values()) == 320
    assert set().union(*sets.values()) == set(range(320))
    for cell, s in sets.items():
        assert set(b.elements_in(cell).tolist()) == s


def test_neighbor_elements():
    h = 0.7 / 32
    grid = FarFieldGrid((32, 32, 32), h)
    el = ElementSet.from_mesh(icosphere(2, 0.7 / 12, (0.35,) * 3))
    b = bin_elements(el, grid)
    cell = tuple(b.cell_of_element[0])
    assert neighbor_elements(cell, 1, b) == frozenset(b.elements_in(cell).tolist())
    for R in (1, 3, 5):
        assert neighbor_elements(cell, R, b) <= neighbor_elements(cell, R + 2, b)
    with pytest.raises(ValueError):
        neighbor_elements(cell, 4, b)
    empty = bin_elements(ElementSet(np.zeros((0, 3, 3)), np.zeros((0, 3))), grid)
    assert neighbor_elements((5, 5, 5), 3, empty) == frozenset()


def test_neighbor_single_element():
    grid = FarFieldGrid((10, 10, 10), 0.1)
    el = _one_element_at(grid.cell_center((4, 4, 4)), grid)
    b = bin_elements(el, grid)
    assert neighbor_elements((5, 5, 5), 3, b) == {0}
    assert neighbor_elements((6, 4, 4), 3, b) == frozenset()


def test_slab_property_face_neighbours():
    h = 0.7 / 32
    grid = FarFieldGrid((32, 32, 32), h)
    el = ElementSet.from_mesh(icosphere(2, 0.7 / 12, (0.35,) * 3))
    b = bin_elements(el, grid)
    rng = np.random.default_rng(3)
    for _ in range(30):
        a = np.array(b.cell_of_element[rng.integers(320)]) + rng.integers(-2, 3, 3)
        ax = rng.integers(3)
        d = np.zeros(3, int)
        d[ax] = 1
        Na, Nb = neighbor_elements(a, 3, b), neighbor_elements(a + d, 3, b)
        for e in Na - Nb:
            assert b.cell_of_element[e][ax] == a[ax] - 1
        for e in Nb - Na:
            assert b.cell_of_element[e][ax] == a[ax] + 2
