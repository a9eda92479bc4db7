import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bemfdtd.farfield_grid import (
    FarFieldGrid,
    apply_abc,
    cfl_timestep,
    corrected_neighbor_value,
    discrete_laplacian,
    fd_correction_triplets,
    fdtd_far_step,
    write_pgm,
    write_slice_csv,
)
from bemfdtd.mesh_geometry import ElementSet, bin_elements, box_mesh, icosphere, neighbor_elements, remesh_to_grid
from bemfdtd.sources_bc import MonopoleSource, monopole_neumann
from measure import oracle_driven_grid, plane_wave_speed, pulse_reflection_1d, seed_cells, seeded_solver, zero_input_run

H = 0.7 / 32


def test_cfl_timestep():
    assert cfl_timestep(0.01, 343.0) == pytest.approx(1.6833e-5, rel=1e-4)
    assert cfl_timestep(0.02, 343.0) == pytest.approx(2 * cfl_timestep(0.01, 343.0))
    assert cfl_timestep(math.sqrt(3), 1.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        cfl_timestep(0.0, 343.0)


def test_grid_rejects_cfl_violation():
    with pytest.raises(ValueError):
        FarFieldGrid((8, 8, 8), 0.01, tau=2e-5)


def test_discrete_laplacian_examples():
    idx = np.indices((6, 6, 6)).astype(float) * 0.1
    x = idx[0]
    assert discrete_laplacian(np.full((6, 6, 6), 3.0), (2, 3, 3), 0.1) == 0.0
    assert discrete_laplacian(x, (2, 3, 3), 0.1) == pytest.approx(0.0, abs=1e-12)
    assert discrete_laplacian(x**2, (2, 3, 3), 0.1) == pytest.approx(2.0, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=10, max_size=10))
def test_laplacian_exact_on_quadratics(c):
    h = 0.05
    X = np.indices((5, 5, 5)).astype(float) * h
    x, y, z = X
    f = c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * x + c[5] * y * y + c[6] * z * z + c[7] * x * y + c[8] * y * z + c[9] * x * z
    assert discrete_laplacian(f, (2, 2, 2), h) == pytest.approx(2 * (c[4] + c[5] + c[6]), abs=1e-8)


def test_zero_field_stays_zero():
    g = FarFieldGrid((10, 10, 10), 0.01)
    for _ in range(5):
        fdtd_far_step(g, np.zeros(g.n_cells))
    assert not g.cur.any() and g.step_index == 5


def test_plane_wave_speed():
    for kvec in ((1, 0, 0), (0, 1, 0), (1, 1, 1)):
        assert abs(plane_wave_speed(kvec) - 1.0) < 0.02


def test_abc_coefficient_and_zero_boundary():
    g = FarFieldGrid((8, 8, 8), 0.01)
    face = np.flatnonzero(np.abs(g._nbr - g._bnd) == 64)[0]
    ct = g.c * g.tau
    assert g._kappa[face] == pytest.approx((ct - 0.01) / (ct + 0.01))
    new = np.zeros(g.shape)
    assert not apply_abc(g, new).any()
    # c tau = h gives a zero coefficient: the boundary copies the inward neighbour's old value
    assert (1.0 * 0.01 - 0.01) / (1.0 * 0.01 + 0.01) == 0.0


def test_abc_reflection_1d():
    assert pulse_reflection_1d() < 0.05


def test_step_linearity():
    rng = np.random.default_rng(1)
    shape = (12, 12, 12)
    a, b, ab = (FarFieldGrid(shape, 0.01) for _ in range(3))
    for g in (a, b):
        g.cur, g.prev = rng.normal(size=shape), rng.normal(size=shape)
    ab.cur, ab.prev = a.cur + 2 * b.cur, a.prev + 2 * b.prev
    ca, cb = rng.normal(size=a.n_cells), rng.normal(size=a.n_cells)
    for _ in range(10):
        fdtd_far_step(a, ca)
        fdtd_far_step(b, cb)
        fdtd_far_step(ab, ca + 2 * cb)
    np.testing.assert_allclose(ab.cur, a.cur + 2 * b.cur, rtol=1e-9, atol=1e-9 * np.abs(ab.cur).max())


def test_zero_input_stability():
    m0, mx, _ = zero_input_run(smooth=True)
    assert mx <= m0
    m0, _, late = zero_input_run(smooth=False)
    assert late <= m0


@pytest.fixture(scope="module")
def small_box():
    n = 16
    grid = FarFieldGrid((n, n, n), H)
    mesh = remesh_to_grid(box_mesh((1.2 * H,) * 3, (8 * H,) * 3), H)
    el = ElementSet.from_mesh(mesh)
    assert len(el) <= 50
    return el, grid


def test_corrected_neighbor_value_oracle_seeded(small_box):
    el, grid = small_box
    hs, oracle = seeded_solver(el, grid)
    contrib = lambda cell, ids: oracle.subset_contribution(grid.cell_center(cell), ids)
    M = len(el)
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(40):
        a = np.array([8, 8, 8]) + rng.integers(-3, 4, 3)
        b = a.copy()
        b[rng.integers(3)] += rng.choice([-1, 1])
        seed_cells(hs, oracle, [b])
        got = corrected_neighbor_value(a, b, grid, contrib, hs.binning)
        Fa = set(range(M)) - neighbor_elements(a, 3, hs.binning)
        want = contrib(b, Fa)
        assert got == pytest.approx(want, rel=1e-10, abs=1e-12 * abs(grid.cur[tuple(b)]))
        # round trip from b's perspective back to its stored value
        Na, Nb = neighbor_elements(a, 3, hs.binning), neighbor_elements(b, 3, hs.binning)
        back = got + (contrib(b, Na - Nb) if Na - Nb else 0.0) - (contrib(b, Nb - Na) if Nb - Na else 0.0)
        assert back == pytest.approx(grid.cur[tuple(b)], rel=1e-10)
        checked += bool(Na ^ Nb)
    assert checked > 5


def test_corrected_neighbor_value_trivial_cases(small_box):
    el, grid = small_box
    g = FarFieldGrid(grid.shape, grid.h)
    g.cur[2, 2, 2] = 0.7
    b = bin_elements(el, g)
    # far from the box both near sets are empty, so the value is untouched
    assert corrected_neighbor_value((2, 2, 3), (2, 2, 2), g, lambda c, ids: 1 / 0, b) == 0.7
    empty = bin_elements(ElementSet(np.zeros((0, 3, 3)), np.zeros((0, 3))), g)
    g0 = FarFieldGrid(grid.shape, grid.h)
    assert corrected_neighbor_value((5, 5, 5), (5, 5, 6), g0, lambda c, ids: 1 / 0, empty) == 0.0


def test_fd_triplets_match_corrected_values(small_box):
    el, grid = small_box
    hs, oracle = seeded_solver(el, grid)
    cells = [tuple(c) for c in np.ndindex(grid.shape) if all(3 <= i <= 12 for i in c)]
    seed_cells(hs, oracle, cells)
    contrib = lambda cell, ids: oracle.subset_contribution(grid.cell_center(cell), ids)
    corr = hs.laplacian_correction(hs.pair_contributions()).reshape(grid.shape)
    for a in [(8, 8, 8), (6, 8, 9), (10, 7, 8), (5, 5, 5)]:
        total = 0.0
        for d in np.vstack([np.eye(3, dtype=int), -np.eye(3, dtype=int)]):
            b = tuple(np.array(a) + d)
            total += corrected_neighbor_value(a, b, grid, contrib, hs.binning) - grid.cur[b]
        assert corr[a] == pytest.approx(total, rel=1e-10, abs=1e-14)


def test_triplet_rows_only_interior(small_box):
    el, grid = small_box
    rows, cells, elems, coefs = fd_correction_triplets(bin_elements(el, grid), grid)
    assert np.all(grid.interior_mask().ravel()[rows])
    assert set(np.unique(coefs)) <= {-1.0, 1.0}


def test_grid_vs_oracle_150_steps():
    n = 24
    grid = FarFieldGrid((n, n, n), H)
    c = np.full(3, n * H / 2)
    el = ElementSet.from_mesh(remesh_to_grid(icosphere(1, 0.7 / 12, c), H))
    src = MonopoleSource(tuple(c), 1000.0)
    probe = (20, 12, 12)  # 8 cells from the sphere center, 5 from its surface
    got, want = oracle_driven_grid(el, grid, lambda k: monopole_neumann(el, src, k * grid.tau, H), 150, [probe])
    err = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert err <= 0.05


def test_write_pgm_and_slice(tmp_path):
    img = np.array([[-1.0, 0.0], [0.5, 1.0]])
    write_pgm(tmp_path / "a.pgm", img)
    lines = (tmp_path / "a.pgm").read_text().split("\n")
    assert lines[:3] == ["P2", "2 2", "255"]
    assert lines[3].split() == ["0", "128"]
    assert lines[4].split() == ["191", "255"]
    write_pgm(tmp_path / "b.pgm", np.abs(img), signed=False)
    assert (tmp_path / "b.pgm").read_text().split("\n")[3].split() == ["255", "0"]
    field = np.arange(27.0).reshape(3, 3, 3)
    write_slice_csv(tmp_path / "s.csv", field, "y", 1)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["u", "v", "w", "p"]
    assert len(rows) == 10
    assert rows[1] == ["0", "1", "0", "3.0"]
