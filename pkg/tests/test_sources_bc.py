import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bemfdtd.mesh_geometry import ElementSet, TriangleMesh, icosphere, remesh_to_grid
from bemfdtd.sources_bc import (
    ModalDataError,
    ModalNeumannData,
    MonopoleSource,
    load_modal_neumann,
    monopole_gradient,
    monopole_neumann,
    monopole_pressure,
    ramp_envelope,
    write_modal_neumann,
)


def test_ramp_values():
    assert ramp_envelope(0.0, 1.0) == 0.0
    assert ramp_envelope(1.0, 1.0) == 1.0
    assert ramp_envelope(7.0, 1.0) == 1.0
    assert ramp_envelope(0.5, 1.0) == 0.5
    assert ramp_envelope(0.25, 1.0) == pytest.approx(0.15625)
    with pytest.raises(ValueError):
        ramp_envelope(0.0, -1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 3), st.floats(0.01, 2))
def test_ramp_bounded_monotone(t, T):
    a, b = ramp_envelope(t, T), ramp_envelope(t + 0.01, T)
    assert 0.0 <= a <= b <= 1.0


def test_monopole_pressure_values():
    src = MonopoleSource((0, 0, 0), 1e-9)  # k ~ 0
    assert monopole_pressure([1.0, 0, 0], src, 0.0) == pytest.approx(0.0795775, rel=1e-6)
    src = MonopoleSource((0, 0, 0), 1000.0)
    a1 = abs(complex(np.exp(-1j * src.k) / (4 * math.pi)))
    r = np.array([[1.0, 0, 0], [2.0, 0, 0]])
    ts = np.linspace(0, src.period, 400, endpoint=False)
    amp = np.abs(np.array([monopole_pressure(r, src, t) for t in ts])).max(axis=0)
    assert amp[1] == pytest.approx(amp[0] / 2, rel=1e-4)
    lam = 2 * math.pi / src.k
    assert monopole_pressure([0.3 + lam, 0, 0], src, 0.1) * (0.3 + lam) == pytest.approx(
        monopole_pressure([0.3, 0, 0], src, 0.1) * 0.3, abs=1e-12
    )
    with pytest.raises(ValueError):
        monopole_pressure([0, 0, 0], src, 0.0)


def _one_element(center, normal):
    n = np.asarray(normal, float) / np.linalg.norm(normal)
    u = np.cross(n, [0.3, 0.5, 0.7])
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    c = np.asarray(center, float)
    e = 1e-3
    # centroid exactly at c
    tri = np.array([c + e * u, c - 0.5 * e * u + 0.8660254037844386 * e * w, c - 0.5 * e * u - 0.8660254037844386 * e * w])
    return ElementSet(tri[None], np.array([[0, 1, 2]]))


def test_neumann_static_limits():
    src = MonopoleSource((0, 0, 0), 1e-9)
    h = 0.01
    radial = _one_element([0.5, 0, 0], [1, 0, 0])
    g = monopole_neumann(radial, src, 100.0, h, T_ramp=0.0)[0]
    assert g == pytest.approx(-1 / (4 * math.pi * 0.25), rel=1e-6)
    tangent = _one_element([0.5, 0, 0], [0, 0, 1])
    assert abs(monopole_neumann(tangent, src, 100.0, h, T_ramp=0.0)[0]) < 1e-9


def test_neumann_fd_vs_closed_form():
    src = MonopoleSource((0, 0, 0), 1000.0)
    h = 0.02
    delta = 1e-4 * h
    n = np.array([0.6, 0.0, 0.8])
    for t in (0.0013, 0.0021, 0.0037):
        # at r = 10 h the central difference is within 1e-6 of the closed form
        el = _one_element(10 * h * n, n)
        g = monopole_neumann(el, src, t, h, T_ramp=0.0)[0]
        exact = monopole_gradient(el.centers, src, t)[0] @ el.normals[0]
        assert g == pytest.approx(exact, rel=1e-6)


def test_neumann_fd_truncation_close_to_center():
    # at r = 10 delta the central difference of 1/r is off by delta^2 / (r^2 - delta^2) = 1/99
    src = MonopoleSource((0, 0, 0), 1e-6)
    h = 0.02
    delta = 1e-4 * h
    el = _one_element([10 * delta, 0, 0], [1, 0, 0])
    g = monopole_neumann(el, src, 0.0, h, T_ramp=0.0)[0]
    exact = -1 / (4 * math.pi * (10 * delta) ** 2)
    assert (g - exact) / exact == pytest.approx(1 / 99, rel=1e-6)


def test_neumann_ramped_and_periodic():
    src = MonopoleSource((0.35,) * 3, 1000.0)
    el = ElementSet.from_mesh(icosphere(1, 0.05, (0.35,) * 3))
    assert not monopole_neumann(el, src, 0.0, 0.02).any()
    t = 7.3 * src.period
    a = monopole_neumann(el, src, t, 0.02)
    b = monopole_neumann(el, src, t + src.period, 0.02)
    np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-9 * np.abs(a).max())


@pytest.mark.parametrize("h", [0.02, 0.01])
def test_helmholtz_residual_second_order(h):
    src = MonopoleSource((0, 0, 0), 1000.0)
    x0 = np.array([0.17, 0.05, -0.08])
    res = []
    for hh in (h, h / 2):
        offs = np.vstack([np.zeros(3), np.eye(3) * hh, -np.eye(3) * hh])
        from bemfdtd.sources_bc import monopole_phasor

        p = monopole_phasor(x0 + offs, src)
        lap = (p[1:].sum() - 6 * p[0]) / hh**2
        res.append(abs(lap + src.k**2 * p[0]))
    assert res[0] / res[1] == pytest.approx(4.0, rel=0.05)


def test_load_modal_empty_and_single(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("")
    d = load_modal_neumann(p, 4, n_modes=1)
    assert not d.amplitudes.any()
    p.write_text("0,0,1.0,0.0,440\n")
    d = load_modal_neumann(p, 4)
    assert d.amplitude(0, 0) == 1.0 + 0j
    assert d.frequencies[0] == 440.0
    assert d.amplitude(1, 0) == 0j


def test_load_modal_errors(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("element,mode,real,imag,frequency\n0,0,1,0,440\n1,0,abc,0,440\n")
    with pytest.raises(ModalDataError):
        load_modal_neumann(p, 4)
    p.write_text("9,0,1,0,440\n")
    with pytest.raises(ModalDataError, match="out of range"):
        load_modal_neumann(p, 4)


def test_modal_roundtrip_and_refinement(tmp_path):
    mesh = icosphere(1, 0.1)
    rng = np.random.default_rng(0)
    amps = rng.normal(size=(80, 2)) + 1j * rng.normal(size=(80, 2))
    data = ModalNeumannData(amps, np.array([500.0, 900.0]))
    p = tmp_path / "m.csv"
    write_modal_neumann(p, data)
    back = load_modal_neumann(p, 80)
    np.testing.assert_array_equal(back.amplitudes, amps)
    fine = remesh_to_grid(mesh, 0.03)
    child = data.for_refined(fine.parent)
    ca = fine.areas()
    pa = mesh.areas()
    for parent in (0, 17, 79):
        kids = fine.parent == parent
        np.testing.assert_allclose((ca[kids, None] * child.amplitudes[kids]).sum(0), pa[parent] * amps[parent], rtol=1e-9)


def test_modal_neumann_linear_in_scale():
    data = ModalNeumannData(np.array([[1.0 + 1j], [0.5 + 0j]]), np.array([440.0]))
    t = 0.02
    np.testing.assert_array_equal(data.scaled(2.0).neumann(0, t), 2.0 * data.neumann(0, t))
    assert not data.neumann(0, 0.0).any()
