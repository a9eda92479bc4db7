"""FDTD grid holding only far-field pressure, with neighbour corrections and a Mur boundary.

Cell ``a`` stores ``p_a(F_a)``: the pressure at its center due to elements
outside its ``R1``-block. The leapfrog update needs ``p_b(F_a)`` at each face
neighbour ``b``, recovered from the stored ``p_b(F_b)`` as::

    p_b(F_a) = p_b(F_b) - p_b(N_a minus N_b) + p_b(N_b minus N_a)

since ``F_b minus F_a = N_a minus N_b`` and vice versa.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .mesh_geometry import CellBinning

FACE_DIRS = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]])


def cfl_timestep(h: float, c: float) -> float:
    """Largest stable 3D leapfrog step, h / (c sqrt 3)."""
    if h <= 0 or c <= 0:
        raise ValueError("h and c must be positive")
    return h / (c * math.sqrt(3.0))


def discrete_laplacian(field: np.ndarray, cell, h: float) -> float:
    """Seven-point Laplacian at one interior cell."""
    u, v, w = (int(i) for i in cell)
    s = (
        field[u - 1, v, w] + field[u + 1, v, w]
        + field[u, v - 1, w] + field[u, v + 1, w]
        + field[u, v, w - 1] + field[u, v, w + 1]
    )
    return float((s - 6.0 * field[u, v, w]) / (h * h))


def neighbor_sum(field: np.ndarray) -> np.ndarray:
    """Sum of the six face neighbours, wrapping at the array ends."""
    out = np.zeros_like(field)
    for ax in range(3):
        out += np.roll(field, 1, axis=ax)
        out += np.roll(field, -1, axis=ax)
    return out


@dataclass
class FarFieldGrid:
    """Two pressure levels on a uniform cell-centered grid.

    ``periodic`` marks axes that wrap around instead of carrying an
    absorbing layer (used for plane-wave tests).
    """

    shape: tuple[int, int, int]
    h: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    c: float = 343.0
    tau: float | None = None
    periodic: tuple[bool, bool, bool] = (False, False, False)
    cur: np.ndarray = field(init=False)
    prev: np.ndarray = field(init=False)
    step_index: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.origin = np.asarray(self.origin, float)
        if self.tau is None:
            self.tau = cfl_timestep(self.h, self.c)
        if self.tau > cfl_timestep(self.h, self.c) * (1 + 1e-12):
            raise ValueError("time step violates the 3D CFL bound")
        self.cur = np.zeros(self.shape)
        self.prev = np.zeros(self.shape)
        self._build_boundary()

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def courant2(self) -> float:
        return (self.c * self.tau / self.h) ** 2

    def cell_center(self, cell) -> np.ndarray:
        return self.origin + (np.asarray(cell, float) + 0.5) * self.h

    def flat_centers(self, flat_idx) -> np.ndarray:
        return self.cell_center(np.stack(np.unravel_index(np.asarray(flat_idx), self.shape), axis=-1))

    def interior_mask(self) -> np.ndarray:
        m = np.ones(self.shape, bool)
        for ax in range(3):
            if not self.periodic[ax]:
                sl = [slice(None)] * 3
                sl[ax] = 0
                m[tuple(sl)] = False
                sl[ax] = -1
                m[tuple(sl)] = False
        return m

    def _build_boundary(self):
        idx = np.indices(self.shape).reshape(3, -1).T
        off = np.zeros_like(idx)
        for ax in range(3):
            if self.periodic[ax]:
                continue
            off[idx[:, ax] == 0, ax] = 1
            off[idx[:, ax] == self.shape[ax] - 1, ax] = -1
        bnd = np.flatnonzero(np.any(off != 0, axis=1))
        nbr = idx[bnd] + off[bnd]
        dist = self.h * np.linalg.norm(off[bnd], axis=1)
        ct = self.c * self.tau
        self._bnd = bnd
        self._nbr = np.ravel_multi_index(nbr.T, self.shape) if len(bnd) else bnd
        self._kappa = (ct - dist) / (ct + dist)
        self._interior = self.interior_mask()

    def advance(self, new: np.ndarray) -> None:
        self.prev, self.cur = self.cur, new
        self.step_index += 1


def apply_abc(grid: FarFieldGrid, new: np.ndarray) -> np.ndarray:
    """First-order Mur update of the outer layer of ``new`` (level n+1) in place.

    ``p_B^{n+1} = p_I^n + k (p_I^{n+1} - p_B^n)``, ``k = (c tau - d)/(c tau + d)``,
    with I the inward neighbour (diagonal at edges and corners) at distance d.
    """
    b, i = grid._bnd, grid._nbr
    if len(b):
        cur = grid.cur.ravel()
        nf = new.reshape(-1)
        nf[b] = cur[i] + grid._kappa * (nf[i] - cur[b])
    return new


def fdtd_far_step(grid: FarFieldGrid, laplacian_correction: np.ndarray | None = None) -> FarFieldGrid:
    """One leapfrog step of the far-field levels.

    ``laplacian_correction`` is the per-cell sum over the six neighbours of
    ``p_b(F_a) - p_b(F_b)`` (pressure units, not divided by h^2).
    """
    cur, prev = grid.cur, grid.prev
    lap = neighbor_sum(cur) - 6.0 * cur
    if laplacian_correction is not None:
        lap = lap + laplacian_correction.reshape(grid.shape)
    new = np.where(grid._interior, 2.0 * cur - prev + grid.courant2 * lap, 0.0)
    apply_abc(grid, new)
    grid.advance(new)
    return grid


# ---------------------------------------------------------------------------
# Neighbour corrections
# ---------------------------------------------------------------------------


def corrected_neighbor_value(
    a,
    b,
    grid: FarFieldGrid,
    contribution: Callable[[tuple, Iterable[int]], float],
    binning: CellBinning,
    R1: int = 3,
) -> float:
    """``p_b(F_a)`` from b's stored far value and the two slab differences.

    ``contribution(cell, ids)`` returns the summed pressure of the given
    elements at the center of ``cell`` for the current level.
    """
    from .mesh_geometry import neighbor_elements

    a = tuple(int(i) for i in a)
    b = tuple(int(i) for i in b)
    Na = neighbor_elements(a, R1, binning)
    Nb = neighbor_elements(b, R1, binning)
    value = float(grid.cur[b])
    if Na - Nb:
        value -= contribution(b, Na - Nb)
    if Nb - Na:
        value += contribution(b, Nb - Na)
    return value


def fd_correction_triplets(binning: CellBinning, grid: FarFieldGrid, R1: int = 3):
    """Sparse description of all Laplacian corrections.

    Returns ``(row, cell, elem, coef)``: cell ``row`` receives
    ``coef * p_cell(elem)``. Only interior rows are emitted.
    """
    half = (R1 - 1) // 2
    shape = np.asarray(grid.shape)
    q = binning.cell_of_element
    M = len(q)
    rng = np.arange(-half, half + 1)
    block = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), -1).reshape(-1, 3)
    rows, cells, elems, coefs = [], [], [], []
    interior = grid.interior_mask()
    for sign, inside_is in ((-1.0, "row"), (1.0, "cell")):
        # sign -1: e in N_row, not in N_cell;  sign +1: e in N_cell, not in N_row
        base = q[:, None, None, :] + block[None, :, None, :]  # the cell whose block contains e
        other = base + FACE_DIRS[None, None, :, :]
        base = np.broadcast_to(base, other.shape)
        e = np.broadcast_to(np.arange(M)[:, None, None], other.shape[:3])
        outside = np.abs(other - q[:, None, None, :]).max(-1) > half
        ok = outside & np.all((base >= 0) & (base < shape), -1) & np.all((other >= 0) & (other < shape), -1)
        base, other, e = base[ok], other[ok], e[ok]
        row, cell = (base, other) if inside_is == "row" else (other, base)
        rflat = np.ravel_multi_index(row.T, grid.shape)
        keep = interior.ravel()[rflat]
        rows.append(rflat[keep])
        cells.append(np.ravel_multi_index(cell.T, grid.shape)[keep])
        elems.append(e[keep])
        coefs.append(np.full(keep.sum(), sign))
    return (np.concatenate(rows), np.concatenate(cells), np.concatenate(elems), np.concatenate(coefs))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def field_slice(grid_field: np.ndarray, axis: str | int, index: int) -> np.ndarray:
    ax = "xyz".index(axis) if isinstance(axis, str) else int(axis)
    return np.take(grid_field, index, axis=ax)


def write_pgm(path, image: np.ndarray, pmax: float | None = None, signed: bool = True) -> None:
    """ASCII PGM (P2); values in [-pmax, pmax] (or [0, pmax] unsigned) map linearly to [0, 255]."""
    image = np.asarray(image, float)
    if pmax is None:
        pmax = float(np.abs(image).max()) or 1.0
    if signed:
        g = np.clip(np.rint((image / pmax + 1.0) * 127.5), 0, 255).astype(int)
    else:
        g = np.clip(np.rint(image / pmax * 255.0), 0, 255).astype(int)
    with open(path, "w") as fh:
        fh.write(f"P2\n{g.shape[1]} {g.shape[0]}\n255\n")
        for row in g:
            fh.write(" ".join(str(v) for v in row) + "\n")


def write_slice_csv(path, grid_field: np.ndarray, axis: str | int, index: int) -> None:
    ax = "xyz".index(axis) if isinstance(axis, str) else int(axis)
    sl = field_slice(grid_field, ax, index)
    others = [k for k in range(3) if k != ax]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", "w", "p"])
        for i in range(sl.shape[0]):
            for j in range(sl.shape[1]):
                cell = [0, 0, 0]
                cell[ax], cell[others[0]], cell[others[1]] = index, i, j
                w.writerow([*cell, repr(float(sl[i, j]))])
