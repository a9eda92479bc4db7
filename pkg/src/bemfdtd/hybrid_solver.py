"""Hybrid boundary-element / far-field-grid time stepping.

One step n:

1. leapfrog the far-field grid to level n, correcting each neighbour value
   to the receiving cell's far set with contributions at level n-1;
2. push the Neumann data g_n and update every element's Dirichlet value
   explicitly (diagonal of I/2 - D_0 only), from a direct near sum over the
   R2-block around the element plus the trilinearly interpolated far value,
   each of the 8 interpolation cells corrected to the element's far set;
3. sample the listeners the same way.

All element-cell couplings live in a single pair table whose contributions
are evaluated once per step; sparse matrices route them to the consumers.
"""

from __future__ import annotations

import csv
import logging
import wave
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .cqm_kernels import (
    CqmConfig,
    WeightCache,
    alphas,
    pair_row_weights,
    point_signature,
    point_weights,
    row_signature,
)
from .farfield_grid import FarFieldGrid, fd_correction_triplets, fdtd_far_step
from .mesh_geometry import CellBinning, ElementSet, bin_elements, block_bounds
from .tdbem_oracle import ElementHistory, contract

log = logging.getLogger(__name__)


class DomainError(ValueError):
    """A point or element is too close to the grid edge for the requested operation."""


class ListenerTap:
    """A listener position and its pressure series (one sample per completed step).

    Samples live in the owning solver's log so thousands of taps stay cheap.
    """

    def __init__(self, position, log: "SampleLog", index: int):
        self.position = np.asarray(position, float)
        self._log, self._index = log, index

    @property
    def samples(self) -> np.ndarray:
        return self._log.column(self._index)


class SampleLog:
    """Append-only rows of listener samples; ``keep_last`` bounds memory to a trailing window."""

    def __init__(self, width: int, keep_last: int | None = None):
        self.width = width
        self.rows = deque(maxlen=keep_last)
        self.count = 0

    def append(self, row: np.ndarray) -> None:
        self.rows.append(np.array(row, float))
        self.count += 1

    def array(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, self.width))
        return np.stack(self.rows)

    def column(self, k: int) -> np.ndarray:
        return np.array([r[k] for r in self.rows])


def trilinear(t: np.ndarray):
    """Base cells and weights of trilinear interpolation between cell centers.

    ``t`` is the position in cell units, ``(x - origin) / h``; returns
    ``cells`` (K, 8, 3) and ``weights`` (K, 8).
    """
    tt = np.atleast_2d(t) - 0.5
    base = np.floor(tt).astype(np.int64)
    f = tt - base
    offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    cells = base[:, None, :] + offs[None]
    w = np.where(offs[None] == 1, f[:, None, :], 1.0 - f[:, None, :]).prod(-1)
    return cells, w


@dataclass
class SplitTables:
    """Near/far routing for a batch of target points."""

    near_rows: np.ndarray
    near_src: np.ndarray
    interp: sp.csr_matrix
    far_rows: np.ndarray
    far_cells: np.ndarray
    far_elems: np.ndarray
    far_coefs: np.ndarray


def split_tables(points: np.ndarray, grid: FarFieldGrid, binning: CellBinning, R1: int, R2: int) -> SplitTables:
    """Near sets, interpolation weights and far-set corrections for target points."""
    points = np.asarray(points, float).reshape(-1, 3)
    K = len(points)
    shape = np.asarray(grid.shape)
    half = (R1 - 1) // 2
    t = (points - grid.origin) / grid.h
    lo, hi = block_bounds(t, R2)
    cells, gam = trilinear(t)
    if np.any(cells < 0) or np.any(cells >= shape):
        k = int(np.flatnonzero(np.any((cells < 0) | (cells >= shape), axis=(1, 2)))[0])
        raise DomainError(f"point {points[k].tolist()} has fewer than 8 surrounding cell centers in the grid")
    flat = np.ravel_multi_index(cells.reshape(-1, 3).T, grid.shape).reshape(K, 8)
    interp = sp.csr_matrix((gam.ravel(), (np.repeat(np.arange(K), 8), flat.ravel())), shape=(K, grid.n_cells))

    ulo = np.minimum(lo, cells[:, 0, :] - half)
    uhi = np.maximum(hi, cells[:, 7, :] + half)
    busy = np.flatnonzero(binning.count_in_boxes(ulo, uhi) > 0)
    near_rows, near_src = [], []
    fr, fc, fe, fk = [], [], [], []
    q = binning.cell_of_element
    for k in busy:
        cand = binning.in_block(ulo[k], uhi[k])
        qc = q[cand]
        in_near = np.all((qc >= lo[k]) & (qc <= hi[k]), axis=1)
        near_rows.append(np.full(in_near.sum(), k))
        near_src.append(cand[in_near])
        for c in range(8):
            in_l = np.abs(qc - cells[k, c]).max(axis=1) <= half
            sub = cand[in_near & ~in_l]  # N_point minus N_l: remove from the stored value
            add = cand[in_l & ~in_near]  # N_l minus N_point: belongs to the point's far set
            for ids, sign in ((sub, -1.0), (add, 1.0)):
                if len(ids):
                    fr.append(np.full(len(ids), k))
                    fc.append(np.full(len(ids), flat[k, c]))
                    fe.append(ids)
                    fk.append(np.full(len(ids), sign * gam[k, c]))

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype)

    return SplitTables(
        cat(near_rows, np.int64), cat(near_src, np.int64), interp,
        cat(fr, np.int64), cat(fc, np.int64), cat(fe, np.int64), cat(fk, float),
    )


class HybridSolver:
    """Far-field grid plus explicit boundary-element update.

    Parameters
    ----------
    elements : ElementSet
    grid : FarFieldGrid
        Its ``tau`` and ``c`` define the time step shared with the boundary side.
    L : int
        History length of the convolution weights.
    R1, R2 : int
        Near ranges in cells for grid cells (odd) and for elements/listeners.
    listeners : sequence of 3D points
    weight_tol : float, optional
        Geometry change (m) above which a cached pair weight is recomputed;
        default ``1e-6 * h``.
    keep_last : int, optional
        Keep only this many trailing listener samples.
    """

    def __init__(self, elements: ElementSet, grid: FarFieldGrid, L: int = 64, R1: int = 3, R2: int = 4,
                 listeners=(), weight_tol: float | None = None, cfg: CqmConfig | None = None,
                 keep_last: int | None = None):
        if R1 < 1 or R1 % 2 == 0:
            raise ValueError("R1 must be odd")
        if R2 < 1:
            raise ValueError("R2 must be >= 1")
        self.grid = grid
        self.cfg = cfg or CqmConfig(tau=grid.tau, L=L, c=grid.c)
        if not np.isclose(self.cfg.tau, grid.tau) or not np.isclose(self.cfg.c, grid.c):
            raise ValueError("boundary and grid time steps / sound speeds differ")
        self.L = self.cfg.L
        self.R1, self.R2 = R1, R2
        tol = 1e-6 * grid.h if weight_tol is None else weight_tol
        self.cell_cache = WeightCache(self.cfg, 9, tol)
        self.row_cache = WeightCache(self.cfg, 18, tol)
        self.listener_cache = WeightCache(self.cfg, 9, tol)
        pts = np.asarray(listeners, float).reshape(-1, 3)
        self.listener_log = SampleLog(len(pts), keep_last)
        self.listeners = [ListenerTap(x, self.listener_log, k) for k, x in enumerate(pts)]
        self.elements = elements
        self.history = ElementHistory(len(elements), self.L)
        self.binning = bin_elements(elements, grid)
        self.step_index = -1
        self.last_phi = np.zeros(len(elements))
        self._build()
        self.contrib_prev = np.zeros(len(self.pair_elem))

    # -- tables ---------------------------------------------------------

    def _build(self):
        el, grid = self.elements, self.grid
        M, K = len(el), len(self.listeners)
        fd = fd_correction_triplets(self.binning, grid, self.R1)
        dt = split_tables(el.centers, grid, self.binning, self.R1, self.R2)
        lp = np.array([t.position for t in self.listeners]).reshape(-1, 3)
        self.listener_points = lp
        lt = split_tables(lp, grid, self.binning, self.R1, self.R2)
        self.dir_tables, self.lis_tables = dt, lt

        cells = np.concatenate([fd[1], dt.far_cells, lt.far_cells])
        elems = np.concatenate([fd[2], dt.far_elems, lt.far_elems])
        keys = (cells.astype(np.int64) << 32) | elems
        uniq, inv = np.unique(keys, return_inverse=True)
        self.pair_cell = (uniq >> 32).astype(np.int64)
        self.pair_elem = (uniq & 0xFFFFFFFF).astype(np.int64)
        P = len(uniq)
        n1, n2 = len(fd[0]), len(dt.far_rows)
        c_fd, c_dir, c_lis = inv[:n1], inv[n1:n1 + n2], inv[n1 + n2:]
        N = grid.n_cells
        self.fd_matrix = sp.csr_matrix((fd[3], (fd[0], c_fd)), shape=(N, P))
        self.dir_far = sp.csr_matrix((dt.far_coefs, (dt.far_rows, c_dir)), shape=(M, P))
        self.lis_far = sp.csr_matrix((lt.far_coefs, (lt.far_rows, c_lis)), shape=(K, P))

        centers = grid.flat_centers(self.pair_cell)
        sig = point_signature(centers, el, self.pair_elem)
        self.pair_v, self.pair_d = self.cell_cache.fetch(
            self.pair_cell, self.pair_elem, sig,
            lambda idx: point_weights(centers[idx], el, self.pair_elem[idx], self.cfg),
        )

        ti, si = dt.near_rows, dt.near_src
        self.near_v, self.near_d = self.row_cache.fetch(
            ti, si, row_signature(el, ti, si),
            lambda idx: pair_row_weights(el, ti[idx], si[idx], self.cfg),
        )
        self.near_matrix = sp.csr_matrix((np.ones(len(ti)), (ti, np.arange(len(ti)))), shape=(M, len(ti)))

        li, ls = lt.near_rows, lt.near_src
        self.lnear_v, self.lnear_d = self.listener_cache.fetch(
            li, ls, point_signature(lp[li], el, ls),
            lambda idx: point_weights(lp[li[idx]], el, ls[idx], self.cfg),
        )
        self.lnear_matrix = sp.csr_matrix((np.ones(len(li)), (li, np.arange(len(li)))), shape=(K, len(li)))
        self.alpha = alphas(el)
        log.debug("tables: %d cell pairs, %d near rows, %d listener near pairs", P, len(ti), len(li))

    # -- per-step pieces --------------------------------------------------

    def pair_contributions(self, lag: int = 0) -> np.ndarray:
        """p_cell(elem) for every pair of the table at level ``head - lag``."""
        return contract(self.pair_v, self.pair_d, self.pair_elem, self.history, lag)

    def laplacian_correction(self, contrib: np.ndarray) -> np.ndarray:
        return self.fd_matrix @ contrib

    def update_dirichlet(self) -> tuple[np.ndarray, np.ndarray]:
        """Explicit Dirichlet update for the current step (slot n held at zero).

        Returns ``(phi_n, contrib)`` where ``contrib`` are the pair
        contributions at level n evaluated with phi_n = 0.
        """
        near = self.near_matrix @ contract(self.near_v, self.near_d, self.dir_tables.near_src, self.history)
        contrib = self.pair_contributions()
        far = self.dir_tables.interp @ self.grid.cur.ravel() + self.dir_far @ contrib
        phi = (near + self.elements.areas * far) / self.alpha
        return phi, contrib

    def listener_values(self, contrib: np.ndarray) -> np.ndarray:
        if not self.listeners:
            return np.zeros(0)
        near = self.lnear_matrix @ contract(self.lnear_v, self.lnear_d, self.lis_tables.near_src, self.history)
        return near + self.lis_tables.interp @ self.grid.cur.ravel() + self.lis_far @ contrib

    def step(self, g_n, corners: np.ndarray | None = None) -> np.ndarray:
        """Advance one time step with Neumann data ``g_n``; returns phi_n.

        ``corners`` optionally moves the elements first (see ``rebin_dynamic``).
        """
        if corners is not None:
            self.rebin_dynamic(corners)
        fdtd_far_step(self.grid, self.laplacian_correction(self.contrib_prev))
        self.history.push(np.asarray(g_n, float))
        phi, contrib = self.update_dirichlet()
        self.history.set_phi(phi)
        contrib = contrib + self.pair_d[:, 0] * phi[self.pair_elem]
        self.listener_log.append(self.listener_values(contrib))
        self.contrib_prev = contrib
        self.step_index += 1
        self.last_phi = phi
        return phi

    # -- point queries ----------------------------------------------------

    def far_value_at_point(self, x, far_set=None) -> float:
        """Interpolated far-set pressure at ``x`` from the stored grid level.

        ``far_set`` defaults to all elements outside the R2-block around x.
        Contributions use the current history (including phi at ``head``).
        """
        x = np.asarray(x, float)
        t = (x - self.grid.origin)[None] / self.grid.h
        cells, gam = trilinear(t)
        shape = np.asarray(self.grid.shape)
        if np.any(cells < 0) or np.any(cells >= shape):
            raise DomainError(f"point {x.tolist()} has fewer than 8 surrounding cell centers in the grid")
        M = len(self.elements)
        if far_set is None:
            lo, hi = block_bounds(t, self.R2)
            near = set(self.binning.in_block(lo[0], hi[0]).tolist())
            far_set = set(range(M)) - near
        far_set = set(int(e) for e in far_set)
        half = (self.R1 - 1) // 2
        total = 0.0
        for c in range(8):
            cell = cells[0, c]
            Nl = set(self.binning.in_block(cell - half, cell + half).tolist())
            Fl = set(range(M)) - Nl
            value = float(self.grid.cur[tuple(cell)])
            value -= self._cell_subset(cell, Fl - far_set)
            value += self._cell_subset(cell, far_set - Fl)
            total += gam[0, c] * value
        return total

    def _cell_subset(self, cell, ids) -> float:
        ids = np.array(sorted(ids), dtype=np.int64)
        if not len(ids):
            return 0.0
        x = np.repeat(self.grid.cell_center(cell)[None], len(ids), axis=0)
        v, d = point_weights(x, self.elements, ids, self.cfg)
        return float(contract(v, d, ids, self.history).sum())

    def listener_pressure(self, x) -> float:
        """Near sum over the R2-block around x plus the corrected far interpolation."""
        x = np.asarray(x, float)
        t = (x - self.grid.origin)[None] / self.grid.h
        lo, hi = block_bounds(t, self.R2)
        near = self.binning.in_block(lo[0], hi[0])
        value = 0.0
        if len(near):
            v, d = point_weights(np.repeat(x[None], len(near), axis=0), self.elements, near, self.cfg)
            value = float(contract(v, d, near, self.history).sum())
        far = set(range(len(self.elements))) - set(near.tolist())
        return value + self.far_value_at_point(x, far)

    # -- dynamics ---------------------------------------------------------

    def rebin_dynamic(self, corners: np.ndarray) -> int:
        """Move the elements to new vertex positions (same topology).

        The stored far-field levels are re-expressed for cells whose near set
        gained or lost an element, histories are kept, and stale pair weights
        are recomputed. Returns the number of cache entries recomputed.
        """
        corners = np.asarray(corners, float)
        if corners.shape != self.elements.corners.shape:
            raise ValueError("element count or shape changed; topology must stay fixed")
        if np.array_equal(corners, self.elements.corners):
            return 0
        new_el = self.elements.moved(corners)
        new_bin = bin_elements(new_el, self.grid)
        before = self.cell_cache.recomputed + self.row_cache.recomputed + self.listener_cache.recomputed
        self._reexpress_far_levels(new_el, self.binning, new_bin)
        self.elements, self.binning = new_el, new_bin
        self._build()
        # contributions of level n under the new tables
        self.contrib_prev = self.pair_contributions()
        after = self.cell_cache.recomputed + self.row_cache.recomputed + self.listener_cache.recomputed
        return after - before

    def _reexpress_far_levels(self, new_el: ElementSet, old: CellBinning, new: CellBinning):
        moved = np.flatnonzero(np.any(old.cell_of_element != new.cell_of_element, axis=1))
        if not len(moved):
            return
        half = (self.R1 - 1) // 2
        shape = np.asarray(self.grid.shape)
        rng = np.arange(-half, half + 1)
        block = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), -1).reshape(-1, 3)
        cells, elems, signs = [], [], []
        for e in moved:
            qa, qb = old.cell_of_element[e], new.cell_of_element[e]
            A = {tuple(c) for c in qa + block if np.all((c >= 0) & (c < shape))}
            B = {tuple(c) for c in qb + block if np.all((c >= 0) & (c < shape))}
            for c in A - B:  # element leaves the near set: now counted in the far value
                cells.append(c), elems.append(e), signs.append(1.0)
            for c in B - A:
                cells.append(c), elems.append(e), signs.append(-1.0)
        cells = np.array(cells, dtype=np.int64)
        elems = np.array(elems, dtype=np.int64)
        signs = np.array(signs)
        x = self.grid.cell_center(cells)
        v, d = point_weights(x, new_el, elems, self.cfg)
        flat = np.ravel_multi_index(cells.T, self.grid.shape)
        for lag, level in ((0, self.grid.cur), (1, self.grid.prev)):
            vals = contract(v, d, elems, self.history, lag)
            np.add.at(level.reshape(-1), flat, signs * vals)


# ---------------------------------------------------------------------------
# Listener export
# ---------------------------------------------------------------------------


def write_listener_csv(path, samples, tau: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time_s", "pressure_pa"])
        for n, p in enumerate(samples):
            w.writerow([n, repr(float(n * tau)), repr(float(p))])


def write_listener_wav(path, samples, tau: float) -> float:
    """Mono 16-bit PCM at round(1/tau) Hz, peak-normalised.

    The scale factor (Pa per full-scale unit) is written next to the WAV as
    ``<name>.scale.txt`` and returned.
    """
    x = np.asarray(samples, float)
    peak = float(np.abs(x).max()) if len(x) else 0.0
    scale = peak if peak > 0 else 1.0
    pcm = np.clip(np.rint(x / scale * 32767.0), -32768, 32767).astype("<i2")
    rate = int(round(1.0 / tau))
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(pcm.tobytes())
    Path(str(path) + ".scale.txt").write_text(f"pa_per_full_scale={scale!r}\nsample_rate={rate}\n")
    return scale
