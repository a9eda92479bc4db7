"""Triangle meshes, boundary elements and their assignment to grid cells.

Elements are flat triangles. Each one belongs to exactly one grid cell, the
cell whose half-open box ``[origin + i*h, origin + (i+1)*h)`` (per axis)
contains the element center. Near sets are unions of cell contents over an
``R x R x R`` block of cells.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

MIN_TRIANGLE_AREA = 1e-12


class MeshError(ValueError):
    """Raised for malformed or degenerate mesh input."""


class BinningError(ValueError):
    """Raised when an element cannot be assigned to an interior grid cell."""


class GridLike(Protocol):
    origin: np.ndarray
    h: float
    shape: tuple[int, int, int]


# ---------------------------------------------------------------------------
# Mesh containers
# ---------------------------------------------------------------------------


@dataclass
class TriangleMesh:
    """Indexed triangle mesh in meters.

    ``parent[t]`` is the index of the triangle of the originally loaded mesh
    that triangle ``t`` was cut from (identity for unrefined meshes).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    parent: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.parent is None:
            self.parent = np.arange(len(self.triangles), dtype=np.int64)
        else:
            self.parent = np.asarray(self.parent, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        nv = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= nv):
            raise MeshError("triangle vertex index out of range")
        areas = self.areas()
        bad = np.flatnonzero(areas <= MIN_TRIANGLE_AREA)
        if bad.size:
            t = int(bad[0])
            raise MeshError(
                f"degenerate triangle {t} (vertices {self.triangles[t].tolist()}, "
                f"area {areas[t]:.3e} m^2)"
            )

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """Vertex positions per triangle, shape (T, 3, 3)."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        p = self.corners()
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def edge_lengths(self) -> np.ndarray:
        p = self.corners()
        return np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, scale: float = 1.0, offset=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        return TriangleMesh(self.vertices * scale + np.asarray(offset, float), self.triangles.copy(), self.parent.copy())

    def translated(self, offset) -> "TriangleMesh":
        return self.transformed(1.0, offset)


@dataclass(frozen=True)
class BoundaryElement:
    id: int
    center: np.ndarray
    area: float
    normal: np.ndarray
    vertices: np.ndarray

    @property
    def longest_edge(self) -> float:
        v = self.vertices
        return float(np.linalg.norm(v[[1, 2, 0]] - v, axis=1).max())


@dataclass
class ElementSet:
    """Vectorised view of all boundary elements of a mesh.

    Arrays are indexed by element id: ``corners`` (M, 3, 3), ``centers``,
    ``normals`` (M, 3), ``areas`` (M,). ``triangles`` keeps the vertex
    indices so adjacency (sharing at least one vertex) can be queried.
    """

    corners: np.ndarray
    triangles: np.ndarray
    centers: np.ndarray = field(init=False)
    normals: np.ndarray = field(init=False)
    areas: np.ndarray = field(init=False)

    def __post_init__(self):
        self.corners = np.ascontiguousarray(self.corners, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        p = self.corners
        cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        twice = np.linalg.norm(cr, axis=1)
        self.areas = 0.5 * twice
        self.normals = cr / twice[:, None]
        self.centers = p.mean(axis=1)

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh) -> "ElementSet":
        return cls(mesh.corners(), mesh.triangles)

    def __len__(self) -> int:
        return len(self.areas)

    def __getitem__(self, i: int) -> BoundaryElement:
        return BoundaryElement(
            id=int(i),
            center=self.centers[i].copy(),
            area=float(self.areas[i]),
            normal=self.normals[i].copy(),
            vertices=self.corners[i].copy(),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def longest_edges(self) -> np.ndarray:
        p = self.corners
        return np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2).max(axis=1)

    def adjacent(self, i: np.ndarray, m: np.ndarray) -> np.ndarray:
        """True where elements ``i`` and ``m`` share at least one vertex (incl. i == m)."""
        ti = self.triangles[np.asarray(i)]
        tm = self.triangles[np.asarray(m)]
        return (ti[..., :, None] == tm[..., None, :]).any(axis=(-1, -2))

    def moved(self, corners: np.ndarray) -> "ElementSet":
        return ElementSet(corners, self.triangles)


# ---------------------------------------------------------------------------
# OBJ input and mesh generators
# ---------------------------------------------------------------------------


def load_obj(path) -> TriangleMesh:
    """Read an ASCII Wavefront OBJ file, fan-triangulating polygons.

    Only ``v`` and ``f`` records are interpreted. Face tokens may carry
    texture/normal indices (``7/1/3``) and may be negative (relative).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"OBJ file not found: {path}")
    vertices: list[list[float]] = []
    triangles: list[tuple[int, int, int]] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "v":
                try:
                    vertices.append([float(t) for t in tok[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad vertex record") from exc
                if len(vertices[-1]) != 3:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    k = int(t.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(vertices) + k)
                if len(idx) < 3:
                    raise MeshError(f"{path}:{lineno}: face with {len(idx)} vertices cannot be triangulated")
                for a in range(1, len(idx) - 1):
                    triangles.append((idx[0], idx[a], idx[a + 1]))
    if not triangles:
        raise MeshError(f"{path}: no faces")
    return TriangleMesh(np.array(vertices), np.array(triangles))


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def icosphere(level: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere with 20 * 4**level outward-facing triangles."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    vs = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = vs[a] + vs[b]
                vs.append(m / np.linalg.norm(m))
                cache[key] = len(vs) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(vs) * radius + np.asarray(center, float)
    f = np.array(faces, dtype=np.int64)
    mesh = TriangleMesh(v, f)
    # enforce outward winding
    p = mesh.corners()
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    inward = np.einsum("ij,ij->i", n, p.mean(axis=1) - np.asarray(center, float)) < 0
    f[inward] = f[inward][:, ::-1]
    return TriangleMesh(v, f)


def box_mesh(size, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Closed axis-aligned box (12 outward-facing triangles)."""
    sx, sy, sz = (0.5 * np.asarray(size, float))
    cx, cy, cz = center
    v = np.array([[cx + a * sx, cy + b * sy, cz + c * sz] for a in (-1, 1) for b in (-1, 1) for c in (-1, 1)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(tris))


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------


def remesh_to_grid(mesh: TriangleMesh, h: float) -> TriangleMesh:
    """Split triangles until every edge is strictly shorter than ``h``.

    Every edge with length >= h is cut at its midpoint in all triangles that
    share it, so the result stays conforming. Triangles with three cut edges
    are split 1->4, with two cut edges 1->3 and with one cut edge 1->2. New
    vertices lie on the original edges, so the surface is unchanged.
    """
    if h <= 0:
        raise ValueError("cell size h must be positive")
    verts = [tuple(v) for v in mesh.vertices]
    tris = [tuple(int(i) for i in t) for t in mesh.triangles]
    parent = [int(p) for p in mesh.parent]

    def length(a, b):
        return math.dist(verts[a], verts[b])

    for _ in range(200):
        mids: dict[tuple[int, int], int] = {}
        for t in tris:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = (a, b) if a < b else (b, a)
                if key not in mids and length(a, b) >= h:
                    pa, pb = verts[a], verts[b]
                    verts.append(tuple(0.5 * (x + y) for x, y in zip(pa, pb)))
                    mids[key] = len(verts) - 1
        if not mids:
            break
        new_tris, new_parent = [], []
        for t, par in zip(tris, parent):
            pieces = _split_triangle(t, mids, length)
            new_tris += pieces
            new_parent += [par] * len(pieces)
        tris, parent = new_tris, new_parent
    return TriangleMesh(np.array(verts), np.array(tris), np.array(parent))


def _split_triangle(t, mids, length):
    def m(a, b):
        return mids.get((a, b) if a < b else (b, a))

    marked = [m(t[k], t[(k + 1) % 3]) is not None for k in range(3)]
    count = sum(marked)
    if count == 0:
        return [t]
    if count == 3:
        a, b, c = t
        ab, bc, ca = m(a, b), m(b, c), m(c, a)
        return [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    # rotate so the pattern is canonical while keeping winding
    if count == 1:
        k = marked.index(True)
        a, b, c = t[k], t[(k + 1) % 3], t[(k + 2) % 3]
        ab = m(a, b)
        return [(a, ab, c), (ab, b, c)]
    k = marked.index(False)  # unmarked edge is (t[k], t[k+1]) -> make it (c, a)
    c, a, b = t[k], t[(k + 1) % 3], t[(k + 2) % 3]
    ab, bc = m(a, b), m(b, c)
    out = [(ab, b, bc)]
    if length(a, bc) <= length(ab, c):
        out += [(a, ab, bc), (a, bc, c)]
    else:
        out += [(a, ab, c), (ab, bc, c)]
    return out


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray


_BARY = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    3: (
        np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
        np.full(3, 1 / 3),
    ),
}


def barycentric_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    if order not in _BARY:
        raise ValueError(f"unsupported quadrature order {order}; use 1 or 3")
    return _BARY[order]


def quadrature_points(element: BoundaryElement, order: int) -> QuadratureRule:
    """Symmetric triangle rule with ``order`` points (1: centroid, 3: edge-midpoint-biased rule)."""
    bary, w = barycentric_rule(order)
    return QuadratureRule(bary @ element.vertices, w.copy())


def subdivided_rule(order: int, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric rule applied on each of the 4**level midpoint subtriangles."""
    bary, w = barycentric_rule(order)
    tris = [np.eye(3)]
    for _ in range(level):
        nxt = []
        for t in tris:
            a, b, c = t
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            nxt += [np.array(v) for v in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))]
        tris = nxt
    pts = np.concatenate([bary @ t for t in tris])
    return pts, np.tile(w, len(tris)) / len(tris)


def quadrature_nodes(corners: np.ndarray, order: int, level: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature points for many triangles at once: (..., P, 3) points, (P,) weights.

    ``level`` > 0 applies the rule on 4**level congruent subtriangles.
    """
    bary, w = subdivided_rule(order, level) if level else barycentric_rule(order)
    return np.einsum("pk,...kd->...pd", bary, corners), w


def point_triangle_distance(x: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Distance from points to triangles ``corners`` (T, 3, 3); ``x`` is (3,) or (T, 3)."""
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1)[:, None]
    dist_plane = np.einsum("ij,ij->i", x - a, n)
    p = x - dist_plane[:, None] * n
    inside = np.ones(len(corners), bool)
    for u, w in ((a, b), (b, c), (c, a)):
        inside &= np.einsum("ij,ij->i", np.cross(w - u, p - u), n) >= 0
    best = np.where(inside, np.abs(dist_plane), np.inf)
    for u, w in ((a, b), (b, c), (c, a)):
        e = w - u
        t = np.clip(np.einsum("ij,ij->i", x - u, e) / np.einsum("ij,ij->i", e, e), 0.0, 1.0)
        best = np.minimum(best, np.linalg.norm(x - (u + t[:, None] * e), axis=1))
    return best


# ---------------------------------------------------------------------------
# Binning
# ---------------------------------------------------------------------------


@dataclass
class CellBinning:
    """Two-way map between element ids and the grid cells holding their centers."""

    shape: tuple[int, int, int]
    cell_of_element: np.ndarray  # (M, 3) int

    def __post_init__(self):
        self.cell_of_element = np.asarray(self.cell_of_element, dtype=np.int64).reshape(-1, 3)
        self.shape = tuple(int(s) for s in self.shape)
        flat = self.flat_cells()
        order = np.argsort(flat, kind="stable")
        self._sorted_ids = order
        self._sorted_cells = flat[order]

    def flat_cells(self) -> np.ndarray:
        return np.ravel_multi_index(self.cell_of_element.T, self.shape) if len(self.cell_of_element) else np.zeros(0, np.int64)

    def elements_in(self, cell) -> np.ndarray:
        k = np.ravel_multi_index(tuple(int(c) for c in cell), self.shape)
        lo = np.searchsorted(self._sorted_cells, k, side="left")
        hi = np.searchsorted(self._sorted_cells, k, side="right")
        return np.sort(self._sorted_ids[lo:hi])

    @property
    def elements_in_cell(self) -> dict[tuple[int, int, int], frozenset[int]]:
        out: dict[tuple[int, int, int], set[int]] = {}
        for e, c in enumerate(self.cell_of_element):
            out.setdefault(tuple(int(x) for x in c), set()).add(e)
        return {k: frozenset(v) for k, v in out.items()}

    def in_block(self, lo, hi) -> np.ndarray:
        """Ids of elements whose cell lies in the inclusive index box [lo, hi]."""
        c = self.cell_of_element
        ok = np.all((c >= np.asarray(lo)) & (c <= np.asarray(hi)), axis=1)
        return np.flatnonzero(ok)

    def count_in_boxes(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Element counts for many inclusive boxes (K, 3) via a summed-volume table."""
        if not hasattr(self, "_sat"):
            occ = np.zeros(self.shape, np.int64)
            np.add.at(occ, tuple(self.cell_of_element.T), 1)
            sat = np.zeros(tuple(s + 1 for s in self.shape), np.int64)
            sat[1:, 1:, 1:] = occ.cumsum(0).cumsum(1).cumsum(2)
            self._sat = sat
        shape = np.asarray(self.shape)
        a = np.clip(np.asarray(lo), 0, shape)
        b = np.clip(np.asarray(hi) + 1, 0, shape)
        b = np.maximum(a, b)
        S = self._sat
        total = np.zeros(len(a), np.int64)
        for corner in range(8):
            pick = [(corner >> k) & 1 for k in range(3)]
            idx = tuple(np.where(pick[k], b[:, k], a[:, k]) for k in range(3))
            sign = (-1) ** (3 - sum(pick))
            total += sign * S[idx]
        return total


def cell_of_point(x, grid: GridLike) -> np.ndarray:
    return np.floor((np.asarray(x, float) - grid.origin) / grid.h).astype(np.int64)


def bin_elements(elements: ElementSet, grid: GridLike, margin: int = 1) -> CellBinning:
    """Assign each element to the cell containing its center.

    Centers in the outer ``margin`` layers (the absorbing layer) or outside
    the grid are rejected.
    """
    cells = cell_of_point(elements.centers, grid)
    shape = np.asarray(grid.shape)
    bad = np.any((cells < margin) | (cells >= shape - margin), axis=1)
    if bad.any():
        e = int(np.flatnonzero(bad)[0])
        raise BinningError(
            f"element {e} center {elements.centers[e].tolist()} lies in cell {cells[e].tolist()}, "
            f"outside the grid interior (shape {tuple(grid.shape)}, margin {margin})"
        )
    return CellBinning(tuple(grid.shape), cells)


def block_bounds(t: np.ndarray, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive index box of the R-wide block around fractional cell coordinate ``t``.

    ``t = (x - origin) / h``. For odd R the block is centered on the cell
    containing x; for even R it is centered on the 2x2x2 interpolation
    stencil around x.
    """
    lo = np.floor(np.asarray(t, float) - (R - 1) / 2.0).astype(np.int64)
    return lo, lo + R - 1


def neighbor_elements(cell, R: int, binning: CellBinning) -> frozenset[int]:
    """Elements binned in the R x R x R block of cells centered on ``cell`` (R odd)."""
    if R < 1 or R % 2 == 0:
        raise ValueError("R must be odd and >= 1; use elements_near_point for even blocks")
    lo, hi = block_bounds(np.asarray(cell, float) + 0.5, R)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(binning.shape) - 1)
    return frozenset(int(e) for e in binning.in_block(lo, hi))


def elements_near_point(x, R: int, binning: CellBinning, grid: GridLike) -> frozenset[int]:
    """Elements binned in the R-wide block of cells around point ``x`` (any R >= 1)."""
    lo, hi = block_bounds((np.asarray(x, float) - grid.origin) / grid.h, R)
    return frozenset(int(e) for e in binning.in_block(lo, hi))


def write_element_table(path, elements: ElementSet, binning: CellBinning | None = None) -> None:
    """CSV dump: element id, center, area, normal, cell index."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "cx", "cy", "cz", "area", "nx", "ny", "nz", "u", "v", "w"])
        for e in range(len(elements)):
            cell = binning.cell_of_element[e].tolist() if binning is not None else ["", "", ""]
            w.writerow([e, *elements.centers[e].tolist(), float(elements.areas[e]), *elements.normals[e].tolist(), *cell])

