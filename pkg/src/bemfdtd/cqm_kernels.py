"""Convolution-quadrature weights for the retarded single- and double-layer potentials.

The Laplace-domain kernels are sampled on the BDF2 contour
``s_l = gamma(lam * zeta_l) / tau`` with ``zeta_l = exp(2j*pi*l/Nf)`` and the
weights are recovered with a scaled inverse DFT::

    w_j = Re[ lam**-j / Nf * sum_l K(s_l) * zeta_l**-j ],   j = 0..L

A weight vector ``w`` turns a history ``g[n], g[n-1], ...`` into
``sum_j w[j] * g[n-j]``.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh_geometry import BoundaryElement, ElementSet, point_triangle_distance, quadrature_nodes

FOUR_PI = 4.0 * math.pi
_CHUNK = 1 << 21  # complex entries per vectorised block


def bdf2(z):
    """Generating polynomial of the two-step backward differentiation formula."""
    return 1.5 - 2.0 * z + 0.5 * z * z


@dataclass(frozen=True)
class CqmConfig:
    """Time step, history length and contour parameters.

    ``Nf`` defaults to ``2 * (L + 1)`` and ``lam`` to ``eps ** (1 / (2 * Nf))``
    with ``eps = 1e-16``.
    """

    tau: float
    L: int = 64
    c: float = 343.0
    Nf: int | None = None
    lam: float | None = None

    def __post_init__(self):
        if self.Nf is None:
            object.__setattr__(self, "Nf", 2 * (self.L + 1))
        if self.lam is None:
            object.__setattr__(self, "lam", 1e-16 ** (1.0 / (2 * self.Nf)))
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.L < 0:
            raise ValueError("L must be >= 0")
        if self.Nf < self.L + 1:
            raise ValueError("Nf must be >= L + 1")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lam must lie in (0, 1)")

    @property
    def zeta(self) -> np.ndarray:
        return np.exp(2j * np.pi * np.arange(self.Nf) / self.Nf)

    @property
    def s(self) -> np.ndarray:
        """Complex frequencies of the contour, shape (Nf,)."""
        return bdf2(self.lam * self.zeta) / self.tau

    def header(self) -> tuple[float, float, float, float, float]:
        return (float(self.Nf), float(self.L), float(self.tau), float(self.c), float(self.lam))


# ---------------------------------------------------------------------------
# Laplace-domain kernels
# ---------------------------------------------------------------------------


def helmholtz_single_layer(r, s, c):
    """exp(-s r / c) / (4 pi r)."""
    r = np.asarray(r)
    if np.any(r <= 0):
        raise ValueError("single-layer kernel is singular at r = 0; use singular_v_self")
    return np.exp(-s * r / c) / (FOUR_PI * r)


def helmholtz_double_layer(x, y, n_y, s, c):
    """Normal derivative of the single-layer kernel with respect to the source point y.

    Equals ``(1 + s r / c) exp(-s r / c) / (4 pi r**2) * ((x - y) . n_y) / r``.
    """
    d = np.asarray(x, float) - np.asarray(y, float)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r == 0):
        raise ValueError("double-layer kernel evaluated at coincident points")
    cos = np.einsum("...i,...i->...", d, np.asarray(n_y, float)) / r
    return (1.0 + s * r / c) * np.exp(-s * r / c) / (FOUR_PI * r * r) * cos


# ---------------------------------------------------------------------------
# Transform -> weights
# ---------------------------------------------------------------------------


def transform_to_weights(K: np.ndarray, cfg: CqmConfig) -> np.ndarray:
    """Scaled inverse DFT of kernel samples ``K[..., Nf]`` -> real weights ``[..., L+1]``."""
    raw = np.fft.fft(K, axis=-1)[..., : cfg.L + 1] / cfg.Nf
    raw *= cfg.lam ** -np.arange(cfg.L + 1, dtype=float)
    scale = np.abs(raw.real).max() if raw.size else 0.0
    if raw.size and np.abs(raw.imag).max() > 1e-8 * max(scale, 1e-300):
        raise FloatingPointError("inverse transform left a non-negligible imaginary part")
    return np.ascontiguousarray(raw.real)


def _point_transforms(x, corners, normals, areas, order, cfg, level=0):
    """Kernel transforms of source triangles seen from points; returns (Kv, Kd) of shape (P, Nf)."""
    y, w = quadrature_nodes(corners, order, level)  # (P, q, 3)
    d = x[:, None, :] - y
    r = np.linalg.norm(d, axis=-1)
    if np.any(r == 0):
        raise ValueError("target point coincides with a source quadrature node")
    cos = np.einsum("pqi,pi->pq", d, normals) / r
    s = cfg.s
    sr = s[None, None, :] * (r / cfg.c)[..., None]
    E = np.exp(-sr) / (FOUR_PI * r)[..., None]
    Kv = np.einsum("q,pqf->pf", w, E) * areas[:, None]
    Kd = np.einsum("q,pqf->pf", w, E * (1.0 + sr) * (cos / r)[..., None]) * areas[:, None]
    return Kv, Kd


def near_levels(points, elements: ElementSet, sources) -> np.ndarray:
    """Subdivision level of the 3-point source rule for points close to a source triangle.

    Level k puts the rule on 4**k subtriangles of size edge / 2**k; it is
    chosen so the subtriangle size stays below twice the point-triangle distance.
    """
    dist = point_triangle_distance(points, elements.corners[sources])
    rel = dist / elements.longest_edges()[sources]
    return np.select([rel >= 0.5, rel >= 0.25, rel >= 0.125], [0, 1, 2], 3)


def point_weights(points, elements: ElementSet, sources, cfg: CqmConfig, order=None):
    """Single/double-layer weights of source elements seen from arbitrary points.

    Parameters
    ----------
    points : (P, 3) array
    elements : ElementSet
    sources : (P,) int array of source element ids
    order : 1, 3 or None. ``None`` picks the 1-point rule beyond two
        longest-edge lengths from the source centroid and a 3-point rule
        otherwise, subdivided further for points very close to the triangle
        (see ``near_levels``).

    Returns
    -------
    v, d : (P, L+1) arrays
    """
    points = np.asarray(points, float).reshape(-1, 3)
    sources = np.asarray(sources, dtype=np.int64).reshape(-1)
    n = len(sources)
    v = np.empty((n, cfg.L + 1))
    dd = np.empty((n, cfg.L + 1))
    if n == 0:
        return v, dd
    if order is None:
        dist = np.linalg.norm(points - elements.centers[sources], axis=1)
        close = np.flatnonzero(dist < 2.0 * elements.longest_edges()[sources])
        level = near_levels(points[close], elements, sources[close])
        groups = [(np.flatnonzero(dist >= 2.0 * elements.longest_edges()[sources]), 1, 0)]
        groups += [(close[level == k], 3, k) for k in range(4)]
    else:
        groups = [(np.arange(n), order, 0)]
    for idx, q, lev in groups:
        nq = q * 4**lev
        step = max(1, _CHUNK // (nq * cfg.Nf))
        for a in range(0, len(idx), step):
            sel = idx[a : a + step]
            src = sources[sel]
            Kv, Kd = _point_transforms(
                points[sel], elements.corners[src], elements.normals[src], elements.areas[src], q, cfg, lev
            )
            v[sel] = transform_to_weights(Kv, cfg)
            dd[sel] = transform_to_weights(Kd, cfg)
    return v, dd


def pair_row_weights(elements: ElementSet, targets, sources, cfg: CqmConfig):
    """Row weights V_{j,i,m}, D_{j,i,m} for element pairs (i, m).

    Non-adjacent pairs use the 1-point rule on both triangles, adjacent pairs
    (sharing a vertex) the 3-point rule on both. The self pair uses the
    regularised single-layer self term and a zero double layer.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    sources = np.asarray(sources, dtype=np.int64).reshape(-1)
    n = len(targets)
    v = np.zeros((n, cfg.L + 1))
    d = np.zeros((n, cfg.L + 1))
    if n == 0:
        return v, d
    self_pair = targets == sources
    adj = elements.adjacent(targets, sources) & ~self_pair
    far = ~adj & ~self_pair
    for mask, q in ((far, 1), (adj, 3)):
        idx = np.flatnonzero(mask)
        if not len(idx):
            continue
        xk, wk = quadrature_nodes(elements.corners[targets[idx]], q)  # (P, q, 3)
        pts = xk.reshape(-1, 3)
        src = np.repeat(sources[idx], q)
        pv, pd = point_weights(pts, elements, src, cfg, order=q)
        scale = elements.areas[targets[idx]][:, None]
        v[idx] = scale * np.einsum("k,pkj->pj", wk, pv.reshape(len(idx), q, -1))
        d[idx] = scale * np.einsum("k,pkj->pj", wk, pd.reshape(len(idx), q, -1))
    for k in np.flatnonzero(self_pair):
        i = int(targets[k])
        v[k] = elements.areas[i] * singular_v_self(elements[i], cfg, order=3)
    return v, d


def row_weights(i: int, elements: ElementSet, cfg: CqmConfig):
    """Full rows of D_j and V_j for target element ``i``; each of shape (L+1, M)."""
    m = np.arange(len(elements))
    v, d = pair_row_weights(elements, np.full(len(m), i), m, cfg)
    return d.T.copy(), v.T.copy()


def alpha(i: int, elements: ElementSet, cfg: CqmConfig | None = None) -> float:
    """Diagonal entry of (I/2 - D_0): area/2 minus the self double layer, which vanishes on a flat element."""
    return float(elements.areas[i]) / 2.0


def alphas(elements: ElementSet) -> np.ndarray:
    return 0.5 * elements.areas


def cqm_weights(source: BoundaryElement, target, cfg: CqmConfig, order: int | None = None):
    """Weights (v, d) for one source element and either a point or a target element.

    With a BoundaryElement target the row form is returned (integrated over
    the target with the adjacency-dependent rule).
    """
    if isinstance(target, BoundaryElement):
        corners = np.stack([target.vertices, source.vertices])
        shared = np.isclose(target.vertices[:, None, :], source.vertices[None, :, :], atol=1e-14).all(-1)
        tri = np.array([[0, 1, 2], [3, 4, 5]])
        if shared.any():
            ti, si = np.nonzero(shared)
            tri[1, si] = ti
        es = ElementSet(corners, tri)
        if np.allclose(target.vertices, source.vertices):
            v, d = pair_row_weights(es, [0], [0], cfg)
        else:
            v, d = pair_row_weights(es, [0], [1], cfg)
        return v[0], d[0]
    es = ElementSet(source.vertices[None], np.array([[0, 1, 2]]))
    v, d = point_weights(np.asarray(target, float)[None], es, [0], cfg, order=order)
    return v[0], d[0]


# ---------------------------------------------------------------------------
# Singular self term
# ---------------------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def _edge_fans(x, vertices):
    """Perpendicular distance and angular limits of the three fans (x, a, b)."""
    out = []
    for k in range(3):
        a, b = vertices[k], vertices[(k + 1) % 3]
        u = (b - a) / np.linalg.norm(b - a)
        sa, sb = np.dot(a - x, u), np.dot(b - x, u)
        foot = a - sa * u
        dist = np.linalg.norm(foot - x)
        out.append((dist, math.atan2(sa, dist), math.atan2(sb, dist)))
    return out


def static_self_integral(vertices, x=None) -> float:
    """Closed-form integral of 1/(4 pi r) over a flat triangle from an interior point x (default centroid)."""
    vertices = np.asarray(vertices, float)
    x = vertices.mean(axis=0) if x is None else np.asarray(x, float)
    total = 0.0
    for dist, pa, pb in _edge_fans(x, vertices):
        total += dist * (math.asinh(math.tan(pb)) - math.asinh(math.tan(pa)))
    return total / FOUR_PI


def self_transform(vertices, s, c, x=None) -> np.ndarray:
    """Integral of exp(-s r/c)/(4 pi r) over the triangle from interior point x, for each s.

    Polar coordinates around x make the radial integral closed-form; only a
    smooth angular integral remains, done with Gauss-Legendre per edge fan.
    """
    vertices = np.asarray(vertices, float)
    x = vertices.mean(axis=0) if x is None else np.asarray(x, float)
    s = np.atleast_1d(np.asarray(s, complex))
    out = np.full(s.shape, static_self_integral(vertices, x), dtype=complex)
    for dist, pa, pb in _edge_fans(x, vertices):
        half = 0.5 * (pb - pa)
        psi = pa + half * (_GL_X + 1.0)
        R = dist / np.cos(psi)  # (G,)
        a = s[:, None] * R[None, :] / c
        # R * (phi(a) - 1), phi(a) = (1 - exp(-a)) / a
        corr = R[None, :] * (-np.expm1(-a) / a - 1.0)
        out += half * (corr @ _GL_W) / FOUR_PI
    return out


def singular_v_self(element: BoundaryElement, cfg: CqmConfig, order: int = 1) -> np.ndarray:
    """Single-layer weights of an element acting on itself.

    The source integral is done exactly in the radial direction from each
    target quadrature point; ``order`` selects the target rule (1: centroid).
    The result is the point-form weight averaged over the target rule, so the
    row weight is ``area * singular_v_self(...)``.
    """
    xk, wk = quadrature_nodes(element.vertices, order)
    K = sum(w * self_transform(element.vertices, cfg.s, cfg.c, x) for x, w in zip(xk, wk))
    return transform_to_weights(K, cfg)


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


@dataclass
class WeightCache:
    """Pair weight tables keyed by (target key, source element id).

    Each entry stores a geometry signature (relative coordinates). A lookup
    recomputes an entry when its signature moved by more than ``tol``.
    Reads are lock-free on immutable snapshots; inserts take a lock.
    """

    cfg: CqmConfig
    sig_width: int
    tol: float = 0.0
    keys: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    sigs: np.ndarray = None
    v: np.ndarray = None
    d: np.ndarray = None
    recomputed: int = 0

    def __post_init__(self):
        width = self.cfg.L + 1
        if self.sigs is None:
            self.sigs = np.zeros((0, self.sig_width))
        if self.v is None:
            self.v = np.zeros((0, width))
        if self.d is None:
            self.d = np.zeros((0, width))
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.keys)

    @staticmethod
    def combine(target_keys, source_ids) -> np.ndarray:
        return (np.asarray(target_keys, np.int64) << 32) | np.asarray(source_ids, np.int64)

    def fetch(self, target_keys, source_ids, sigs, compute):
        """Return (v, d) for the requested pairs, computing missing or stale ones.

        ``compute(index_array)`` must return (v, d) for the selected pairs.
        """
        q = self.combine(target_keys, source_ids)
        sigs = np.asarray(sigs, float).reshape(len(q), self.sig_width)
        keys = self.keys
        pos = np.searchsorted(keys, q)
        pos_c = np.minimum(pos, max(len(keys) - 1, 0))
        found = (len(keys) > 0) & (keys[pos_c] == q) if len(keys) else np.zeros(len(q), bool)
        stale = np.zeros(len(q), bool)
        if found.any():
            f = np.flatnonzero(found)
            stale[f] = np.abs(self.sigs[pos_c[f]] - sigs[f]).max(axis=1) > self.tol
        need = np.flatnonzero(~found | stale)
        if len(need):
            nv, nd = compute(need)
            with self._lock:
                self._insert(q[need], sigs[need], nv, nd)
                self.recomputed += int(stale.sum())
            keys = self.keys
            pos_c = np.searchsorted(keys, q)
        return self.v[pos_c], self.d[pos_c]

    def _insert(self, q, sigs, v, d):
        q, first = np.unique(q, return_index=True)
        sigs, v, d = sigs[first], v[first], d[first]
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        hit = (self.keys[pos_c] == q) if len(self.keys) else np.zeros(len(q), bool)
        h = np.flatnonzero(hit)
        self.sigs[pos_c[h]] = sigs[h]
        self.v[pos_c[h]] = v[h]
        self.d[pos_c[h]] = d[h]
        new = np.flatnonzero(~hit)
        if len(new):
            keys = np.concatenate([self.keys, q[new]])
            order = np.argsort(keys, kind="stable")
            self.keys = keys[order]
            self.sigs = np.concatenate([self.sigs, sigs[new]])[order]
            self.v = np.concatenate([self.v, v[new]])[order]
            self.d = np.concatenate([self.d, d[new]])[order]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<5d", *self.cfg.header()))
            fh.write(struct.pack("<2q", len(self.keys), self.sig_width))
            for arr in (self.keys.astype("<i8"), self.sigs, self.v, self.d):
                fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path, cfg: CqmConfig, sig_width: int, tol: float = 0.0) -> "WeightCache":
        """Load a cache file; a header that does not match ``cfg`` yields an empty cache."""
        path = Path(path)
        empty = cls(cfg, sig_width, tol)
        if not path.is_file():
            return empty
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < 56:
            return empty
        header = struct.unpack_from("<5d", raw, 0)
        n, width = struct.unpack_from("<2q", raw, 40)
        if header != cfg.header() or width != sig_width:
            return empty
        off = 56
        keys = np.frombuffer(raw, "<i8", n, off).astype(np.int64)
        off += 8 * n
        sigs = np.frombuffer(raw, "<f8", n * width, off).reshape(n, width).copy()
        off += 8 * n * width
        L1 = cfg.L + 1
        v = np.frombuffer(raw, "<f8", n * L1, off).reshape(n, L1).copy()
        off += 8 * n * L1
        d = np.frombuffer(raw, "<f8", n * L1, off).reshape(n, L1).copy()
        return cls(cfg, sig_width, tol, keys, sigs, v, d)


def point_signature(points, elements: ElementSet, sources) -> np.ndarray:
    """Source vertices relative to the target point, flattened to 9 numbers."""
    return (elements.corners[sources] - np.asarray(points)[:, None, :]).reshape(len(sources), 9)


def row_signature(elements: ElementSet, targets, sources) -> np.ndarray:
    """Source and target vertices relative to the target centroid (18 numbers)."""
    ref = elements.centers[targets][:, None, :]
    return np.concatenate(
        [
            (elements.corners[sources] - ref).reshape(len(sources), 9),
            (elements.corners[targets] - ref).reshape(len(targets), 9),
        ],
        axis=1,
    )
