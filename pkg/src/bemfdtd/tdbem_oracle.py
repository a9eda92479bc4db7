"""Dense time-domain boundary element reference solver.

Marching system, per step n::

    (I/2 - D_0) phi_n = sum_{j>=1} D_j phi_{n-j} - sum_{j>=0} V_j g_{n-j}

and the potential at an off-surface point::

    p_x^n = sum_j d_j(x) . phi_{n-j} - v_j(x) . g_{n-j}
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .cqm_kernels import CqmConfig, alphas, pair_row_weights, point_weights
from .mesh_geometry import ElementSet, point_triangle_distance  # noqa: F401  (re-exported)

SINGULAR_RADIUS = 1e-6


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class ElementHistory:
    """Ring buffers of the last L+1 Dirichlet (phi) and Neumann (g) values per element.

    ``head`` is the current step n (-1 before the first push). Pushing a new
    Neumann vector also opens a zero Dirichlet slot for step n, which is the
    value the explicit update assumes until ``set_phi`` is called.
    """

    n_elements: int
    L: int
    phi: np.ndarray = field(init=False)
    g: np.ndarray = field(init=False)
    head: int = -1

    def __post_init__(self):
        self.phi = np.zeros((self.L + 1, self.n_elements))
        self.g = np.zeros((self.L + 1, self.n_elements))

    @property
    def capacity(self) -> int:
        return self.L + 1

    def push(self, g_n) -> int:
        self.head += 1
        k = self.head % self.capacity
        self.g[k] = g_n
        self.phi[k] = 0.0
        return self.head

    def set_phi(self, phi_n) -> None:
        self.phi[self.head % self.capacity] = phi_n

    def _order(self, lag: int = 0) -> np.ndarray:
        return (self.head - lag - np.arange(self.capacity)) % self.capacity

    def recent(self, lag: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """(phi, g) with row j holding step ``head - lag - j``; rows older than the buffer are zero."""
        idx = self._order(lag)
        phi, g = self.phi[idx], self.g[idx]
        # steps before 0 and steps that fell out of the buffer are zero
        steps = self.head - lag - np.arange(self.capacity)
        valid = (steps >= 0) & (steps > self.head - self.capacity)
        if not valid.all():
            phi = phi * valid[:, None]
            g = g * valid[:, None]
        return phi, g

    def copy(self) -> "ElementHistory":
        out = ElementHistory(self.n_elements, self.L)
        out.phi[:] = self.phi
        out.g[:] = self.g
        out.head = self.head
        return out


def contract(v: np.ndarray, d: np.ndarray, ids: np.ndarray, history: ElementHistory, lag: int = 0) -> np.ndarray:
    """Per-pair contributions sum_j d[p, j] phi[n-j, ids[p]] - v[p, j] g[n-j, ids[p]]."""
    phi, g = history.recent(lag)
    if lag:
        v, d = v[:, : v.shape[1] - lag], d[:, : d.shape[1] - lag]
        phi, g = phi[: v.shape[1]], g[: v.shape[1]]
    return np.einsum("pj,jp->p", d, phi[:, ids]) - np.einsum("pj,jp->p", v, g[:, ids])


# ---------------------------------------------------------------------------
# Dense marching
# ---------------------------------------------------------------------------


@dataclass
class DenseSystem:
    """All-pairs row weights flattened to (M, (L+1)*M), plus the factorised left-hand side."""

    D: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    lhs: np.ndarray
    _lu: tuple | None = None

    @property
    def lu(self):
        if self._lu is None:
            lu, piv = scipy.linalg.lu_factor(self.lhs, check_finite=True)
            if np.any(np.abs(np.diag(lu)) <= 1e-14 * np.abs(self.lhs).max()):
                raise SingularSystemError("left-hand side (I/2 - D_0) is singular")
            self._lu = (lu, piv)
        return self._lu

    def rhs(self, history: ElementHistory) -> np.ndarray:
        """Right-hand side with the current Dirichlet slot held at zero."""
        phi, g = history.recent()
        return self.D @ phi.ravel() - self.V @ g.ravel()


def build_dense_system(elements: ElementSet, cfg: CqmConfig) -> DenseSystem:
    M, L1 = len(elements), cfg.L + 1
    D = np.zeros((M, L1, M))
    V = np.zeros((M, L1, M))
    src = np.arange(M)
    rows_per_chunk = max(1, 40000 // M)
    for a in range(0, M, rows_per_chunk):
        tgt = np.arange(a, min(M, a + rows_per_chunk))
        ti = np.repeat(tgt, M)
        si = np.tile(src, len(tgt))
        v, d = pair_row_weights(elements, ti, si, cfg)
        V[tgt] = v.reshape(len(tgt), M, L1).transpose(0, 2, 1)
        D[tgt] = d.reshape(len(tgt), M, L1).transpose(0, 2, 1)
    alpha = alphas(elements)
    lhs = np.diag(0.5 * elements.areas) - D[:, 0, :]
    return DenseSystem(D.reshape(M, -1), V.reshape(M, -1), alpha, lhs)


def march_step(history: ElementHistory, system: DenseSystem, mode: str = "dense") -> np.ndarray:
    """Solve for phi_n given g up to step n and phi up to n-1; stores phi_n in ``history``.

    ``mode="diagonal"`` keeps only the diagonal of (I/2 - D_0), which is
    the same as evaluating the full right-hand side with phi_n = 0.
    """
    b = system.rhs(history)
    if mode == "dense":
        phi_n = scipy.linalg.lu_solve(system.lu, b)
    elif mode == "diagonal":
        phi_n = b / system.alpha
    else:
        raise ValueError(f"unknown mode {mode!r}")
    history.set_phi(phi_n)
    return phi_n


# ---------------------------------------------------------------------------
# Potential evaluation
# ---------------------------------------------------------------------------


def target_weights(x, elements: ElementSet, cfg: CqmConfig):
    """Point weights (v, d) of every element for target point ``x``, each (M, L+1)."""
    x = np.asarray(x, float)
    dmin = point_triangle_distance(x, elements.corners).min() if len(elements) else np.inf
    if dmin < SINGULAR_RADIUS:
        raise ValueError(f"evaluation point {x.tolist()} lies within {SINGULAR_RADIUS} m of the surface")
    M = len(elements)
    return point_weights(np.repeat(x[None], M, axis=0), elements, np.arange(M), cfg)


def evaluate_pressure(weights, history: ElementHistory) -> float:
    v, d = weights
    return float(contract(v, d, np.arange(v.shape[0]), history).sum())


def subset_contribution(weights, S, history: ElementHistory) -> float:
    """Pressure contribution of the element subset ``S`` (order-independent sum)."""
    v, d = weights
    ids = np.array(sorted(int(e) for e in S), dtype=np.int64)
    if not len(ids):
        return 0.0
    return float(contract(v[ids], d[ids], ids, history).sum())


class TdbemOracle:
    """Dense reference solver: owns elements, history, the dense system and point-weight caches."""

    def __init__(self, elements: ElementSet, cfg: CqmConfig, mode: str = "dense"):
        self.elements = elements
        self.cfg = cfg
        self.mode = mode
        self.history = ElementHistory(len(elements), cfg.L)
        self._system: DenseSystem | None = None
        self._point_cache: dict[tuple[float, float, float], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def system(self) -> DenseSystem:
        if self._system is None:
            self._system = build_dense_system(self.elements, self.cfg)
        return self._system

    @property
    def step_index(self) -> int:
        return self.history.head

    def step(self, g_n) -> np.ndarray:
        self.history.push(np.asarray(g_n, float))
        return march_step(self.history, self.system, self.mode)

    def weights_at(self, x):
        key = tuple(float(c) for c in np.asarray(x, float))
        if key not in self._point_cache:
            self._point_cache[key] = target_weights(np.array(key), self.elements, self.cfg)
        return self._point_cache[key]

    def evaluate_pressure(self, x) -> float:
        return evaluate_pressure(self.weights_at(x), self.history)

    def subset_contribution(self, x, S) -> float:
        return subset_contribution(self.weights_at(x), S, self.history)

    def pressures(self, points) -> np.ndarray:
        return np.array([self.evaluate_pressure(x) for x in np.asarray(points, float)])


def write_pressure_series(path, rows) -> None:
    """CSV with columns step, point, pressure."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "point", "pressure"])
        for step, point, p in rows:
            w.writerow([int(step), int(point), repr(float(p))])
