"""Experiment harness: monopole accuracy test, FFAT maps, scene runs and their outputs."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .cqm_kernels import CqmConfig, point_weights
from .farfield_grid import FarFieldGrid, field_slice, write_pgm, write_slice_csv
from .hybrid_solver import HybridSolver, write_listener_csv, write_listener_wav
from .mesh_geometry import ElementSet, TriangleMesh, icosphere, load_obj, remesh_to_grid
from .sources_bc import MonopoleSource, load_modal_neumann, monopole_neumann
from .tdbem_oracle import TdbemOracle

log = logging.getLogger(__name__)

DEFAULT_FACTORS = (2.4, 3.0, 3.6, 4.2)
SNR_CAP_DB = 300.0
FACE_NAMES = ("-x", "+x", "-y", "+y", "-z", "+z")


class StageError(RuntimeError):
    """A run failed; ``stage`` names the part of the pipeline that raised."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Metrics and sampling
# ---------------------------------------------------------------------------


def snr(pred, truth) -> float:
    """10 log10(sum truth^2 / sum (pred - truth)^2) in dB, capped at +300 dB."""
    pred = np.asarray(pred, float).ravel()
    truth = np.asarray(truth, float).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {truth.size} truth values")
    signal = float(np.sum(truth * truth))
    if signal == 0.0:
        raise ValueError("truth is all zero; SNR is undefined")
    noise = float(np.sum((pred - truth) ** 2))
    if noise == 0.0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(signal / noise))


def sample_bbox(bbox, factor: float, resolution: int, domain=None) -> np.ndarray:
    """Points on the six faces of the bounding box scaled by ``factor`` about its center.

    Each face carries a ``resolution`` x ``resolution`` grid including its
    edges, so edge and corner points appear on more than one face. Faces are
    ordered -x, +x, -y, +y, -z, +z; the result has shape (6 r^2, 3).
    ``domain`` is an optional (lo, hi) pair the scaled box must fit in.
    """
    if not factor > 1.0:
        raise ValueError("factor must be > 1")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    lo, hi = (np.asarray(b, float) for b in bbox)
    center, half = 0.5 * (lo + hi), 0.5 * factor * (hi - lo)
    if domain is not None:
        dlo, dhi = (np.asarray(b, float) for b in domain)
        if np.any(center - half < dlo) or np.any(center + half > dhi):
            raise ValueError(f"box scaled by {factor} exceeds the simulation domain")
    axes = [np.linspace(center[a] - half[a], center[a] + half[a], resolution) for a in range(3)]
    faces = []
    for a in range(3):
        u, v = [k for k in range(3) if k != a]
        U, V = np.meshgrid(axes[u], axes[v], indexing="ij")
        for side in (-1.0, 1.0):
            pts = np.empty((resolution, resolution, 3))
            pts[..., a] = center[a] + side * half[a]
            pts[..., u], pts[..., v] = U, V
            faces.append(pts.reshape(-1, 3))
    return np.concatenate(faces)


def steady_state_steps(L: int, frequency: float, tau: float) -> tuple[int, int]:
    """(total steps, window steps): max(10 L, 20 periods) and the final 3 periods."""
    period = 1.0 / frequency
    total = max(10 * L, math.ceil(20.0 * period / tau))
    window = min(total, math.ceil(3.0 * period / tau))
    return total, window


# ---------------------------------------------------------------------------
# Scene configuration
# ---------------------------------------------------------------------------


@dataclass
class SceneConfig:
    """JSON-serialisable scene description.

    ``mesh_fraction`` rescales the mesh so its largest extent is that fraction
    of the domain and centers it; ``None`` keeps the mesh coordinates as
    given (meters, domain spanning [0, domain_size]^3).
    """

    mesh: str | None = None
    domain_size: float = 0.7
    resolution: int = 32
    c: float = 343.0
    source: dict = field(default_factory=lambda: {"type": "monopole", "frequency": 1000.0})
    listeners: list = field(default_factory=list)
    duration: float | None = None
    R1: int = 3
    R2: int = 4
    L: int = 64
    output_dir: str = "out"
    mesh_fraction: float | None = 1.0 / 6.0
    icosphere_level: int = 2
    backend: str = "hybrid"
    ffat_factor: float = 3.0
    face_resolution: int | None = None
    slices: dict | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown scene keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "SceneConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16 cells per axis")
        if not self.domain_size > 0 or not self.c > 0:
            raise ValueError("domain_size and c must be positive")
        if self.backend not in ("hybrid", "oracle"):
            raise ValueError(f"unknown backend {self.backend!r}")
        kind = self.source.get("type")
        if kind == "monopole":
            if not float(self.source.get("frequency", 0)) > 0:
                raise ValueError("monopole source needs a positive frequency")
        elif kind == "modal":
            if "file" not in self.source:
                raise ValueError("modal source needs a 'file'")
        else:
            raise ValueError(f"unknown source type {kind!r}")
        if self.duration is not None and not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.mesh_fraction is not None and not 0 < self.mesh_fraction < 1:
            raise ValueError("mesh_fraction must lie in (0, 1)")
        for x in self.listeners:
            x = np.asarray(x, float)
            if x.shape != (3,) or np.any(x <= 0) or np.any(x >= self.domain_size):
                raise ValueError(f"listener {list(np.atleast_1d(x))} is not a point inside the domain")


@dataclass
class Scene:
    config: SceneConfig
    mesh: TriangleMesh
    elements: ElementSet
    grid: FarFieldGrid
    cfg: CqmConfig
    frequency: float
    neumann: Callable[[int], np.ndarray]

    @property
    def bbox(self):
        return self.mesh.bbox()


def _prepare_mesh(config: SceneConfig, h: float) -> tuple[TriangleMesh, TriangleMesh]:
    """(input mesh after fitting, remeshed mesh with all edges shorter than h)."""
    mesh = load_obj(config.mesh) if config.mesh else icosphere(config.icosphere_level)
    if config.mesh_fraction is not None:
        lo, hi = mesh.bbox()
        scale = config.mesh_fraction * config.domain_size / float((hi - lo).max())
        mid = 0.5 * (lo + hi) * scale
        mesh = mesh.transformed(scale, np.full(3, 0.5 * config.domain_size) - mid)
    return mesh, remesh_to_grid(mesh, h)


def build_scene(config: SceneConfig, mode: int | None = None) -> Scene:
    n, D = config.resolution, config.domain_size
    h = D / n
    grid = FarFieldGrid((n, n, n), h, c=config.c)
    cfg = CqmConfig(tau=grid.tau, L=config.L, c=config.c)
    fitted, mesh = _prepare_mesh(config, h)
    elements = ElementSet.from_mesh(mesh)
    src = config.source
    if src["type"] == "monopole":
        lo, hi = mesh.bbox()
        center = tuple(src.get("center", 0.5 * (lo + hi)))
        mono = MonopoleSource(center, float(src["frequency"]), float(src.get("amplitude", 1.0)), config.c)

        def neumann(k: int) -> np.ndarray:
            return monopole_neumann(elements, mono, k * grid.tau, h)

        freq = mono.frequency
    else:
        k_mode = int(src.get("mode", 0) if mode is None else mode)
        data = load_modal_neumann(src["file"], fitted.n_triangles, n_modes=k_mode + 1)
        data = data.for_refined(mesh.parent).scaled(float(src.get("scale", 1.0)))
        freq = float(data.frequencies[k_mode])
        if not freq > 0:
            raise ValueError(f"mode {k_mode} has no positive frequency in {src['file']}")

        def neumann(k: int) -> np.ndarray:
            return data.neumann(k_mode, k * grid.tau)

    return Scene(config, mesh, elements, grid, cfg, freq, neumann)


# ---------------------------------------------------------------------------
# Backends: hybrid solver or dense oracle, both sampling a fixed probe set
# ---------------------------------------------------------------------------


class HybridBackend:
    def __init__(self, scene: Scene, probes: np.ndarray, keep_last: int | None = None):
        c = scene.config
        self.solver = HybridSolver(scene.elements, scene.grid, L=c.L, R1=c.R1, R2=c.R2,
                                   listeners=probes, cfg=scene.cfg, keep_last=keep_last)

    def step(self, g: np.ndarray) -> None:
        self.solver.step(g)

    def probe_series(self) -> np.ndarray:
        return self.solver.listener_log.array()

    @property
    def grid(self) -> FarFieldGrid:
        return self.solver.grid


def oracle_point_series(elements: ElementSet, cfg: CqmConfig, phi_hist, g_hist, points, steps, chunk: int = 128):
    """Oracle pressures at ``points`` (K, 3) for the given step indices; returns (len(steps), K)."""
    phi = np.asarray(phi_hist, float)
    g = np.asarray(g_hist, float)
    M, L1 = len(elements), cfg.L + 1
    points = np.asarray(points, float).reshape(-1, 3)
    steps = np.asarray(steps, dtype=np.int64)
    pad = np.zeros((cfg.L, M))
    idx = steps[None, :] - np.arange(L1)[:, None] + cfg.L  # (L+1, T)
    Hphi = np.concatenate([pad, phi])[idx].transpose(0, 2, 1).reshape(L1 * M, len(steps))
    Hg = np.concatenate([pad, g])[idx].transpose(0, 2, 1).reshape(L1 * M, len(steps))
    out = np.empty((len(steps), len(points)))
    ids = np.arange(M)
    for a in range(0, len(points), chunk):
        p = points[a : a + chunk]
        v, d = point_weights(np.repeat(p, M, axis=0), elements, np.tile(ids, len(p)), cfg)
        v = v.reshape(len(p), M, L1).transpose(0, 2, 1).reshape(len(p), -1)
        d = d.reshape(len(p), M, L1).transpose(0, 2, 1).reshape(len(p), -1)
        out[:, a : a + len(p)] = (d @ Hphi - v @ Hg).T
    return out


class OracleBackend:
    """Dense boundary-element marching; probes are evaluated once at the end."""

    def __init__(self, scene: Scene, probes: np.ndarray, keep_last: int | None = None, mode: str = "dense"):
        self.scene = scene
        self.oracle = TdbemOracle(scene.elements, scene.cfg, mode)
        self.probes = np.asarray(probes, float).reshape(-1, 3)
        self.keep_last = keep_last
        self.phi, self.g = [], []

    def step(self, g: np.ndarray) -> None:
        phi = self.oracle.step(g)
        self.phi.append(phi.copy())
        self.g.append(np.asarray(g, float).copy())

    def probe_series(self) -> np.ndarray:
        T = len(self.phi)
        first = 0 if self.keep_last is None else max(0, T - self.keep_last)
        if T == 0 or not len(self.probes):
            return np.zeros((T - first, len(self.probes)))
        return oracle_point_series(self.scene.elements, self.scene.cfg, self.phi, self.g,
                                   self.probes, np.arange(first, T))

    @property
    def grid(self):
        raise ValueError("the oracle backend has no far-field grid")


def make_backend(scene: Scene, probes, keep_last: int | None = None):
    if scene.config.backend == "oracle":
        return OracleBackend(scene, probes, keep_last)
    return HybridBackend(scene, probes, keep_last)


# ---------------------------------------------------------------------------
# Monopole test
# ---------------------------------------------------------------------------


@dataclass
class MonopoleReport:
    snr_by_factor: dict
    aggregate_snr: float
    wall_time: float
    n_elements: int
    steps: int
    resolution: int
    backend: str

    def lines(self) -> list[str]:
        out = [f"factor {f:.2f}: SNR {v:.2f} dB" for f, v in self.snr_by_factor.items()]
        out.append(f"aggregate: SNR {self.aggregate_snr:.2f} dB")
        out.append(
            f"resolution {self.resolution}^3, {self.n_elements} elements, {self.steps} steps, "
            f"backend {self.backend}, {self.wall_time:.1f} s"
        )
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["factor", "snr_db"])
            for f, v in self.snr_by_factor.items():
                w.writerow([f, repr(float(v))])
            w.writerow(["aggregate", repr(float(self.aggregate_snr))])


def monopole_test(
    mesh: str | None = None,
    resolution: int = 32,
    frequency: float = 1000.0,
    factors=DEFAULT_FACTORS,
    backend: str = "hybrid",
    face_resolution: int | None = None,
    domain_size: float = 0.7,
    L: int = 64,
    R1: int = 3,
    R2: int = 4,
    icosphere_level: int = 2,
) -> MonopoleReport:
    """Drive the mesh with a unit monopole at its bbox center and compare shell amplitudes with e^{-ikr}/(4 pi r)."""
    t0 = time.perf_counter()
    config = SceneConfig(
        mesh=mesh, domain_size=domain_size, resolution=resolution,
        source={"type": "monopole", "frequency": frequency}, L=L, R1=R1, R2=R2,
        backend=backend, icosphere_level=icosphere_level, face_resolution=face_resolution,
    )
    config.validate()
    scene = build_scene(config)
    r = face_resolution or resolution
    domain = (np.zeros(3), np.full(3, domain_size))
    shells = [sample_bbox(scene.bbox, f, r, domain) for f in factors]
    probes = np.concatenate(shells)
    total, window = steady_state_steps(L, frequency, scene.grid.tau)
    run = make_backend(scene, probes, keep_last=window)
    for k in range(total):
        run.step(scene.neumann(k))
    series = run.probe_series()[-window:]
    amp = 0.5 * np.ptp(series, axis=0)
    lo, hi = scene.bbox
    truth = 1.0 / (4.0 * math.pi * np.linalg.norm(probes - 0.5 * (lo + hi), axis=1))
    by_factor, a = {}, 0
    for f, pts in zip(factors, shells):
        by_factor[float(f)] = snr(amp[a : a + len(pts)], truth[a : a + len(pts)])
        a += len(pts)
    return MonopoleReport(by_factor, snr(amp, truth), time.perf_counter() - t0, len(scene.elements),
                          total, resolution, backend)


# ---------------------------------------------------------------------------
# FFAT maps
# ---------------------------------------------------------------------------


@dataclass
class FfatMap:
    faces: np.ndarray  # (6, r, r), ordered -x, +x, -y, +y, -z, +z
    face_resolution: int
    frequency: float
    points: np.ndarray  # (6, r, r, 3)

    def write(self, out_dir, prefix: str = "ffat") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pmax = float(self.faces.max()) or 1.0
        written = []
        for name, img in zip(FACE_NAMES, self.faces):
            p = out / f"{prefix}_{name.replace('-', 'm').replace('+', 'p')}.pgm"
            write_pgm(p, img, pmax, signed=False)
            written.append(p)
        p = out / f"{prefix}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["face", "i", "j", "x", "y", "z", "amplitude"])
            for f, name in enumerate(FACE_NAMES):
                for i in range(self.face_resolution):
                    for j in range(self.face_resolution):
                        x = self.points[f, i, j]
                        w.writerow([name, i, j, *(repr(float(c)) for c in x), repr(float(self.faces[f, i, j]))])
        written.append(p)
        return written


def ffat_map(config: SceneConfig, mode: int = 0) -> FfatMap:
    """Peak |p| over the final 3 periods on the six faces of the scaled bounding box."""
    scene = build_scene(config, mode)
    r = config.face_resolution or config.resolution
    domain = (np.zeros(3), np.full(3, config.domain_size))
    probes = sample_bbox(scene.bbox, config.ffat_factor, r, domain)
    total, window = steady_state_steps(config.L, scene.frequency, scene.grid.tau)
    if config.duration is not None:
        total = max(window, math.ceil(config.duration / scene.grid.tau))
    run = make_backend(scene, probes, keep_last=window)
    for k in range(total):
        run.step(scene.neumann(k))
    amp = np.abs(run.probe_series()[-window:]).max(axis=0)
    return FfatMap(amp.reshape(6, r, r), r, scene.frequency, probes.reshape(6, r, r, 3))


# ---------------------------------------------------------------------------
# Scene runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    steps: int
    listener_series: np.ndarray
    timings: dict
    files: list


def _run_steps(scene: Scene, config: SceneConfig) -> int:
    if config.duration is not None:
        return max(1, math.ceil(config.duration / scene.grid.tau))
    return steady_state_steps(config.L, scene.frequency, scene.grid.tau)[0]


def write_slice(out_dir: Path, grid: FarFieldGrid, axis: str, index: int, tag: str) -> list[Path]:
    ax = "xyz".index(axis)
    if not 0 <= index < grid.shape[ax]:
        raise ValueError(f"slice index {index} outside [0, {grid.shape[ax]})")
    base = out_dir / f"slice_{axis}{index}_{tag}"
    write_pgm(base.with_suffix(".pgm"), field_slice(grid.cur, ax, index))
    write_slice_csv(base.with_suffix(".csv"), grid.cur, ax, index)
    return [base.with_suffix(".pgm"), base.with_suffix(".csv")]


def run(config: SceneConfig, out_dir=None, steps: int | None = None) -> RunResult:
    """Execute a scene and write listener CSV/WAV, optional slices and a key=value manifest.

    Any failure is re-raised as ``StageError`` naming the stage.
    """
    stage = "config"
    timings: dict[str, float] = {}
    files: list[Path] = []
    try:
        config.validate()
        out = Path(out_dir or config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        stage = "scene"
        t = time.perf_counter()
        scene = build_scene(config)
        timings["scene_s"] = time.perf_counter() - t
        stage = "solver"
        t = time.perf_counter()
        listeners = np.asarray(config.listeners, float).reshape(-1, 3)
        backend = make_backend(scene, listeners)
        timings["setup_s"] = time.perf_counter() - t
        stage = "march"
        t = time.perf_counter()
        n_steps = steps if steps is not None else _run_steps(scene, config)
        sl = config.slices or {}
        every = int(sl.get("every", 0))
        for k in range(n_steps):
            backend.step(scene.neumann(k))
            if every and (k + 1) % every == 0:
                files += write_slice(out, backend.grid, sl.get("axis", "z"), int(sl["index"]), f"step{k + 1:06d}")
        timings["march_s"] = time.perf_counter() - t
        stage = "output"
        series = backend.probe_series()
        for j in range(series.shape[1]):
            p = out / f"listener_{j}.csv"
            write_listener_csv(p, series[:, j], scene.grid.tau)
            w = out / f"listener_{j}.wav"
            write_listener_wav(w, series[:, j], scene.grid.tau)
            files += [p, w, Path(str(w) + ".scale.txt")]
        params = {
            "n_elements": len(scene.elements), "h": scene.grid.h, "tau": scene.grid.tau,
            "Nf": scene.cfg.Nf, "lambda": scene.cfg.lam, "L": scene.cfg.L, "R1": config.R1, "R2": config.R2,
            "steps": n_steps, "sample_rate": int(round(1.0 / scene.grid.tau)), "frequency": scene.frequency,
        }
        manifest = out / "manifest.txt"
        with open(manifest, "w") as fh:
            for k, v in config.to_dict().items():
                fh.write(f"config.{k}={json.dumps(v)}\n")
            for k, v in params.items():
                fh.write(f"param.{k}={v!r}\n")
            for k, v in timings.items():
                fh.write(f"time.{k}={v:.6f}\n")
        files.append(manifest)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc
    return RunResult(out, n_steps, series, timings, files)
