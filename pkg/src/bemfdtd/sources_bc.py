"""Neumann boundary data: analytic monopole drive, modal vibration tables, start-up ramp.

Normals point out of the radiating body and ``g = dp/dn`` along that normal.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh_geometry import ElementSet


def ramp_envelope(t, T_ramp: float):
    """Smoothstep 3u^2 - 2u^3 with u = clamp(t / T_ramp, 0, 1)."""
    if T_ramp < 0:
        raise ValueError("T_ramp must be >= 0")
    t = np.asarray(t, float)
    if T_ramp == 0:
        return np.where(t >= 0, 1.0, 0.0)[()]
    u = np.clip(t / T_ramp, 0.0, 1.0)
    return (u * u * (3.0 - 2.0 * u))[()]


@dataclass(frozen=True)
class MonopoleSource:
    center: tuple[float, float, float]
    frequency: float
    amplitude: float = 1.0
    c: float = 343.0

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.frequency

    @property
    def k(self) -> float:
        return self.omega / self.c

    @property
    def period(self) -> float:
        return 1.0 / self.frequency


def monopole_phasor(x, source: MonopoleSource):
    """Complex amplitude exp(-ikr) / (4 pi r) (times the source amplitude)."""
    r = np.linalg.norm(np.asarray(x, float) - np.asarray(source.center, float), axis=-1)
    if np.any(r == 0):
        raise ValueError("monopole field is singular at its center")
    return source.amplitude * np.exp(-1j * source.k * r) / (4.0 * math.pi * r)


def monopole_pressure(x, source: MonopoleSource, t: float):
    """Re[exp(i(wt - kr)) / (4 pi r)] times the amplitude."""
    return (monopole_phasor(x, source) * np.exp(1j * source.omega * t)).real


def monopole_gradient(x, source: MonopoleSource, t: float):
    """Closed-form spatial gradient of ``monopole_pressure``."""
    d = np.asarray(x, float) - np.asarray(source.center, float)
    r = np.linalg.norm(d, axis=-1)
    dpdr = source.amplitude * (
        np.exp(1j * (source.omega * t - source.k * r)) * (-1j * source.k * r - 1.0) / (4.0 * math.pi * r * r)
    ).real
    return (dpdr / r)[..., None] * d


def monopole_neumann(elements: ElementSet, source: MonopoleSource, t: float, h: float, T_ramp: float | None = None):
    """Normal derivative of the monopole field at element centers by central differences.

    The stencil half-width is ``1e-4 * h``; the result is multiplied by the
    start-up ramp (default: 5 periods).
    """
    if T_ramp is None:
        T_ramp = 5.0 * source.period
    delta = 1e-4 * h
    x, n = elements.centers, elements.normals
    dp = monopole_pressure(x + delta * n, source, t) - monopole_pressure(x - delta * n, source, t)
    return dp / (2.0 * delta) * ramp_envelope(t, T_ramp)


# ---------------------------------------------------------------------------
# Modal data
# ---------------------------------------------------------------------------


class ModalDataError(ValueError):
    pass


@dataclass
class ModalNeumannData:
    """Complex Neumann amplitude per (element, mode) and the mode frequencies in Hz."""

    amplitudes: np.ndarray  # (n_elements, n_modes) complex
    frequencies: np.ndarray  # (n_modes,)

    @property
    def n_modes(self) -> int:
        return self.amplitudes.shape[1]

    def amplitude(self, element: int, mode: int) -> complex:
        if mode >= self.n_modes:
            return 0j
        return complex(self.amplitudes[element, mode])

    def for_refined(self, parent: np.ndarray) -> "ModalNeumannData":
        """Per-element data for a refined mesh: each child takes its parent's value."""
        return ModalNeumannData(self.amplitudes[np.asarray(parent)], self.frequencies.copy())

    def scaled(self, k: float) -> "ModalNeumannData":
        return ModalNeumannData(self.amplitudes * k, self.frequencies.copy())

    def neumann(self, mode: int, t: float, T_ramp: float | None = None) -> np.ndarray:
        """Re[a exp(i w t)] per element, times the start-up ramp."""
        f = float(self.frequencies[mode])
        if T_ramp is None:
            T_ramp = 5.0 / f if f > 0 else 0.0
        g = (self.amplitudes[:, mode] * np.exp(2j * math.pi * f * t)).real
        return g * ramp_envelope(t, T_ramp)


def load_modal_neumann(path, n_elements: int, n_modes: int | None = None) -> ModalNeumannData:
    """Read ``element,mode,real,imag,frequency`` rows; a leading header row is allowed.

    Entries that are not listed are zero.
    """
    rows = []
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
                continue
            try:
                e, m = int(row[0]), int(row[1])
                re_, im_, f = float(row[2]), float(row[3]), float(row[4])
            except (ValueError, IndexError) as exc:
                if lineno == 1:
                    continue  # header
                raise ModalDataError(f"{path}:{lineno}: malformed row {row!r}") from exc
            if not 0 <= e < n_elements:
                raise ModalDataError(f"{path}:{lineno}: element id {e} out of range [0, {n_elements})")
            if m < 0:
                raise ModalDataError(f"{path}:{lineno}: negative mode id {m}")
            rows.append((e, m, complex(re_, im_), f))
    nm = max([r[1] + 1 for r in rows], default=0)
    if n_modes is not None:
        nm = max(nm, n_modes)
    amps = np.zeros((n_elements, nm), complex)
    freqs = np.zeros(nm)
    for e, m, a, f in rows:
        amps[e, m] = a
        if freqs[m] and not math.isclose(freqs[m], f):
            raise ModalDataError(f"{path}: mode {m} listed with two frequencies ({freqs[m]} and {f})")
        freqs[m] = f
    return ModalNeumannData(amps, freqs)


def write_modal_neumann(path, data: ModalNeumannData) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "mode", "real", "imag", "frequency"])
        for m in range(data.n_modes):
            for e in np.flatnonzero(data.amplitudes[:, m]):
                a = data.amplitudes[e, m]
                w.writerow([int(e), m, repr(float(a.real)), repr(float(a.imag)), repr(float(data.frequencies[m]))])
