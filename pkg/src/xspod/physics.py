"""Spectra, attenuation tables and the photon-interaction samplers.

Samplers are jitted and take either explicit uniforms or a counter-based
stream state (see :mod:`xspod.rng`), so the transport kernel and the Python
API share one implementation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit

from .rng import Stream, next_open_uniform, next_uniform

ELECTRON_REST_KEV = 511.0
MIN_ENERGY_KEV = 1.0
BUNDLED_MATERIALS = {"pmma": "pmma", "aluminum": "aluminum", "al": "aluminum", "iron": "iron", "fe": "iron"}


class InteractionKind(IntEnum):
    PHOTOELECTRIC = 0
    COMPTON = 1
    RAYLEIGH = 2


class Attenuation(NamedTuple):
    """Linear attenuation coefficients in 1/mm."""
    photoelectric: float
    compton: float
    rayleigh: float
    total: float


@dataclass(frozen=True)
class Spectrum:
    bin_energies: np.ndarray
    fluence: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.bin_energies, dtype=np.float64)
        w = np.asarray(self.fluence, dtype=np.float64)
        if e.ndim != 1 or e.shape != w.shape or e.size == 0:
            raise ValueError("spectrum needs matching, nonempty energy and weight columns")
        if np.any(np.diff(e) <= 0):
            raise ValueError("spectrum energies must be strictly ascending")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("spectrum weights must be nonnegative with at least one positive")
        if e[0] < 1.0 or e[-1] > 1000.0:
            raise ValueError("spectrum energies must lie within [1, 1000] keV")
        object.__setattr__(self, "bin_energies", e)
        object.__setattr__(self, "fluence", w)

    @property
    def weights(self) -> np.ndarray:
        """Normalized weights."""
        return self.fluence / self.fluence.sum()

    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.fluence)
        return c / c[-1]

    @property
    def support(self) -> tuple[float, float]:
        nz = self.bin_energies[self.fluence > 0]
        return float(nz[0]), float(nz[-1])


@dataclass(frozen=True)
class Material:
    name: str
    density: float  # g/cm3
    table: np.ndarray  # rows: energy keV, pe, compton, rayleigh (cm2/g)

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or t.shape[1] != 4 or t.shape[0] < 2:
            raise ValueError("material table needs at least two rows of 4 columns")
        if self.density <= 0:
            raise ValueError("density must be positive")
        e = t[:, 0]
        if np.any(np.diff(e) < 0):
            raise ValueError("table energies must be ascending")
        # duplicate energies mark absorption edges; at most two rows per energy
        if np.any((e[2:] == e[1:-1]) & (e[1:-1] == e[:-2])):
            raise ValueError("at most two rows may share an energy (edge)")
        if np.any(t[:, 1:] <= 0):
            raise ValueError("attenuation coefficients must be positive")
        object.__setattr__(self, "table", t)

    @property
    def energy_range(self) -> tuple[float, float]:
        return float(self.table[0, 0]), float(self.table[-1, 0])

    def kernel_table(self) -> np.ndarray:
        """(n, 4) array: energies then ln of linear coefficients in 1/mm."""
        t = self.table.copy()
        t[:, 1:] = np.log(t[:, 1:] * self.density / 10.0)
        return t

    def scaled(self, factor: float) -> "Material":
        """Same material with every coefficient multiplied by ``factor``."""
        t = self.table.copy()
        t[:, 1:] *= factor
        return Material(f"{self.name}*{factor:g}", self.density, t)


# --------------------------------------------------------------------------
# loading

def _rows(path) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if rows:
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]  # header
    return rows


def load_spectrum(path) -> Spectrum:
    rows = _rows(path)
    if not rows:
        raise ValueError(f"spectrum file {path} is empty")
    data = np.array([[float(r[0]), float(r[1])] for r in rows])
    return Spectrum(data[:, 0], data[:, 1])


def save_spectrum(path, spectrum: Spectrum) -> None:
    with open(path, "w") as fh:
        fh.write("energy_keV,weight\n")
        for e, w in zip(spectrum.bin_energies, spectrum.fluence):
            fh.write(f"{e:.17g},{w:.17g}\n")


def load_material(path) -> Material:
    """Material CSV plus its ``.meta`` sidecar (``name,density_g_cm3``)."""
    path = Path(path)
    rows = _rows(path)
    if not rows:
        raise ValueError(f"material file {path} is empty")
    table = np.array([[float(v) for v in r[:4]] for r in rows])
    meta = path.with_suffix(".meta").read_text().strip().split(",")
    return Material(meta[0].strip(), float(meta[1]), table)


def bundled_material(name: str) -> Material:
    key = BUNDLED_MATERIALS.get(name.lower())
    if key is None:
        raise KeyError(f"no bundled material {name!r}; known: {sorted(set(BUNDLED_MATERIALS.values()))}")
    with resources.as_file(resources.files("xspod") / "data" / f"{key}.csv") as p:
        return load_material(p)


def resolve_material(ref: str) -> Material:
    """Bundled id (``pmma``, ``aluminum``, ``iron``) or path to a material CSV."""
    if ref.lower() in BUNDLED_MATERIALS:
        return bundled_material(ref)
    return load_material(ref)


def kramers_spectrum(tube_kV: float, bin_width_keV: float = 1.0, cutoff_keV: float = 10.0) -> Spectrum:
    """Unfiltered bremsstrahlung photon spectrum, fluence ~ (kV - E)/E.

    Bins sit at ``cutoff, cutoff + width, ...`` up to ``tube_kV``; the endpoint
    bin carries zero weight.
    """
    if not (tube_kV > cutoff_keV >= 1.0) or bin_width_keV <= 0:
        raise ValueError(f"need tube_kV > cutoff >= 1 and width > 0 (kV={tube_kV}, cutoff={cutoff_keV})")
    n = int(math.floor((tube_kV - cutoff_keV) / bin_width_keV + 1e-9)) + 1
    e = cutoff_keV + bin_width_keV * np.arange(n)
    w = np.clip((tube_kV - e) / e, 0.0, None)
    return Spectrum(e, w)


def resolve_spectrum(ref: str, bin_width_keV: float = 1.0, cutoff_keV: float = 10.0) -> Spectrum:
    """``kramers:KV`` or a path to a spectrum CSV."""
    if ref.lower().startswith("kramers:"):
        return kramers_spectrum(float(ref.split(":", 1)[1]), bin_width_keV, cutoff_keV)
    return load_spectrum(ref)


# --------------------------------------------------------------------------
# attenuation

@njit(cache=True)
def log_mu(table, energy):
    """Log-log interpolation of the three processes; returns ln mu per process (1/mm).

    ``table`` comes from :meth:`Material.kernel_table`.  At a duplicated edge
    energy the upper row wins.
    """
    e = table[:, 0]
    n = e.shape[0]
    i = np.searchsorted(e, energy, side="right") - 1
    if i >= n - 1:
        i = n - 2
        while i > 0 and e[i] == e[i + 1]:
            i -= 1
    if i < 0:
        i = 0
    e0 = e[i]
    e1 = e[i + 1]
    if e1 == e0:
        return table[i + 1, 1], table[i + 1, 2], table[i + 1, 3]
    f = (math.log(energy) - math.log(e0)) / (math.log(e1) - math.log(e0))
    return (table[i, 1] + f * (table[i + 1, 1] - table[i, 1]),
            table[i, 2] + f * (table[i + 1, 2] - table[i, 2]),
            table[i, 3] + f * (table[i + 1, 3] - table[i, 3]))


@njit(cache=True)
def mu_parts(table, energy):
    a, b, c = log_mu(table, energy)
    return math.exp(a), math.exp(b), math.exp(c)


def _check_energy(material: Material, energy) -> None:
    lo, hi = material.energy_range
    e = np.asarray(energy)
    if np.any(e < lo) or np.any(e > hi):
        raise ValueError(f"energy outside {material.name} table range [{lo}, {hi}] keV")


def mu(material: Material, energy: float) -> Attenuation:
    _check_energy(material, energy)
    pe, co, ra = mu_parts(material.kernel_table(), float(energy))
    return Attenuation(pe, co, ra, pe + co + ra)


def mu_total(material: Material, energies) -> np.ndarray:
    """Vectorized total linear attenuation (1/mm)."""
    energies = np.atleast_1d(np.asarray(energies, dtype=np.float64))
    _check_energy(material, energies)
    return _mu_total_many(material.kernel_table(), energies)


@njit(cache=True)
def _mu_total_many(table, energies):
    out = np.empty(energies.shape[0])
    for k in range(energies.shape[0]):
        pe, co, ra = mu_parts(table, energies[k])
        out[k] = pe + co + ra
    return out


def check_coverage(material: Material, spectrum: Spectrum) -> None:
    lo, hi = material.energy_range
    s_lo, s_hi = spectrum.support
    if s_lo < lo or s_hi > hi:
        raise ValueError(
            f"spectrum support [{s_lo}, {s_hi}] keV not covered by {material.name} table [{lo}, {hi}]"
        )


def transmission(material: Material, spectrum: Spectrum, thickness: float) -> float:
    check_coverage(material, spectrum)
    m = mu_total(material, spectrum.bin_energies)
    return float(np.sum(spectrum.weights * np.exp(-m * thickness)))


def hvl(material: Material, spectrum: Spectrum, tol: float = 1e-6, max_iter: int = 200) -> float:
    """Thickness (mm) halving the transmitted photon count."""
    check_coverage(material, spectrum)
    m = mu_total(material, spectrum.bin_energies)
    w = spectrum.weights

    def excess(t):
        return float(np.sum(w * np.exp(-m * t))) - 0.5

    lo, hi = 0.0, 1.0
    while excess(hi) > 0:
        hi *= 2.0
        if hi > 1e9:
            raise RuntimeError("HVL bracket search diverged")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            return 0.5 * (lo + hi)
    raise RuntimeError("HVL bisection did not converge")


# --------------------------------------------------------------------------
# samplers

@njit(cache=True)
def sample_energy_cdf(energies, cdf, u):
    i = np.searchsorted(cdf, u, side="right")
    if i >= energies.shape[0]:
        i = energies.shape[0] - 1
    return energies[i]


def sample_energy(spectrum: Spectrum, u: float) -> float:
    return float(sample_energy_cdf(spectrum.bin_energies, spectrum.cdf(), u))


@njit(cache=True)
def choose_kind(pe, co, ra, u):
    """Interaction drawn with probability proportional to its coefficient (pe, compton, rayleigh order)."""
    x = u * (pe + co + ra)
    if x < pe:
        return 0
    if x < pe + co:
        return 1
    return 2


def choose_interaction(material: Material, energy: float, u: float) -> InteractionKind:
    a = mu(material, energy)
    return InteractionKind(choose_kind(a.photoelectric, a.compton, a.rayleigh, u))


@njit(cache=True)
def compton_energy(energy, cos_theta):
    return energy / (1.0 + (energy / ELECTRON_REST_KEV) * (1.0 - cos_theta))


@njit(cache=True)
def klein_nishina(energy, cos_theta):
    """Unnormalized Klein-Nishina density in cos(theta); maximum 2 at cos = 1."""
    ratio = 1.0 / (1.0 + (energy / ELECTRON_REST_KEV) * (1.0 - cos_theta))
    return ratio * ratio * (ratio + 1.0 / ratio - (1.0 - cos_theta * cos_theta))


@njit(cache=True)
def sample_compton_cos(energy, state):
    while True:
        c = 2.0 * next_uniform(state) - 1.0
        if 2.0 * next_uniform(state) < klein_nishina(energy, c):
            return c


@njit(cache=True)
def sample_rayleigh_cos(state):
    while True:
        c = 2.0 * next_uniform(state) - 1.0
        if 2.0 * next_uniform(state) < 1.0 + c * c:
            return c


def compton_scatter(energy: float, stream: Stream) -> tuple[float, float, float]:
    """(theta, phi, outgoing energy) for a free-electron Compton event."""
    if energy <= 0:
        raise ValueError("energy must be positive")
    c = sample_compton_cos(energy, stream.state)
    phi = 2.0 * math.pi * stream.random()
    return math.acos(c), phi, compton_energy(energy, c)


def rayleigh_scatter(stream: Stream) -> tuple[float, float]:
    c = sample_rayleigh_cos(stream.state)
    phi = 2.0 * math.pi * stream.random()
    return math.acos(c), phi


@njit(cache=True)
def _compton_cos_many(energy, state, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = sample_compton_cos(energy, state)
    return out


@njit(cache=True)
def _rayleigh_cos_many(state, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = sample_rayleigh_cos(state)
    return out


def compton_cos_samples(energy: float, n: int, stream: Stream) -> np.ndarray:
    """Bulk Klein-Nishina cos(theta) draws."""
    return _compton_cos_many(float(energy), stream.state, int(n))


def rayleigh_cos_samples(n: int, stream: Stream) -> np.ndarray:
    return _rayleigh_cos_many(stream.state, int(n))


@njit(cache=True)
def optical_depth(state):
    return -math.log(next_open_uniform(state))
