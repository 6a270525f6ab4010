"""Photon-by-photon transport with scatter-order tallies.

Each photon is emitted from the source toward a uniformly drawn point on the
detector rectangle, transported through the analytic phantom (air is vacuum)
and registered by a perfect, infinitely thin detector together with the
number of times it scattered.  Photon ``i`` draws all of its random numbers
from the counter-based stream ``(seed, i)``, so tallies are bitwise identical
for any split of the photon range across workers.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import AcquisitionGeometry
from .phantom import Phantom, segments
from .physics import (
    MIN_ENERGY_KEV,
    Material,
    Spectrum,
    check_coverage,
    choose_kind,
    compton_energy,
    log_mu,
    optical_depth,
    sample_compton_cos,
    sample_energy_cdf,
    sample_rayleigh_cos,
)
from .projector import expected_flatfield, preprocess
from .rng import next_uniform, stream_key

log = logging.getLogger(__name__)

N_ORDERS = 4  # orders 1, 2, 3 and a 4+ bucket
DETECTED_PRIMARY, DETECTED_SCATTER, ABSORBED, ESCAPED = range(4)
OUTCOME_NAMES = ("detected_primary", "detected_scatter", "absorbed", "escaped")
_DETECTED = DETECTED_SCATTER  # single-photon result code for any detection
_MAX_EVENTS = 100_000


@dataclass
class Tally:
    primary: np.ndarray
    scatter: np.ndarray
    per_order: np.ndarray | None = None

    def __add__(self, other: "Tally") -> "Tally":
        orders = None
        if self.per_order is not None and other.per_order is not None:
            orders = self.per_order + other.per_order
        return Tally(self.primary + other.primary, self.scatter + other.scatter, orders)


@dataclass
class ProjectionSet:
    tally: Tally
    flatfield: np.ndarray
    with_scatter_log: np.ndarray
    primary_only_log: np.ndarray
    spr: np.ndarray
    outcomes: dict = field(default_factory=dict)

    @classmethod
    def from_tally(cls, tally: Tally, flatfield: np.ndarray, outcomes: dict | None = None) -> "ProjectionSet":
        p = tally.primary.astype(np.float64)
        s = tally.scatter.astype(np.float64)
        return cls(
            tally=tally,
            flatfield=flatfield,
            with_scatter_log=preprocess(p + s, flatfield),
            primary_only_log=preprocess(p, flatfield),
            spr=spr_map(tally),
            outcomes=dict(outcomes or {}),
        )


# --------------------------------------------------------------------------
# kernel

@njit(cache=True, inline="always")
def _rotate(ux, uy, uz, cos_t, phi):
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    cp = math.cos(phi)
    sp = math.sin(phi)
    if abs(uz) > 0.99999:
        nx = sin_t * cp
        ny = sin_t * sp
        nz = cos_t if uz > 0 else -cos_t
    else:
        tmp = math.sqrt(1.0 - uz * uz)
        nx = sin_t * (ux * uz * cp - uy * sp) / tmp + ux * cos_t
        ny = sin_t * (uy * uz * cp + ux * sp) / tmp + uy * cos_t
        nz = -sin_t * cp * tmp + uz * cos_t
    norm = math.sqrt(nx * nx + ny * ny + nz * nz)
    return nx / norm, ny / norm, nz / norm


@njit(cache=True)
def _transport(px, py, pz, ux, uy, uz, energy, params, table, geo, state):
    """Transport one photon; returns (outcome, row, col, scatter_count)."""
    sod, sdd, width, height, pitch = geo[0], geo[1], geo[2], geo[3], geo[4]
    n_cols, n_rows = int(geo[5]), int(geo[6])
    xd = sdd - sod
    nscat = 0
    for _ in range(_MAX_EVENTS):
        m0s, m0e, vs, ve, m1s, m1e = segments(px, py, pz, ux, uy, uz, params, 0.0)
        len0 = m0e - m0s
        len1 = m1e - m1s
        t_hit = -1.0
        mu_pe = 0.0
        mu_co = 0.0
        mu_ra = 0.0
        if len0 > 0.0 or len1 > 0.0:
            lpe, lco, lra = log_mu(table, energy)
            mu_pe = math.exp(lpe)
            mu_co = math.exp(lco)
            mu_ra = math.exp(lra)
            mu = mu_pe + mu_co + mu_ra
            tau = optical_depth(state)
            if len0 > 0.0:
                if tau < mu * len0:
                    t_hit = m0s + tau / mu
                else:
                    tau -= mu * len0
            if t_hit < 0.0 and len1 > 0.0:
                if tau < mu * len1:
                    t_hit = m1s + tau / mu
        if t_hit < 0.0:
            # free flight to the detector plane
            if ux <= 0.0:
                return ESCAPED, -1, -1, nscat
            t = (xd - px) / ux
            y = py + t * uy
            z = pz + t * uz
            if abs(y) > 0.5 * width or abs(z) > 0.5 * height:
                return ESCAPED, -1, -1, nscat
            col = min(max(int((y + 0.5 * width) / pitch), 0), n_cols - 1)
            row = min(max(int((0.5 * height - z) / pitch), 0), n_rows - 1)
            return _DETECTED, row, col, nscat
        px += t_hit * ux
        py += t_hit * uy
        pz += t_hit * uz
        kind = choose_kind(mu_pe, mu_co, mu_ra, next_uniform(state))
        if kind == 0:
            return ABSORBED, -1, -1, nscat
        if kind == 1:
            cos_t = sample_compton_cos(energy, state)
            energy = compton_energy(energy, cos_t)
        else:
            cos_t = sample_rayleigh_cos(state)
        phi = 2.0 * math.pi * next_uniform(state)
        ux, uy, uz = _rotate(ux, uy, uz, cos_t, phi)
        nscat += 1
        if energy < MIN_ENERGY_KEV:
            return ABSORBED, -1, -1, nscat
    return ABSORBED, -1, -1, nscat


@njit(cache=True, nogil=True)
def _simulate_range(start, stop, seed, geo, params, energies, cdf, table, keep_orders):
    sod, width, height, pitch = geo[0], geo[2], geo[3], geo[4]
    n_cols, n_rows = int(geo[5]), int(geo[6])
    xd = geo[1] - sod
    primary = np.zeros((n_rows, n_cols), dtype=np.int64)
    scatter = np.zeros((n_rows, n_cols), dtype=np.int64)
    if keep_orders:
        orders = np.zeros((4, n_rows, n_cols), dtype=np.int64)
    else:
        orders = np.zeros((4, 1, 1), dtype=np.int64)
    outcomes = np.zeros(4, dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    for n in range(start, stop):
        state[0] = stream_key(seed, n)
        energy = sample_energy_cdf(energies, cdf, next_uniform(state))
        y0 = (next_uniform(state) - 0.5) * width
        z0 = (next_uniform(state) - 0.5) * height
        dx = xd + sod
        norm = math.sqrt(dx * dx + y0 * y0 + z0 * z0)
        outcome, row, col, nscat = _transport(-sod, 0.0, 0.0, dx / norm, y0 / norm, z0 / norm,
                                              energy, params, table, geo, state)
        if outcome == _DETECTED and nscat == 0:
            # unscattered photons land exactly where they were aimed
            col = min(int((y0 + 0.5 * width) / pitch), n_cols - 1)
            row = min(int((0.5 * height - z0) / pitch), n_rows - 1)
            primary[row, col] += 1
            outcomes[DETECTED_PRIMARY] += 1
        elif outcome == _DETECTED:
            scatter[row, col] += 1
            if keep_orders:
                orders[min(nscat, 4) - 1, row, col] += 1
            outcomes[DETECTED_SCATTER] += 1
        else:
            outcomes[outcome] += 1
    return primary, scatter, orders, outcomes


# --------------------------------------------------------------------------
# public API

def _chunks(n: int, k: int) -> list[tuple[int, int]]:
    k = max(1, min(k, n))
    edges = [n * i // k for i in range(k + 1)]
    return [(edges[i], edges[i + 1]) for i in range(k)]


def simulate_tally(phantom: Phantom, geometry: AcquisitionGeometry, spectrum: Spectrum, material: Material,
                   n_photons: int, seed: int, workers: int = 1, keep_orders: bool = False):
    """Raw tallies and outcome counts for photons ``0 .. n_photons - 1``."""
    if n_photons < 1:
        raise ValueError("photon budget must be >= 1")
    check_coverage(material, spectrum)
    args = (seed, geometry.as_array(), phantom.params(), spectrum.bin_energies, spectrum.cdf(),
            material.kernel_table(), keep_orders)
    ranges = _chunks(int(n_photons), int(workers))
    if len(ranges) == 1:
        parts = [_simulate_range(0, int(n_photons), *args)]
    else:
        with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
            parts = list(pool.map(lambda r: _simulate_range(r[0], r[1], *args), ranges))
    primary, scatter, orders, outcomes = parts[0]
    for p, s, o, c in parts[1:]:
        primary = primary + p
        scatter = scatter + s
        orders = orders + o
        outcomes = outcomes + c
    tally = Tally(primary, scatter, orders if keep_orders else None)
    return tally, dict(zip(OUTCOME_NAMES, (int(v) for v in outcomes)))


def simulate(phantom: Phantom, geometry: AcquisitionGeometry, spectrum: Spectrum, material: Material,
             n_photons: int, seed: int, workers: int = 1, keep_orders: bool = False) -> ProjectionSet:
    tally, outcomes = simulate_tally(phantom, geometry, spectrum, material, n_photons, seed, workers, keep_orders)
    return ProjectionSet.from_tally(tally, expected_flatfield(geometry, n_photons), outcomes)


def transport_photon(origin, direction, energy: float, phantom: Phantom, material: Material,
                     geometry: AcquisitionGeometry, seed: int, index: int = 0):
    """Transport a single photon from an explicit state.

    Returns ``("detected", (row, col), scatter_count)``, ``("absorbed", None, n)``
    or ``("escaped", None, n)``.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    state = np.array([stream_key(seed, index)], dtype=np.uint64)
    outcome, row, col, nscat = _transport(float(origin[0]), float(origin[1]), float(origin[2]),
                                          d[0], d[1], d[2], float(energy), phantom.params(),
                                          material.kernel_table(), geometry.as_array(), state)
    if outcome == _DETECTED:
        return "detected", (int(row), int(col)), int(nscat)
    return ("absorbed" if outcome == ABSORBED else "escaped"), None, int(nscat)


def spr_map(tally: Tally) -> np.ndarray:
    """S / P per pixel; NaN where P = 0."""
    p = tally.primary.astype(np.float64)
    s = tally.scatter.astype(np.float64)
    out = np.full(p.shape, np.nan)
    np.divide(s, p, out=out, where=p > 0)
    return out


def make_dataset_pair(ps: ProjectionSet) -> tuple[np.ndarray, np.ndarray]:
    """(with-scatter, primary-only) preprocessed images."""
    return ps.with_scatter_log, ps.primary_only_log


def _mask_bool(ps: ProjectionSet, mask) -> np.ndarray:
    m = np.asarray(mask) > 0.5
    if m.shape != ps.spr.shape:
        raise ValueError(f"mask shape {m.shape} does not match projection {ps.spr.shape}")
    if not m.any():
        raise ValueError("mask is empty")
    return m


def masked_spr(ps: ProjectionSet, mask) -> tuple[float, int, int]:
    """(mean SPR over valid mask pixels, valid count, excluded count)."""
    m = _mask_bool(ps, mask)
    vals = ps.spr[m]
    valid = np.isfinite(vals)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return math.nan, 0, int(m.sum())
    return float(vals[valid].mean()), n_valid, int(m.sum()) - n_valid


def defect_spr(ps: ProjectionSet, mask) -> float:
    value, n_valid, n_excluded = masked_spr(ps, mask)
    if n_valid == 0:
        raise ValueError("no mask pixel has a valid SPR (P = 0 everywhere under the mask)")
    if n_excluded:
        log.debug("defect SPR: excluded %d mask pixels with P = 0", n_excluded)
    return value


def attenuation_at(ps: ProjectionSet, mask) -> float:
    """Mean with-scatter attenuation ``-ln(I / I0)`` over the mask."""
    m = _mask_bool(ps, mask)
    return float(ps.with_scatter_log[m].mean())
