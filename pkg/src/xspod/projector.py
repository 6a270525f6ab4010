"""Deterministic polychromatic cone-beam projection, ground-truth masks and
flatfield/log preprocessing."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .geometry import AcquisitionGeometry
from .phantom import Phantom, material_length, void_length
from .physics import Material, Spectrum, check_coverage, mu_total

ZERO_COUNT_CLAMP = 0.5


def expected_flatfield(geometry: AcquisitionGeometry, n_photons: int) -> np.ndarray:
    """Closed-form I0 per pixel when emission is uniform over the detector rectangle."""
    if n_photons < 1:
        raise ValueError("n_photons must be >= 1")
    value = n_photons * geometry.pixel_pitch ** 2 / (geometry.det_width * geometry.det_height)
    return np.full(geometry.shape, value, dtype=np.float64)


@njit(cache=True)
def _trace(geo, params, supersample, mode):
    sod, sdd, width, height, pitch = geo[0], geo[1], geo[2], geo[3], geo[4]
    n_cols, n_rows = int(geo[5]), int(geo[6])
    xd = sdd - sod
    out = np.empty((n_rows, n_cols, supersample * supersample))
    for i in range(n_rows):
        for j in range(n_cols):
            k = 0
            for si in range(supersample):
                for sj in range(supersample):
                    y = (j + (sj + 0.5) / supersample) * pitch - 0.5 * width
                    z = 0.5 * height - (i + (si + 0.5) / supersample) * pitch
                    dx = xd + sod
                    norm = math.sqrt(dx * dx + y * y + z * z)
                    if mode == 0:
                        out[i, j, k] = material_length(-sod, 0.0, 0.0, dx / norm, y / norm, z / norm, params)
                    else:
                        out[i, j, k] = void_length(-sod, 0.0, 0.0, dx / norm, y / norm, z / norm, params)
                    k += 1
    return out


@njit(cache=True)
def _polychromatic(lengths, weights, mus):
    n_rows, n_cols, n_sub = lengths.shape
    out = np.empty((n_rows, n_cols))
    for i in range(n_rows):
        for j in range(n_cols):
            acc = 0.0
            for k in range(n_sub):
                L = lengths[i, j, k]
                t = 0.0
                if L == 0.0:
                    t = 1.0
                else:
                    for e in range(weights.shape[0]):
                        t += weights[e] * math.exp(-mus[e] * L)
                acc += t
            out[i, j] = acc / n_sub
    return out


def material_lengths(phantom: Phantom, geometry: AcquisitionGeometry, supersample: int = 1) -> np.ndarray:
    """Material path length (mm) of every pixel ray, shape (rows, cols, supersample**2)."""
    return _trace(geometry.as_array(), phantom.params(), int(supersample), 0)


def forward_project(phantom: Phantom, geometry: AcquisitionGeometry, spectrum: Spectrum,
                    material: Material, n_photons: int = 10**7, supersample: int = 1):
    """Noise-free projection: (expected counts, transmission).

    Transmission is the spectrum-weighted Beer-law average over the material
    chord of each pixel-center ray; the cavity does not attenuate.
    """
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    check_coverage(material, spectrum)
    keep = spectrum.fluence > 0
    weights = spectrum.weights[keep]
    mus = mu_total(material, spectrum.bin_energies[keep])
    lengths = material_lengths(phantom, geometry, supersample)
    trans = _polychromatic(lengths, weights, mus)
    return trans * expected_flatfield(geometry, n_photons), trans


def ground_truth_mask(phantom: Phantom, geometry: AcquisitionGeometry) -> np.ndarray:
    """1 where the pixel-center ray crosses the cavity.

    A cavity small enough to slip between pixel-center rays still marks the
    pixel under its projected center, so the mask is empty only for an empty
    cavity.
    """
    mask = (_trace(geometry.as_array(), phantom.params(), 1, 1)[:, :, 0] > 0).astype(np.float32)
    if not mask.any() and not phantom.cavity.is_empty:
        pix = project_point(geometry, phantom.cavity.center)
        if pix is not None:
            mask[pix] = 1.0
    return mask


def project_point(geometry: AcquisitionGeometry, point):
    """(row, col) of the pixel containing the cone-beam projection of ``point``, or None."""
    x, y, z = (float(v) for v in point)
    scale = geometry.sdd / (x + geometry.sod)
    yd, zd = y * scale, z * scale
    if abs(yd) >= 0.5 * geometry.det_width or abs(zd) >= 0.5 * geometry.det_height:
        return None
    col = min(int((yd + 0.5 * geometry.det_width) / geometry.pixel_pitch), geometry.n_cols - 1)
    row = min(int((0.5 * geometry.det_height - zd) / geometry.pixel_pitch), geometry.n_rows - 1)
    return row, col


def silhouette_mask(phantom: Phantom, geometry: AcquisitionGeometry) -> np.ndarray:
    """1 where the pixel-center ray crosses the cylinder (material or cavity)."""
    p = phantom.params()
    p[5:] = 0.0  # drop the cavity so void rays count as material
    return (_trace(geometry.as_array(), p, 1, 0)[:, :, 0] > 0).astype(np.float32)


def preprocess(counts, flatfield) -> np.ndarray:
    """Flatfield + log: ``-ln(counts / flatfield)`` with zero counts clamped to 0.5."""
    counts = np.asarray(counts, dtype=np.float64)
    flatfield = np.asarray(flatfield, dtype=np.float64)
    if counts.shape != flatfield.shape:
        raise ValueError(f"shape mismatch: counts {counts.shape} vs flatfield {flatfield.shape}")
    if np.any(~(flatfield > 0)):
        raise ValueError("flatfield must be positive everywhere")
    if np.any(~np.isfinite(counts)) or np.any(counts < 0):
        raise ValueError("counts must be finite and nonnegative")
    return -np.log(np.where(counts > 0, counts, ZERO_COUNT_CLAMP) / flatfield)


def apply_poisson_noise(expected, seed: int) -> np.ndarray:
    expected = np.asarray(expected, dtype=np.float64)
    if np.any(expected < 0) or np.any(~np.isfinite(expected)):
        raise ValueError("expected counts must be finite and nonnegative")
    return np.random.default_rng(seed).poisson(expected).astype(np.float64)
