"""Baseline defect segmentation, external mask import and F1 scoring."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .formats import read_xr32

MASK_SUFFIX = "_mask.xr32"
_MAD_SCALE = 1.4826
_TUKEY_C = 4.685


@dataclass(frozen=True)
class DetectionRecord:
    phantom_id: int
    defect_size_mm: float
    defect_spr: float
    f1: float
    success: bool = False

    def __post_init__(self):
        if not self.defect_size_mm > 0:
            raise ValueError(f"phantom {self.phantom_id}: defect size must be positive")
        if not 0.0 <= self.f1 <= 1.0:
            raise ValueError(f"phantom {self.phantom_id}: f1 {self.f1} outside [0, 1]")


@dataclass(frozen=True)
class DetectorParams:
    """Knobs of the row-wise background-subtraction detector.

    Pixels within ``max(edge_margin_px, edge_margin_frac * width)`` of either
    end of a row's silhouette are fitted but never flagged: there the profile
    is too steep for a low-degree background. ``smooth_px`` is the Gaussian
    sigma applied to the residual before thresholding (0 = per pixel);
    ``silhouette_smooth_px`` smooths the image only for finding the object
    footprint.
    """
    background_degree: int = 4
    noise_k: float = 4.0
    min_component_px: int = 4
    silhouette_floor: float = 0.05
    edge_margin_px: int = 2
    edge_margin_frac: float = 0.08
    smooth_px: float = 0.0
    robust_iterations: int = 6
    silhouette_smooth_px: float = 2.0

    def __post_init__(self):
        if not 0 <= self.background_degree <= 6:
            raise ValueError("background_degree must lie in [0, 6]")
        if not self.noise_k > 0:
            raise ValueError("noise_k must be positive")
        if self.min_component_px < 1:
            raise ValueError("min_component_px must be >= 1")
        if self.edge_margin_px < 0 or not 0 <= self.edge_margin_frac < 0.5:
            raise ValueError("edge margins must be nonnegative and below half the width")
        if self.smooth_px < 0 or self.silhouette_smooth_px < 0 or self.robust_iterations < 1:
            raise ValueError("smoothing widths must be >= 0 and robust_iterations >= 1")


def robust_polyfit(x: np.ndarray, y: np.ndarray, degree: int, iterations: int = 6) -> np.ndarray:
    """Fitted values of a Tukey-biweight IRLS polynomial fit."""
    V = np.vander(x, degree + 1)
    w = np.ones_like(y)
    fitted = np.zeros_like(y)
    for _ in range(iterations):
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(V * sw[:, None], y * sw, rcond=None)
        fitted = V @ coef
        r = y - fitted
        s = _MAD_SCALE * np.median(np.abs(r))
        if s <= 0:
            break
        u = r / (_TUKEY_C * s)
        w = np.where(np.abs(u) < 1.0, (1.0 - u * u) ** 2, 0.0)
        if np.count_nonzero(w) <= degree:
            break
    return fitted


def object_silhouette(projection, params: DetectorParams = DetectorParams()) -> np.ndarray:
    """Boolean footprint of the object: one contiguous column interval per row.

    The attenuation image is smoothed before thresholding so that noisy air
    pixels do not clear the floor, and only the largest connected component is
    kept.  A convex object projects to a single interval in every row, so
    interior gaps (a strong cavity, a noise dip) are filled.
    """
    img = np.asarray(projection, dtype=np.float64)
    smooth = ndimage.gaussian_filter(img, params.silhouette_smooth_px) if params.silhouette_smooth_px > 0 else img
    raw = smooth > params.silhouette_floor
    labels, n = ndimage.label(raw)
    out = np.zeros(img.shape, dtype=bool)
    if n == 0:
        return out
    sizes = ndimage.sum_labels(raw, labels, np.arange(1, n + 1))
    blob = labels == (int(np.argmax(sizes)) + 1)
    for i in np.flatnonzero(blob.any(axis=1)):
        cols = np.flatnonzero(blob[i])
        out[i, cols[0]:cols[-1] + 1] = True
    return out


def background_residual(projection, params: DetectorParams = DetectorParams()):
    """(residual = background - observed, fitted-pixel mask) of the row-wise fit."""
    img = np.asarray(projection, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("projection must be 2-D")
    if not np.all(np.isfinite(img)):
        raise ValueError("projection contains non-finite values")
    silhouette = object_silhouette(img, params)
    residual = np.zeros_like(img)
    fitted = np.zeros_like(silhouette)
    for i in range(img.shape[0]):
        cols = np.flatnonzero(silhouette[i])
        m = max(params.edge_margin_px, math.ceil(params.edge_margin_frac * cols.size))
        if cols.size < params.background_degree + 2 + 2 * m:
            continue
        x = (cols - 0.5 * (cols[0] + cols[-1])) / max(1.0, 0.5 * (cols[-1] - cols[0]))
        y = img[i, cols]
        # a chord through a round section goes like sqrt(1 - x^2), so the
        # squared profile is the one a low-degree polynomial follows
        sq = robust_polyfit(x, y * np.abs(y), params.background_degree, params.robust_iterations)
        bg = np.sign(sq) * np.sqrt(np.abs(sq))
        inner = slice(m, cols.size - m)
        residual[i, cols[inner]] = (bg - y)[inner]
        fitted[i, cols[inner]] = True
    return residual, fitted


def detect_baseline(projection, params: DetectorParams = DetectorParams()) -> np.ndarray:
    """Binary float32 mask of pixels whose attenuation dips below the row background.

    Each row's in-silhouette profile gets a robust polynomial background; the
    residual is thresholded at ``noise_k`` times the MAD noise estimate pooled
    over the silhouette, and connected components smaller than
    ``min_component_px`` are dropped.
    """
    residual, fitted = background_residual(projection, params)
    mask = np.zeros(residual.shape, dtype=np.float32)
    if not fitted.any():
        return mask
    if params.smooth_px > 0:
        w = ndimage.gaussian_filter(fitted.astype(float), params.smooth_px)
        r = ndimage.gaussian_filter(np.where(fitted, residual, 0.0), params.smooth_px)
        residual = np.where(fitted, r / np.maximum(w, 1e-12), 0.0)
    vals = residual[fitted]
    sigma = _MAD_SCALE * np.median(np.abs(vals - np.median(vals)))
    if not sigma > 0:
        return mask
    hits = fitted & (residual > params.noise_k * sigma)
    labels, n = ndimage.label(hits)
    if n:
        sizes = ndimage.sum_labels(hits, labels, np.arange(1, n + 1))
        keep = np.flatnonzero(sizes >= params.min_component_px) + 1
        mask[np.isin(labels, keep)] = 1.0
    return mask


# --------------------------------------------------------------------------
# masks

def _as_binary(mask, name="mask") -> np.ndarray:
    a = np.asarray(mask)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name}: values must be 0 or 1")
    return a.astype(bool)


def import_masks(directory, shape: tuple[int, int] | None = None) -> dict[int, np.ndarray]:
    """Load ``<id>_mask.xr32`` files as validated float32 0/1 masks keyed by id."""
    out = {}
    pattern = re.compile(r"^(\d+)" + re.escape(MASK_SUFFIX) + "$")
    for path in sorted(Path(directory).iterdir()):
        match = pattern.match(path.name)
        if not match:
            continue
        raster = read_xr32(path)
        if shape is not None and raster.shape != tuple(shape):
            raise ValueError(f"{path.name}: shape {raster.shape} does not match projections {tuple(shape)}")
        _as_binary(raster, path.name)
        out[int(match.group(1))] = raster
    return out


def f1_score(predicted, truth) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    p = _as_binary(predicted, "prediction")
    t = _as_binary(truth, "ground truth")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    tp = np.count_nonzero(p & t)
    denom = 2 * tp + np.count_nonzero(p & ~t) + np.count_nonzero(~p & t)
    return 1.0 if denom == 0 else 2.0 * tp / denom


def score_dataset(masks: dict, ground_truths: dict, sizes: dict, sprs: dict) -> list[DetectionRecord]:
    """One record per ground-truth id, ordered by id.

    ``sizes`` and ``sprs`` map phantom id to defect size (mm) and defect SPR.
    """
    records = []
    for pid in sorted(ground_truths):
        if pid not in masks:
            raise KeyError(f"no mask for phantom {pid}")
        records.append(DetectionRecord(int(pid), float(sizes[pid]), float(sprs[pid]),
                                       f1_score(masks[pid], ground_truths[pid])))
    return records


# --------------------------------------------------------------------------
# records.csv

RECORD_FIELDS = ("phantom_id", "defect_size_mm", "defect_spr", "f1")


def _r9(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.9g}"


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.phantom_id, _r9(r.defect_size_mm), _r9(r.defect_spr), _r9(r.f1)])


def read_records(path) -> list[DetectionRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
            raise ValueError(f"{path}: expected columns {','.join(RECORD_FIELDS)}")
        return [DetectionRecord(int(row["phantom_id"]), float(row["defect_size_mm"]),
                                float(row["defect_spr"]), float(row["f1"])) for row in reader]
