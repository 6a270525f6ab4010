"""Result tables and SVG figures built from records.csv and fit.csv files only."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from . import pod
from .detect import read_records
from .svg import PALETTE, Figure

VARIANTS = ("with", "without")
TABLE1_FIELDS = ("variant", "s90_mm", "s90_95_mm")
TABLE2_FIELDS = ("variant", "max_spr", "s90_at_spr0_mm", "s90_at_max_spr_mm")


def _r(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.9g}"


def _safe(fn, *args, **kw) -> float:
    try:
        return fn(*args, **kw)
    except (pod.FitError, pod.DetectabilityError, pod.BracketError, ValueError):
        return math.nan


def relative_difference(s90_with: float, s90_without: float) -> float:
    """(s90_without - s90_with) / s90_with."""
    return (s90_without - s90_with) / s90_with


def table1(fits: dict) -> list[tuple]:
    """Rows of (variant, s90, s90/95); a ``difference`` row when both variants are present."""
    rows = []
    for v in VARIANTS:
        if v in fits:
            f = fits[v]
            rows.append((v, _safe(pod.s90, f), _safe(pod.s90_95, f)))
    if len(rows) == 2:
        (_, a90, a95), (_, b90, b95) = rows
        rows.append(("difference", relative_difference(a90, b90), relative_difference(a95, b95)))
    return rows


def table2(multi_fits: dict, max_sprs: dict) -> list[tuple]:
    rows = []
    for v in VARIANTS:
        if v in multi_fits:
            f, m = multi_fits[v], max_sprs[v]
            rows.append((v, m, _safe(pod.s90, f, 0.0), _safe(pod.s90, f, m)))
    return rows


def write_table(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([row[0], *(_r(x) for x in row[1:])])


def _size_axis(records, fit=None):
    sizes = [r.defect_size_mm for r in records]
    hi = max(sizes) if sizes else 1.0
    if fit is not None:
        s = _safe(pod.s90_95, fit)
        if math.isfinite(s):
            hi = max(hi, s)
    return 0.0, 1.05 * hi


def _curve(fit, xs, spr=None):
    pts = [pod.pod_eval(fit, float(x), spr) for x in xs]
    return [p.p for p in pts], [p.lo95 for p in pts], [p.hi95 for p in pts]


def plot_pod_curve(ax, fit, records, color=PALETTE[0]):
    xs = np.linspace(*ax.xlim, 200)
    p, lo, hi = _curve(fit, xs)
    ax.band(xs, lo, hi, color=color)
    ax.line(xs, p, color=color)
    for r in records:
        y = 0.02 if not r.success else 0.98
        ax.line([r.defect_size_mm] * 2, [y - 0.02, y + 0.02], color="#333333", width=0.8)
    ax.vline(_safe(pod.s90, fit), color=color)
    ax.vline(_safe(pod.s90_95, fit), color="#777777", dash="2,2")


def figure_pod(records, fit, path, title="", n_bins: int = 10) -> None:
    """Three panels: F1 vs size, binned success fraction, POD curve with band.

    ``records`` must already carry success flags (see ``pod.binarize``).
    """
    fig = Figure(1260, 380)
    xlim = _size_axis(records, fit)
    ax = fig.add_axes(xlim, (0, 1), f"{title} F1 vs size", "defect size [mm]", "F1", box=(60, 40, 340, 280))
    ax.points([r.defect_size_mm for r in records], [r.f1 for r in records])
    ax.line(list(xlim), [0.5, 0.5], color="#999999", width=1.0, dash="4,3")
    ax = fig.add_axes(xlim, (0, 1), "success fraction", "defect size [mm]", "fraction", box=(480, 40, 340, 280))
    if len(records) >= 1:
        h = pod.binned_histogram(records, n_bins)
        ax.bars(list(h.bin_edges), [float(v) for v in h.success_fraction])
    ax = fig.add_axes(xlim, (0, 1), "POD", "defect size [mm]", "POD", box=(900, 40, 340, 280))
    if fit is not None:
        plot_pod_curve(ax, fit, records)
    fig.save(path)


def figure_fixed_spr(multi_fits: dict, sprs, xlim, path) -> None:
    """Multivariate POD curves of each variant at a few fixed SPR values."""
    fig = Figure(520, 380)
    ax = fig.add_axes(xlim, (0, 1), "POD at fixed SPR", "defect size [mm]", "POD")
    xs = np.linspace(*xlim, 200)
    legend = []
    for k, spr in enumerate(sprs):
        color = PALETTE[k % len(PALETTE)]
        for v, dash in zip(VARIANTS, (None, "5,3")):
            if v not in multi_fits:
                continue
            p, lo, hi = _curve(multi_fits[v], xs, spr)
            ax.band(xs, lo, hi, color=color, opacity=0.1)
            ax.line(xs, p, color=color, dash=dash)
            legend.append((f"{v}, SPR={spr:g}", color))
    ax.legend(legend)
    fig.save(path)


def _load_fit(path):
    return pod.read_fit(path) if Path(path).exists() else None


def make_report(run_dir, out_dir=None, threshold: float = 0.5, n_bins: int = 10) -> Path:
    """Tables and figures for every variant subdirectory holding records.csv."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    records, fits, multi, max_spr = {}, {}, {}, {}
    for v in VARIANTS:
        rec_path = run_dir / v / "records.csv"
        if not rec_path.exists():
            continue
        records[v] = pod.binarize(read_records(rec_path), threshold)
        fit = _load_fit(run_dir / v / "fit.csv")
        if fit is not None:
            fits[v] = fit
        mfit = _load_fit(run_dir / v / "fit_spr.csv")
        if mfit is not None:
            multi[v] = mfit
            finite = [r.defect_spr for r in records[v] if math.isfinite(r.defect_spr)]
            max_spr[v] = max(finite) if finite else math.nan
    if not records:
        raise FileNotFoundError(f"{run_dir}: no variant records found")
    write_table(out / "table1.csv", TABLE1_FIELDS, table1(fits))
    write_table(out / "table2.csv", TABLE2_FIELDS, table2(multi, max_spr))
    for v, recs in records.items():
        figure_pod(recs, fits.get(v), out / f"pod_{v}.svg", title=v, n_bins=n_bins)
    if multi:
        top = max((m for m in max_spr.values() if math.isfinite(m)), default=0.0)
        levels = [s for s in (0.0, 0.5, 1.0) if s <= top] or [0.0]
        all_recs = [r for recs in records.values() for r in recs]
        figure_fixed_spr(multi, levels, _size_axis(all_recs), out / "pod_fixed_spr.svg")
    return out
