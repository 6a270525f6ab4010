"""``xspod`` command line.

Exit status: 0 success, 2 validation error (bad usage, config, values, or a
fit the data cannot support), 3 I/O error (missing, unreadable or corrupt
files).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, pod
from .detect import read_records, write_records
from .formats import FormatError, write_meta, write_xr32
from .geometry import AcquisitionGeometry
from .phantom import GenerationError, PhantomParamRanges, generate_set, read_phantoms, write_phantoms
from .physics import hvl, resolve_material, resolve_spectrum
from .pipeline import (ConfigError, StageError, detect_dir, effective_workers, load_detector_params, run,
                       score_dir, simulate_to_dir, validate_config, ExperimentConfig)
from .projector import forward_project, ground_truth_mask, silhouette_mask
from .report import figure_pod, make_report

EXIT_VALIDATION = 2
EXIT_IO = 3


def _pair(text):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'min,max', got {text!r}") from None
    return lo, hi


def _spectrum_label(ref: str) -> tuple[str, float]:
    if ref.lower().startswith("kramers:"):
        return ref.lower(), float(ref.split(":", 1)[1])
    return Path(ref).name, float(resolve_spectrum(ref).bin_energies.max())


# --------------------------------------------------------------------------
# commands

def cmd_phantoms(a):
    ranges = PhantomParamRanges(a.radius, a.height, a.cavity_radius, a.axis_ratio)
    ps = generate_set(a.seed, a.n_train, a.n_val, a.n_test, ranges, a.material)
    write_phantoms(a.out, ps)
    print(f"wrote {len(ps)} phantoms to {a.out}")


def cmd_hvl(a):
    print(f"{hvl(resolve_material(a.material), resolve_spectrum(a.spectrum)):.6g}")


def cmd_simulate(a):
    ps = read_phantoms(a.phantoms)
    label, kv = _spectrum_label(a.spectrum)
    workers = effective_workers(ExperimentConfig(workers=a.workers))
    simulate_to_dir(ps, AcquisitionGeometry(), resolve_spectrum(a.spectrum), resolve_material(a.material),
                    a.photons, a.seed, workers, Path(a.out), label, kv)
    print(f"simulated {len(ps)} phantoms into {a.out}")


def cmd_project(a):
    ps = read_phantoms(a.phantoms)
    g = AcquisitionGeometry()
    spectrum, material = resolve_spectrum(a.spectrum), resolve_material(a.material)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    label, kv = _spectrum_label(a.spectrum)
    for split, p in ps.items():
        counts, trans = forward_project(p, g, spectrum, material, a.photons, a.supersample)
        write_xr32(out / f"{p.id}_expected.xr32", counts)
        write_xr32(out / f"{p.id}_transmission.xr32", trans)
        write_xr32(out / f"{p.id}_mask.xr32", ground_truth_mask(p, g))
        write_xr32(out / f"{p.id}_silhouette.xr32", silhouette_mask(p, g))
        write_meta(out / f"{p.id}.meta", {"phantom_id": p.id, "split": split, "material": material.name,
                                           "spectrum": label, "tube_kV": f"{kv:g}", "photons": a.photons})
    print(f"projected {len(ps)} phantoms into {a.out}")


def _ids(sim_dir: Path, phantoms: str | None, split: str) -> list[int]:
    if phantoms:
        ps = read_phantoms(phantoms)
        return [p.id for s, p in ps.items() if split == "all" or s == split]
    return sorted(int(p.name.split("_")[0]) for p in sim_dir.glob("*_mask.xr32"))


def cmd_detect(a):
    params = load_detector_params(a.params) if a.params else ExperimentConfig().detector_params()
    ids = _ids(Path(a.in_dir), a.phantoms, a.split)
    detect_dir(a.in_dir, ids, a.variant, params, Path(a.out))
    print(f"wrote {len(ids)} masks to {a.out}")


def cmd_score(a):
    ids = _ids(Path(a.truth), a.phantoms, a.split)
    records = score_dir(a.masks, a.truth, ids)
    write_records(a.out, records)
    print(f"wrote {len(records)} records to {a.out}")


def _fit_from_records(path, link, covariate):
    records = pod.binarize(read_records(path), 0.5)
    if covariate == "spr":
        keep = [r for r in records if np.isfinite(r.defect_spr)]
        if len(keep) < len(records):
            print(f"excluded {len(records) - len(keep)} records without a finite SPR", file=sys.stderr)
        return pod.fit_pod_multi([r.defect_size_mm for r in keep], [r.defect_spr for r in keep],
                                 [r.success for r in keep], link)
    return pod.fit_pod([r.defect_size_mm for r in records], [r.success for r in records], link)


def cmd_pod_fit(a):
    fit = _fit_from_records(a.records, a.link, a.covariate)
    pod.write_fit(a.out, fit)
    print(" ".join(f"{n}={c:.6g}" for n, c in zip(("alpha", "beta", "gamma"), fit.coefficients)))


def cmd_pod_eval(a):
    fit = pod.read_fit(a.fit)
    print("s,p,lo95,hi95")
    for s in a.s:
        pt = pod.pod_eval(fit, s, a.spr)
        print(f"{s:.6g},{pt.p:.6g},{pt.lo95:.6g},{pt.hi95:.6g}")


def cmd_pod_s90(a):
    fit = pod.read_fit(a.fit)
    print(f"s90 = {pod.s90(fit, a.spr):.6g}")
    print(f"s90_95 = {pod.s90_95(fit, a.spr):.6g}")


def cmd_pod_compare(a):
    fa, fb = pod.read_fit(a.a), pod.read_fit(a.b)
    grid = np.linspace(a.min_size, a.max_size, a.points)
    print(pod.compare_fits(fa, fb, grid, a.spr).verdict)


def cmd_pod_plot(a):
    fit = pod.read_fit(a.fit)
    records = pod.binarize(read_records(a.records), a.threshold)
    figure_pod(records, fit, a.out, title=Path(a.records).stem)
    print(f"wrote {a.out}")


def cmd_run(a):
    cfg = validate_config(a.config)
    out = a.out or str(Path(a.config).parent / cfg.output_dir)
    manifest = run(cfg, out)
    print(f"run complete: {out} (config {manifest.config_hash[:12]})")


def cmd_report(a):
    out = make_report(a.run, a.out, a.threshold)
    print(f"report written to {out}")


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xspod", description="X-ray scatter simulation and POD analysis")
    p.add_argument("--version", action="version", version=f"xspod {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantoms", help="generate a phantom set CSV")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n-train", type=int, default=0)
    s.add_argument("--n-val", type=int, default=0)
    s.add_argument("--n-test", type=int, default=10)
    s.add_argument("--material", default="pmma", help="material label stored with each phantom")
    s.add_argument("--radius", type=_pair, default=(1.0, 25.0), help="cylinder radius range 'min,max' (mm)")
    s.add_argument("--height", type=_pair, default=(20.0, 55.0), help="cylinder height range (mm)")
    s.add_argument("--cavity-radius", type=_pair, default=(0.1, 1.0), help="cavity base radius range (mm)")
    s.add_argument("--axis-ratio", type=_pair, default=(0.7, 1.3), help="cavity axis ratio range")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantoms)

    s = sub.add_parser("hvl", help="half-value layer (mm) of a material for a spectrum")
    s.add_argument("--material", required=True, help="bundled id or material CSV")
    s.add_argument("--spectrum", required=True, help="spectrum CSV or kramers:KV")
    s.set_defaults(func=cmd_hvl)

    for name, helptext in (("simulate", "Monte-Carlo projections"), ("project", "deterministic projections")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--phantoms", required=True)
        s.add_argument("--material", required=True)
        s.add_argument("--spectrum", required=True)
        s.add_argument("--photons", type=lambda v: int(float(v)), default=10 ** 7)
        s.add_argument("--out", required=True)
        if name == "simulate":
            s.add_argument("--seed", type=int, required=True)
            s.add_argument("--workers", type=int, default=1)
            s.set_defaults(func=cmd_simulate)
        else:
            s.add_argument("--supersample", type=int, default=1)
            s.set_defaults(func=cmd_project)

    s = sub.add_parser("detect", help="baseline detector masks for simulated images")
    s.add_argument("--in", dest="in_dir", required=True, help="simulate output directory")
    s.add_argument("--variant", choices=("with", "without"), required=True)
    s.add_argument("--params", help="detector key = value file")
    s.add_argument("--phantoms", help="phantom CSV selecting ids (default: every mask in --in)")
    s.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("score", help="F1 records from predicted masks")
    s.add_argument("--masks", required=True)
    s.add_argument("--truth", required=True, help="simulate output directory")
    s.add_argument("--phantoms", help="phantom CSV selecting ids")
    s.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    ps = sub.add_parser("pod", help="POD fitting and evaluation").add_subparsers(dest="pod_command", required=True)
    s = ps.add_parser("fit")
    s.add_argument("--records", required=True)
    s.add_argument("--covariate", choices=("spr",))
    s.add_argument("--link", default="logit", choices=("logit", "probit", "cloglog"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pod_fit)
    s = ps.add_parser("eval")
    s.add_argument("--fit", required=True)
    s.add_argument("--s", type=float, nargs="+", required=True)
    s.add_argument("--spr", type=float)
    s.set_defaults(func=cmd_pod_eval)
    s = ps.add_parser("s90")
    s.add_argument("--fit", required=True)
    s.add_argument("--spr", type=float)
    s.set_defaults(func=cmd_pod_s90)
    s = ps.add_parser("compare")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--min-size", type=float, default=0.1)
    s.add_argument("--max-size", type=float, default=3.0)
    s.add_argument("--points", type=int, default=50)
    s.add_argument("--spr", type=float)
    s.set_defaults(func=cmd_pod_compare)
    s = ps.add_parser("plot")
    s.add_argument("--fit", required=True)
    s.add_argument("--records", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pod_plot)

    s = sub.add_parser("run", help="run or resume an experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (default: run.output_dir next to the config)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="tables and figures from a run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--out")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_report)
    return p


def exit_code(exc: BaseException) -> int:
    """3 for unreadable or unwritable files, 2 for every other rejected input."""
    if isinstance(exc, StageError):
        exc = exc.cause
    return EXIT_IO if isinstance(exc, (OSError, FormatError)) else EXIT_VALIDATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (StageError, ConfigError, FormatError, OSError, KeyError, ValueError, GenerationError) as exc:
        print(f"xspod: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
