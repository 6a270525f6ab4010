"""Experiment configuration and the resumable end-to-end run.

Config files are flat ``key = value`` text with dotted section prefixes;
``#`` starts a comment.  Unknown keys are rejected.  See ``CONFIG_KEYS`` for
the full list and defaults.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pod
from .detect import DetectorParams, detect_baseline, import_masks, read_records, score_dataset, write_records
from .formats import read_xr32, write_meta, write_xr32
from .geometry import AcquisitionGeometry
from .montecarlo import masked_spr, attenuation_at, simulate
from .phantom import PhantomParamRanges, PhantomSet, defect_size, generate_set, read_phantoms, write_phantoms
from .physics import BUNDLED_MATERIALS, resolve_material, resolve_spectrum
from .projector import ground_truth_mask
from .report import make_report

log = logging.getLogger(__name__)

WORKERS_ENV = "XSPOD_WORKERS"
STAGES = ("phantoms", "simulate", "datasets", "detect", "score", "pod", "compare", "report")
VARIANT_IMAGE = {"with": "with", "without": "without"}
MIN_PHOTONS = 10 ** 4


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in str(text).split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected 'min,max', got {text!r}")
    return parts[0], parts[1]


def _names(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in str(text).split(",") if p.strip() and p.strip() != "none")


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v) if v else "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "xspod-run"
    workers: int = 1
    material: str = ""
    spectrum: str = ""
    cutoff_kev: float = 10.0
    bin_width_kev: float = 1.0
    sod: float = 200.0
    sdd: float = 300.0
    det_width: float = 75.0
    det_height: float = 82.5
    pixel_pitch: float = 0.3
    n_train: int = 0
    n_val: int = 0
    n_test: int = 10
    radius_range: tuple = (1.0, 25.0)
    height_range: tuple = (20.0, 55.0)
    cavity_base_radius_range: tuple = (0.1, 1.0)
    axis_ratio_range: tuple = (0.7, 1.3)
    photons: int = 10 ** 7
    background_degree: int = 4
    noise_k: float = 4.0
    min_component_px: int = 4
    silhouette_floor: float = 0.05
    edge_margin_px: int = 2
    edge_margin_frac: float = 0.08
    smooth_px: float = 0.0
    silhouette_smooth_px: float = 2.0
    variants: tuple = ("with", "without")
    link: str = "logit"
    threshold: float = 0.5
    covariates: tuple = ("spr",)
    compare_points: int = 50
    histogram_bins: int = 10

    def geometry(self) -> AcquisitionGeometry:
        return AcquisitionGeometry.from_detector(self.sod, self.sdd, self.det_width, self.det_height, self.pixel_pitch)

    def ranges(self) -> PhantomParamRanges:
        return PhantomParamRanges(self.radius_range, self.height_range,
                                  self.cavity_base_radius_range, self.axis_ratio_range)

    def detector_params(self) -> DetectorParams:
        return DetectorParams(self.background_degree, self.noise_k, self.min_component_px,
                              self.silhouette_floor, self.edge_margin_px, self.edge_margin_frac, self.smooth_px,
                              silhouette_smooth_px=self.silhouette_smooth_px)

    def material_obj(self):
        return resolve_material(self.material)

    def spectrum_obj(self):
        return resolve_spectrum(self.spectrum, self.bin_width_kev, self.cutoff_kev)

    def tube_kv(self) -> float:
        if self.spectrum.startswith("kramers:"):
            return float(self.spectrum.split(":", 1)[1])
        return float(self.spectrum_obj().bin_energies.max())

    def content_hash(self) -> str:
        """Hash of everything that influences outputs (worker count and output dir excluded)."""
        text = serialize(self, include_run=False)
        for ref in (self.material, self.spectrum):
            for p in (Path(ref), Path(ref).with_suffix(".meta")):
                if p.is_file():
                    text += "\n" + hashlib.sha256(p.read_bytes()).hexdigest()
        return hashlib.sha256(text.encode()).hexdigest()


# dotted key -> (field, parser)
CONFIG_KEYS = {
    "run.seed": ("seed", int),
    "run.output_dir": ("output_dir", str),
    "run.workers": ("workers", int),
    "material": ("material", str),
    "spectrum.source": ("spectrum", str),
    "spectrum.cutoff_kev": ("cutoff_kev", float),
    "spectrum.bin_width_kev": ("bin_width_kev", float),
    "geometry.sod_mm": ("sod", float),
    "geometry.sdd_mm": ("sdd", float),
    "geometry.detector_width_mm": ("det_width", float),
    "geometry.detector_height_mm": ("det_height", float),
    "geometry.pixel_pitch_mm": ("pixel_pitch", float),
    "phantoms.n_train": ("n_train", int),
    "phantoms.n_val": ("n_val", int),
    "phantoms.n_test": ("n_test", int),
    "phantoms.radius_mm": ("radius_range", _pair),
    "phantoms.height_mm": ("height_range", _pair),
    "phantoms.cavity_base_radius_mm": ("cavity_base_radius_range", _pair),
    "phantoms.axis_ratio": ("axis_ratio_range", _pair),
    "simulate.photons": ("photons", lambda s: int(float(s))),
    "detector.background_degree": ("background_degree", int),
    "detector.noise_k": ("noise_k", float),
    "detector.min_component_px": ("min_component_px", int),
    "detector.silhouette_floor": ("silhouette_floor", float),
    "detector.edge_margin_px": ("edge_margin_px", int),
    "detector.edge_margin_frac": ("edge_margin_frac", float),
    "detector.smooth_px": ("smooth_px", float),
    "detector.silhouette_smooth_px": ("silhouette_smooth_px", float),
    "datasets.variants": ("variants", _names),
    "pod.link": ("link", str),
    "pod.threshold": ("threshold", float),
    "pod.covariates": ("covariates", _names),
    "pod.compare_points": ("compare_points", int),
    "pod.histogram_bins": ("histogram_bins", int),
}
# shorthand accepted on input, never emitted
ALIASES = {"spectrum.tube_kv": lambda v: ("spectrum.source", f"kramers:{float(v):g}")}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = key.strip(), value.strip()
        if key in ALIASES:
            key, value = ALIASES[key](value)
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{n}: unknown key '{key}'")
        if key in raw:
            raise ConfigError(f"{source}:{n}: duplicate key '{key}'")
        raw[key] = value
    return raw


def _resolve_ref(ref: str, base: Path | None, what: str) -> str:
    if what == "material" and ref.lower() in BUNDLED_MATERIALS:
        return BUNDLED_MATERIALS[ref.lower()]
    if what == "spectrum" and ref.lower().startswith("kramers:"):
        return ref.lower()
    p = Path(ref)
    if not p.is_absolute() and base is not None:
        p = base / p
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    return str(p.resolve())


def build_config(raw: dict[str, str], base_dir: Path | None = None) -> ExperimentConfig:
    values = {}
    for key, text in raw.items():
        name, parser = CONFIG_KEYS[key]
        try:
            values[name] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    cfg = ExperimentConfig(**values)
    if not cfg.material:
        raise ConfigError("material is required")
    if not cfg.spectrum:
        raise ConfigError("spectrum.source (or spectrum.tube_kv) is required")
    cfg = replace(cfg, material=_resolve_ref(cfg.material, base_dir, "material"),
                  spectrum=_resolve_ref(cfg.spectrum, base_dir, "spectrum"))
    _check(cfg)
    return cfg


def _check(cfg: ExperimentConfig) -> None:
    try:
        cfg.geometry()
        cfg.ranges()
        cfg.detector_params()
        spectrum = cfg.spectrum_obj()
        material = cfg.material_obj()
    except (ValueError, OSError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    lo, hi = material.energy_range
    if spectrum.support[0] < lo or spectrum.support[1] > hi:
        raise ConfigError(f"material table {lo}-{hi} keV does not cover the spectrum")
    if cfg.photons < MIN_PHOTONS:
        raise ConfigError(f"simulate.photons must be >= {MIN_PHOTONS}")
    if cfg.workers < 1:
        raise ConfigError("run.workers must be >= 1")
    if min(cfg.n_train, cfg.n_val, cfg.n_test) < 0 or cfg.n_test < 1:
        raise ConfigError("phantom counts must be >= 0 with at least one test phantom")
    if not cfg.variants or any(v not in VARIANT_IMAGE for v in cfg.variants) or len(set(cfg.variants)) != len(cfg.variants):
        raise ConfigError("datasets.variants must list 'with' and/or 'without'")
    if cfg.link not in ("logit", "probit", "cloglog"):
        raise ConfigError(f"unknown link '{cfg.link}'")
    if not 0.0 <= cfg.threshold <= 1.0:
        raise ConfigError("pod.threshold must lie in [0, 1]")
    if any(c != "spr" for c in cfg.covariates):
        raise ConfigError("pod.covariates supports only 'spr' or 'none'")
    if cfg.compare_points < 2 or cfg.histogram_bins < 2:
        raise ConfigError("pod.compare_points and pod.histogram_bins must be >= 2")


def validate_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return build_config(parse_config_text(text, str(path)), path.parent)


def serialize(cfg: ExperimentConfig, include_run: bool = True) -> str:
    lines = []
    for key, (name, _) in CONFIG_KEYS.items():
        if not include_run and key in ("run.workers", "run.output_dir"):
            continue
        lines.append(f"{key} = {_fmt(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def load_detector_params(path) -> DetectorParams:
    """Detector knobs from a key = value file (``detector.`` prefix optional)."""
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        full = key if key.startswith("detector.") else f"detector.{key}"
        if not sep or full not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{n}: unknown detector setting '{key}'")
        name, parser = CONFIG_KEYS[full]
        values[name] = parser(value.strip())
    base = ExperimentConfig()
    try:
        return replace(base, **values).detector_params()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# manifest

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class StageRecord:
    complete: bool = False
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    seconds: float = 0.0


@dataclass
class RunManifest:
    config_hash: str
    output_dir: str
    stages: dict = field(default_factory=dict)  # name -> StageRecord
    notes: dict = field(default_factory=dict)

    FILENAME = "manifest.json"

    def save(self) -> None:
        data = {"config_hash": self.config_hash, "output_dir": self.output_dir,
                "stages": {k: vars(v) for k, v in self.stages.items()}, "notes": self.notes}
        path = Path(self.output_dir) / self.FILENAME
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        tmp.replace(path)

    @classmethod
    def load(cls, output_dir) -> "RunManifest | None":
        path = Path(output_dir) / cls.FILENAME
        if not path.exists():
            return None
        data = json.loads(path.read_text())
        stages = {k: StageRecord(**v) for k, v in data["stages"].items()}
        return cls(data["config_hash"], str(output_dir), stages, data.get("notes", {}))

    def is_current(self, stage: str) -> bool:
        rec = self.stages.get(stage)
        if rec is None or not rec.complete:
            return False
        root = Path(self.output_dir)
        return all((root / p).is_file() and _sha256(root / p) == h for p, h in rec.artifacts.items())

    @property
    def complete(self) -> bool:
        return all(s in self.stages and self.stages[s].complete for s in STAGES)


# --------------------------------------------------------------------------
# stages

def phantom_seed(seed: int, phantom_id: int) -> int:
    return int(np.random.SeedSequence([seed, phantom_id]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def _sim_dir(root: Path) -> Path:
    return root / "simulate"


def _stage_phantoms(cfg, root, notes):
    material_label = cfg.material_obj().name
    ps = generate_set(cfg.seed, cfg.n_train, cfg.n_val, cfg.n_test, cfg.ranges(), material_label)
    path = root / "phantoms.csv"
    write_phantoms(path, ps)
    return [path]


def _phantoms(root) -> PhantomSet:
    return read_phantoms(root / "phantoms.csv")


SUMMARY_FIELDS = ("phantom_id", "split", "defect_size_mm", "defect_spr", "spr_valid_px",
                  "spr_excluded_px", "attenuation")


def simulate_to_dir(phantoms: PhantomSet, geometry, spectrum, material, photons: int, seed: int,
                    workers: int, out: Path, spectrum_label: str, tube_kv: float) -> list[Path]:
    """Simulate every phantom; write XR32 rasters, sidecars and ``summary.csv`` into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rows = []
    for split, p in phantoms.items():
        pseed = phantom_seed(seed, p.id)
        ps = simulate(p, geometry, spectrum, material, photons, pseed, workers=workers)
        mask = ground_truth_mask(p, geometry)
        rasters = {"P": ps.tally.primary, "S": ps.tally.scatter, "I0": ps.flatfield,
                   "with": ps.with_scatter_log, "without": ps.primary_only_log, "spr": ps.spr, "mask": mask}
        for name, raster in rasters.items():
            path = out / f"{p.id}_{name}.xr32"
            write_xr32(path, raster)
            written.append(path)
        meta = out / f"{p.id}.meta"
        write_meta(meta, {"phantom_id": p.id, "split": split, "material": material.name,
                          "spectrum": spectrum_label, "tube_kV": f"{tube_kv:g}", "photons": photons,
                          "seed": pseed, **ps.outcomes})
        written.append(meta)
        spr, n_valid, n_excl = masked_spr(ps, mask)
        rows.append([p.id, split, f"{defect_size(p, geometry):.17g}", f"{spr:.17g}", n_valid, n_excl,
                     f"{attenuation_at(ps, mask):.17g}"])
    summary = out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        w.writerows(rows)
    written.append(summary)
    return written


def _stage_simulate(cfg, root, notes):
    return simulate_to_dir(_phantoms(root), cfg.geometry(), cfg.spectrum_obj(), cfg.material_obj(),
                           cfg.photons, cfg.seed, cfg.workers, _sim_dir(root),
                           Path(cfg.spectrum).name, cfg.tube_kv())


def read_summary(sim_dir) -> dict[int, dict]:
    """Per-phantom defect size, SPR and attenuation written by the simulate stage."""
    with open(Path(sim_dir) / "summary.csv", newline="") as fh:
        out = {}
        for row in csv.DictReader(fh):
            pid = int(row["phantom_id"])
            out[pid] = {"split": row["split"], "defect_size_mm": float(row["defect_size_mm"]),
                        "defect_spr": float(row["defect_spr"]), "spr_valid_px": int(row["spr_valid_px"]),
                        "spr_excluded_px": int(row["spr_excluded_px"]), "attenuation": float(row["attenuation"])}
        return out


def _stage_datasets(cfg, root, notes):
    """Index of per-split image/mask paths for external (trainable) detectors."""
    path = root / "datasets.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phantom_id", "split", "with", "without", "mask"])
        for split, p in _phantoms(root).items():
            w.writerow([p.id, split, *(f"simulate/{p.id}_{n}.xr32" for n in ("with", "without", "mask"))])
    return [path]


def detect_dir(sim_dir, ids, variant: str, params: DetectorParams, out: Path) -> list[Path]:
    """Run the baseline detector on ``<id>_<variant>.xr32`` images; write ``<id>_mask.xr32``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for pid in ids:
        image = read_xr32(Path(sim_dir) / f"{pid}_{VARIANT_IMAGE[variant]}.xr32")
        path = out / f"{pid}_mask.xr32"
        write_xr32(path, detect_baseline(image, params))
        written.append(path)
    return written


def score_dir(mask_dir, sim_dir, ids, shape=None) -> list:
    """DetectionRecords for ``ids`` from predicted masks and a simulate output directory."""
    summary = read_summary(sim_dir)
    truths = {pid: read_xr32(Path(sim_dir) / f"{pid}_mask.xr32") for pid in ids}
    masks = import_masks(mask_dir, shape=shape)
    sizes = {pid: summary[pid]["defect_size_mm"] for pid in ids}
    sprs = {pid: summary[pid]["defect_spr"] for pid in ids}
    return score_dataset(masks, truths, sizes, sprs)


def _stage_detect(cfg, root, notes):
    ids = [p.id for p in _phantoms(root).test]
    written = []
    for v in cfg.variants:
        written += detect_dir(_sim_dir(root), ids, v, cfg.detector_params(), root / v / "masks")
    return written


def _stage_score(cfg, root, notes):
    ids = [p.id for p in _phantoms(root).test]
    written = []
    for v in cfg.variants:
        path = root / v / "records.csv"
        write_records(path, score_dir(root / v / "masks", _sim_dir(root), ids, cfg.geometry().shape))
        written.append(path)
    return written


def _fit_variant(cfg, vdir: Path, status: dict) -> list[Path]:
    records = pod.binarize(read_records(vdir / "records.csv"), cfg.threshold)
    written = []
    sizes = [r.defect_size_mm for r in records]
    hits = [r.success for r in records]
    status["n_records"] = len(records)
    status["n_successes"] = int(sum(hits))
    for stale in ("fit.csv", "fit_spr.csv"):
        (vdir / stale).unlink(missing_ok=True)
    try:
        fit = pod.fit_pod(sizes, hits, cfg.link)
        pod.write_fit(vdir / "fit.csv", fit)
        written.append(vdir / "fit.csv")
        status["fit"] = "ok"
    except pod.FitError as exc:
        status["fit"] = f"failed: {exc}"
    if "spr" in cfg.covariates:
        finite = [r for r in records if math.isfinite(r.defect_spr)]
        status["spr_excluded_records"] = len(records) - len(finite)
        try:
            mfit = pod.fit_pod_multi([r.defect_size_mm for r in finite], [r.defect_spr for r in finite],
                                     [r.success for r in finite], cfg.link)
            pod.write_fit(vdir / "fit_spr.csv", mfit)
            written.append(vdir / "fit_spr.csv")
            status["fit_spr"] = "ok"
        except pod.FitError as exc:
            status["fit_spr"] = f"failed: {exc}"
    path = vdir / "pod_status.txt"
    write_meta(path, status)
    written.append(path)
    return written


def _stage_pod(cfg, root, notes):
    written = []
    notes["pod"] = {}
    for v in cfg.variants:
        status: dict = {}
        written += _fit_variant(cfg, root / v, status)
        notes["pod"][v] = status
    return written


COMPARE_FIELDS = ("size_mm", "p_with", "lo95_with", "hi95_with", "p_without", "lo95_without",
                  "hi95_without", "without_outside_with", "with_outside_without")


def _stage_compare(cfg, root, notes):
    path = root / "compare.csv"
    fits = {v: root / v / "fit.csv" for v in ("with", "without")}
    if not all(p.exists() for p in fits.values()):
        write_meta(path.with_suffix(".txt"), {"verdict": "unavailable",
                                              "reason": "both variants need a fitted POD curve"})
        notes["compare"] = "unavailable"
        path.unlink(missing_ok=True)
        return [path.with_suffix(".txt")]
    a, b = pod.read_fit(fits["with"]), pod.read_fit(fits["without"])
    sizes = [r.defect_size_mm for r in read_records(root / "with" / "records.csv")]
    grid = np.linspace(min(sizes), max(sizes), cfg.compare_points)
    cmp = pod.compare_fits(a, b, grid)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_FIELDS)
        for d in cmp.details:
            w.writerow([f"{d.s:.9g}", *(f"{x:.9g}" for x in (d.a.p, d.a.lo95, d.a.hi95, d.b.p, d.b.lo95, d.b.hi95)),
                        int(d.b_outside_a), int(d.a_outside_b)])
    verdict = {"indistinguishable": "indistinguishable", "a_better": "with_better", "b_better": "without_better"}
    write_meta(path.with_suffix(".txt"), {"verdict": verdict[cmp.verdict]})
    notes["compare"] = verdict[cmp.verdict]
    return [path, path.with_suffix(".txt")]


def _stage_report(cfg, root, notes):
    out = make_report(root, root / "report", cfg.threshold, cfg.histogram_bins)
    return sorted(p for p in out.iterdir() if p.is_file())


_STAGE_FUNCS = {
    "phantoms": _stage_phantoms, "simulate": _stage_simulate, "datasets": _stage_datasets,
    "detect": _stage_detect, "score": _stage_score, "pod": _stage_pod,
    "compare": _stage_compare, "report": _stage_report,
}


def effective_workers(cfg: ExperimentConfig) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be >= 1")
        return n
    return cfg.workers


def run(cfg: ExperimentConfig, output_dir=None) -> RunManifest:
    """Run (or resume) every stage; completed stages with intact artifacts are skipped."""
    cfg = replace(cfg, workers=effective_workers(cfg))
    root = Path(output_dir or cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(serialize(cfg, include_run=False))
    chash = cfg.content_hash()
    manifest = RunManifest.load(root)
    if manifest is None or manifest.config_hash != chash:
        manifest = RunManifest(chash, str(root))
    manifest.output_dir = str(root)
    dirty = False
    for stage in STAGES:
        if not dirty and manifest.is_current(stage):
            log.info("stage %s: up to date", stage)
            continue
        dirty = True
        log.info("stage %s: running", stage)
        manifest.stages[stage] = StageRecord()
        t0 = time.perf_counter()
        try:
            paths = _STAGE_FUNCS[stage](cfg, root, manifest.notes)
        except Exception as exc:
            manifest.save()
            raise StageError(stage, exc) from exc
        manifest.stages[stage] = StageRecord(
            True, {str(Path(p).relative_to(root)): _sha256(Path(p)) for p in paths},
            round(time.perf_counter() - t0, 3))
        manifest.save()
    return manifest
