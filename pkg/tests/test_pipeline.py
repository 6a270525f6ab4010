import csv
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from xspod import pipeline, pod
from xspod.detect import DetectionRecord, read_records, write_records
from xspod.formats import read_meta, read_xr32
from xspod.pipeline import (
    ConfigError, ExperimentConfig, RunManifest, StageError, build_config, load_detector_params,
    parse_config_text, run, serialize, validate_config,
)
from xspod.report import TABLE1_FIELDS, TABLE2_FIELDS, make_report, relative_difference

SMOKE = """\
# smoke config
run.seed = 11
material = pmma
spectrum.tube_kv = 90
phantoms.n_train = 2
phantoms.n_val = 1
phantoms.n_test = 10
phantoms.radius_mm = 3,8
phantoms.height_mm = 20,30
simulate.photons = 1e5
"""


def _write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _checksums(manifest):
    return {p: h for rec in manifest.stages.values() for p, h in rec.artifacts.items()}


# -- config

def test_minimal_config_fills_default_geometry(tmp_path):
    cfg = validate_config(_write(tmp_path, "material = pmma\nspectrum.tube_kv = 90\n"))
    g = cfg.geometry()
    assert (g.sod, g.sdd, g.det_width, g.det_height, g.pixel_pitch) == (200.0, 300.0, 75.0, 82.5, 0.3)
    assert g.shape == (275, 250)
    assert cfg.spectrum == "kramers:90"
    assert cfg.tube_kv() == 90.0
    assert cfg.seed == 0


def test_sod_beyond_sdd_rejected(tmp_path):
    with pytest.raises(ConfigError):
        validate_config(_write(tmp_path, "material = pmma\nspectrum.tube_kv = 90\ngeometry.sod_mm = 400\n"))


@pytest.mark.parametrize("text", [
    "material = pmma\nspectrum.tube_kv = 90\nsimulate.photon = 1e6\n",
    "material = pmma\nspectrum.tube_kv = 90\nrun.seed = 1\nrun.seed = 2\n",
    "material = pmma\nspectrum.tube_kv = 90\nsimulate.photons = 9999\n",
    "material = missing.csv\nspectrum.tube_kv = 90\n",
    "material = pmma\nspectrum.source = nowhere.csv\n",
    "spectrum.tube_kv = 90\n",
    "material = pmma\nspectrum.tube_kv = 90\npod.link = cauchit\n",
    "material = pmma\nspectrum.tube_kv = 90\ndatasets.variants = with,with\n",
    "material = pmma\nspectrum.tube_kv = 90\nphantoms.radius_mm = 5\n",
    "material = pmma\nspectrum.tube_kv = 90\nno equals sign\n",
])
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigError):
        validate_config(_write(tmp_path, text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        validate_config(tmp_path / "absent.cfg")


def test_relative_material_file(tmp_path):
    src = Path(pipeline.__file__).parent / "data" / "aluminum.csv"
    shutil.copy(src, tmp_path / "al.csv")
    shutil.copy(src.with_suffix(".meta"), tmp_path / "al.meta")
    cfg = validate_config(_write(tmp_path, "material = al.csv\nspectrum.tube_kv = 150\n"))
    assert cfg.material == str((tmp_path / "al.csv").resolve())
    before = cfg.content_hash()
    (tmp_path / "al.meta").write_text("aluminum,2.7\n")
    assert cfg.content_hash() != before


def test_serialize_round_trip(tmp_path):
    cfg = validate_config(_write(tmp_path, SMOKE))
    again = build_config(parse_config_text(serialize(cfg)))
    assert again == cfg
    assert serialize(again) == serialize(cfg)


def test_hash_ignores_workers_and_output_dir(tmp_path):
    cfg = validate_config(_write(tmp_path, SMOKE))
    from dataclasses import replace
    assert replace(cfg, workers=5, output_dir="elsewhere").content_hash() == cfg.content_hash()
    assert replace(cfg, seed=12).content_hash() != cfg.content_hash()


def test_detector_params_file(tmp_path):
    path = _write(tmp_path, "noise_k = 3.5\ndetector.min_component_px = 9\n", "det.txt")
    p = load_detector_params(path)
    assert (p.noise_k, p.min_component_px, p.background_degree) == (3.5, 9, 4)
    with pytest.raises(ConfigError):
        load_detector_params(_write(tmp_path, "bogus = 1\n", "bad.txt"))


def test_workers_env_override(monkeypatch):
    cfg = ExperimentConfig(workers=2)
    assert pipeline.effective_workers(cfg) == 2
    monkeypatch.setenv(pipeline.WORKERS_ENV, "5")
    assert pipeline.effective_workers(cfg) == 5
    monkeypatch.setenv(pipeline.WORKERS_ENV, "zero")
    with pytest.raises(ConfigError):
        pipeline.effective_workers(cfg)


# -- end-to-end smoke run

@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    base = tmp_path_factory.mktemp("smoke")
    cfg = validate_config(_write(base, SMOKE))
    out = base / "run"
    return cfg, out, run(cfg, out)


def test_smoke_all_stages_complete(smoke):
    cfg, out, manifest = smoke
    assert manifest.complete
    assert list(manifest.stages) == list(pipeline.STAGES)
    for v in ("with", "without"):
        records = read_records(out / v / "records.csv")
        assert len(records) == 10
        test_ids = [p.id for p in pipeline.read_phantoms(out / "phantoms.csv").test]
        assert [r.phantom_id for r in records] == test_ids
        assert (out / v / "pod_status.txt").exists()
    assert (out / "report" / "table1.csv").exists()
    assert (out / "compare.txt").exists()


def test_smoke_artifacts(smoke):
    cfg, out, manifest = smoke
    ps = pipeline.read_phantoms(out / "phantoms.csv")
    assert len(ps) == 13
    for _, p in ps.items():
        for name in ("P", "S", "I0", "with", "without", "spr", "mask"):
            assert read_xr32(out / "simulate" / f"{p.id}_{name}.xr32").shape == (275, 250)
        assert read_meta(out / "simulate" / f"{p.id}.meta")["photons"] == "100000"
    with open(out / "datasets.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["split"] for r in rows} == {"train", "val", "test"}
    assert all((out / r["with"]).exists() for r in rows)


def test_rerun_is_noop(smoke):
    cfg, out, manifest = smoke
    stamps = {p: (out / p).stat().st_mtime_ns for p in _checksums(manifest)}
    again = run(cfg, out)
    assert _checksums(again) == _checksums(manifest)
    assert {p: (out / p).stat().st_mtime_ns for p in stamps} == stamps


def test_deleted_stage_outputs_are_rebuilt(smoke, tmp_path):
    cfg, out, manifest = smoke
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (copy / "with" / "records.csv").unlink()
    for f in (copy / "without" / "masks").iterdir():
        f.unlink()
    first = pipeline.read_phantoms(out / "phantoms.csv").test[0].id
    (copy / "simulate" / f"{first}_with.xr32").unlink()
    again = run(cfg, copy)
    assert again.complete
    assert _checksums(again) == _checksums(manifest)


def test_workers_do_not_change_outputs(smoke, tmp_path, monkeypatch):
    cfg, out, manifest = smoke
    monkeypatch.setenv(pipeline.WORKERS_ENV, "3")
    other = run(cfg, tmp_path / "w3")
    assert _checksums(other) == _checksums(manifest)
    assert other.config_hash == manifest.config_hash


def test_seed_changes_rasters_not_schema(smoke, tmp_path):
    cfg, out, manifest = smoke
    from dataclasses import replace
    other = run(replace(cfg, seed=cfg.seed + 1), tmp_path / "s2")
    a, b = _checksums(manifest), _checksums(other)
    assert set(a) != set(b) or a != b
    first = lambda d: sorted(d.glob("*_with.xr32"))[0]
    assert not np.array_equal(read_xr32(first(out / "simulate")), read_xr32(first(tmp_path / "s2" / "simulate")))
    for name in ("phantoms.csv", "simulate/summary.csv", "with/records.csv", "report/table1.csv"):
        header = lambda root: (root / name).read_text().splitlines()[0]
        assert header(out) == header(tmp_path / "s2")


def test_stage_failure_names_stage(smoke, tmp_path, monkeypatch):
    cfg, out, manifest = smoke
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (copy / "with" / "records.csv").unlink()

    def boom(*args):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(pipeline._STAGE_FUNCS, "score", boom)
    with pytest.raises(StageError) as info:
        run(cfg, copy)
    assert info.value.stage == "score"
    assert "disk on fire" in str(info.value)
    partial = RunManifest.load(copy)
    assert partial.stages["detect"].complete and not partial.stages["score"].complete
    monkeypatch.undo()
    assert _checksums(run(cfg, copy)) == _checksums(manifest)


def test_manifest_records_config_hash(smoke):
    cfg, out, manifest = smoke
    assert RunManifest.load(out).config_hash == cfg.content_hash()
    assert build_config(parse_config_text((out / "config.txt").read_text())).content_hash() == cfg.content_hash()


# -- POD, compare and report stages on synthetic records

def _synthetic_records(seed, alpha, beta, n=400):
    rng = np.random.default_rng(seed)
    sizes = rng.uniform(0.1, 3.0, n)
    sprs = rng.uniform(0.0, 1.5, n)
    p = 1.0 / (1.0 + np.exp(-(alpha + beta * sizes - 1.5 * sprs)))
    hit = rng.random(n) < p
    # F1 above/below the 0.5 threshold encodes the outcome
    return [DetectionRecord(i, float(s), float(r), 0.9 if h else 0.1)
            for i, (s, r, h) in enumerate(zip(sizes, sprs, hit))]


@pytest.fixture
def synthetic_run(tmp_path):
    root = tmp_path / "run"
    for v, (a, b, seed) in {"with": (-4.0, 4.0, 1), "without": (-2.0, 4.0, 2)}.items():
        (root / v).mkdir(parents=True)
        write_records(root / v / "records.csv", _synthetic_records(seed, a, b))
    cfg = ExperimentConfig(material="pmma", spectrum="kramers:90")
    notes = {}
    pipeline._stage_pod(cfg, root, notes)
    pipeline._stage_compare(cfg, root, notes)
    return root, notes


def test_pod_stage_writes_fits(synthetic_run):
    root, notes = synthetic_run
    for v in ("with", "without"):
        assert notes["pod"][v]["fit"] == "ok"
        assert notes["pod"][v]["fit_spr"] == "ok"
        assert notes["pod"][v]["n_records"] == 400
        assert pod.read_fit(root / v / "fit_spr.csv").coefficients[2] < 0
        assert read_meta(root / v / "pod_status.txt")["fit"] == "ok"


def test_compare_stage_verdict(synthetic_run):
    root, notes = synthetic_run
    # without-scatter curve sits to the left: it detects smaller defects
    assert notes["compare"] == "without_better"
    assert read_meta(root / "compare.txt")["verdict"] == "without_better"
    with open(root / "compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 50
    assert tuple(rows[0]) == pipeline.COMPARE_FIELDS


def test_pod_stage_failure_is_recorded(tmp_path):
    root = tmp_path / "run"
    (root / "with").mkdir(parents=True)
    write_records(root / "with" / "records.csv", [DetectionRecord(i, 0.5 + i, 0.1, 0.0) for i in range(5)])
    cfg = ExperimentConfig(material="pmma", spectrum="kramers:90", variants=("with",))
    notes = {}
    pipeline._stage_pod(cfg, root, notes)
    pipeline._stage_compare(cfg, root, notes)
    assert notes["pod"]["with"]["fit"].startswith("failed")
    assert not (root / "with" / "fit.csv").exists()
    assert notes["compare"] == "unavailable"
    out = make_report(root)
    rows = list(csv.reader(open(out / "table1.csv")))
    assert rows == [list(TABLE1_FIELDS)]


def _table(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_report_table1_schema_and_difference(synthetic_run):
    root, _ = synthetic_run
    out = make_report(root)
    rows = _table(out / "table1.csv")
    assert list(rows[0]) == list(TABLE1_FIELDS)
    assert [r["variant"] for r in rows] == ["with", "without", "difference"]
    # recount from fit.csv alone
    w = pod.read_fit(root / "with" / "fit.csv")
    wo = pod.read_fit(root / "without" / "fit.csv")
    a90 = -w.coefficients[0] / w.coefficients[1] + math.log(9) / w.coefficients[1]
    b90 = -wo.coefficients[0] / wo.coefficients[1] + math.log(9) / wo.coefficients[1]
    assert float(rows[0]["s90_mm"]) == pytest.approx(a90, rel=1e-5)
    assert float(rows[2]["s90_mm"]) == pytest.approx((b90 - a90) / a90, rel=1e-5)
    for r in rows[:2]:
        assert float(r["s90_95_mm"]) >= float(r["s90_mm"])


def test_report_table2_and_figures(synthetic_run):
    root, _ = synthetic_run
    out = make_report(root)
    rows = _table(out / "table2.csv")
    assert list(rows[0]) == list(TABLE2_FIELDS)
    for r in rows:
        maxspr = max(x.defect_spr for x in read_records(root / r["variant"] / "records.csv"))
        assert float(r["max_spr"]) == pytest.approx(maxspr, rel=1e-8)
        assert float(r["s90_at_max_spr_mm"]) >= float(r["s90_at_spr0_mm"])
    for name in ("pod_with.svg", "pod_without.svg", "pod_fixed_spr.svg"):
        text = (out / name).read_text()
        assert text.startswith("<svg") and "polyline" in text


def test_report_single_variant(synthetic_run):
    root, _ = synthetic_run
    shutil.rmtree(root / "without")
    out = make_report(root, root / "r1")
    rows = _table(out / "table1.csv")
    assert [r["variant"] for r in rows] == ["with"]
    assert not (out / "pod_without.svg").exists()


def test_report_needs_records(tmp_path):
    with pytest.raises(FileNotFoundError):
        make_report(tmp_path)


def test_relative_difference():
    assert relative_difference(1.05, 3.02) == pytest.approx((3.02 - 1.05) / 1.05)
