import csv
import subprocess
import sys

import numpy as np
import pytest

from xspod import __version__, pod
from xspod.cli import EXIT_IO, EXIT_VALIDATION, build_parser, main
from xspod.detect import DetectionRecord, read_records, write_records
from xspod.formats import read_xr32
from xspod.phantom import read_phantoms


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_help_lists_subcommands():
    text = build_parser().format_help()
    for name in ("phantoms", "hvl", "simulate", "project", "detect", "score", "pod", "run", "report"):
        assert name in text


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "xspod.cli", "simulate", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "--photons" in res.stdout and "--seed" in res.stdout


def test_hvl(capsys):
    code, out, _ = _run(capsys, "hvl", "--material", "aluminum", "--spectrum", "kramers:150")
    assert code == 0
    assert 0.5 < float(out) < 30


def test_usage_error_is_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["hvl", "--material", "pmma"])
    assert info.value.code == 2


def test_bad_values_are_validation_errors(capsys, tmp_path):
    code, _, err = _run(capsys, "hvl", "--material", "unobtainium", "--spectrum", "kramers:90")
    assert code == EXIT_IO  # treated as a path that does not exist
    code, _, err = _run(capsys, "hvl", "--material", "pmma", "--spectrum", "kramers:5")
    assert code == EXIT_VALIDATION
    assert err.startswith("xspod: error:")
    code, _, _ = _run(capsys, "phantoms", "--seed", 1, "--radius", "5,1", "--out", tmp_path / "p.csv")
    assert code == EXIT_VALIDATION


def test_missing_files_are_io_errors(capsys, tmp_path):
    code, _, _ = _run(capsys, "pod", "fit", "--records", tmp_path / "none.csv", "--out", tmp_path / "f.csv")
    assert code == EXIT_IO
    code, _, _ = _run(capsys, "run", "--config", tmp_path / "none.cfg")
    assert code == EXIT_VALIDATION  # an unreadable config is a config error


def test_bad_config_is_2(capsys, tmp_path):
    cfg = tmp_path / "x.cfg"
    cfg.write_text("material = pmma\nspectrum.tube_kv = 90\nsimulate.photons = 100\n")
    code, _, err = _run(capsys, "run", "--config", cfg)
    assert code == EXIT_VALIDATION
    assert "photons" in err


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["phantoms", "--seed", "3", "--n-train", "1", "--n-test", "2", "--radius", "4,6",
                 "--out", str(d / "ph.csv")]) == 0
    assert main(["simulate", "--phantoms", str(d / "ph.csv"), "--material", "pmma", "--spectrum", "kramers:90",
                 "--photons", "2e4", "--seed", "5", "--out", str(d / "sim")]) == 0
    return d


def test_phantoms_command(sim):
    ps = read_phantoms(sim / "ph.csv")
    assert len(ps) == 3
    assert all(4 <= p.cylinder.radius <= 6 for _, p in ps.items())


def test_simulate_command(sim):
    ps = read_phantoms(sim / "ph.csv")
    for _, p in ps.items():
        for name in ("P", "S", "with", "without", "mask", "spr"):
            assert read_xr32(sim / "sim" / f"{p.id}_{name}.xr32").shape == (275, 250)
    assert (sim / "sim" / "summary.csv").exists()


def test_project_command(sim, capsys):
    code, _, _ = _run(capsys, "project", "--phantoms", sim / "ph.csv", "--material", "pmma", "--spectrum",
                      "kramers:90", "--photons", "1e6", "--out", sim / "proj")
    assert code == 0
    t = read_xr32(next((sim / "proj").glob("*_transmission.xr32")))
    assert t.max() <= 1.0 and t.min() > 0


def test_detect_and_score_commands(sim, capsys):
    code, _, _ = _run(capsys, "detect", "--in", sim / "sim", "--variant", "with", "--phantoms", sim / "ph.csv",
                      "--out", sim / "masks")
    assert code == 0
    assert len(list((sim / "masks").glob("*_mask.xr32"))) == 2
    code, _, _ = _run(capsys, "score", "--masks", sim / "masks", "--truth", sim / "sim",
                      "--phantoms", sim / "ph.csv", "--out", sim / "records.csv")
    assert code == 0
    records = read_records(sim / "records.csv")
    assert [r.phantom_id for r in records] == [p.id for p in read_phantoms(sim / "ph.csv").test]


def test_detect_params_file(sim, capsys, tmp_path):
    params = tmp_path / "det.txt"
    params.write_text("noise_k = -1\n")
    code, _, _ = _run(capsys, "detect", "--in", sim / "sim", "--variant", "without", "--params", params,
                      "--out", tmp_path / "m")
    assert code == EXIT_VALIDATION


@pytest.fixture
def records_file(tmp_path):
    rng = np.random.default_rng(4)
    s = rng.uniform(0.1, 3.0, 300)
    spr = rng.uniform(0, 1, 300)
    hit = rng.random(300) < 1 / (1 + np.exp(-(-6 + 5 * s - spr)))
    path = tmp_path / "records.csv"
    write_records(path, [DetectionRecord(i, float(a), float(b), float(h)) for i, (a, b, h) in enumerate(zip(s, spr, hit))])
    return path


def test_pod_commands(capsys, tmp_path, records_file):
    code, out, _ = _run(capsys, "pod", "fit", "--records", records_file, "--out", tmp_path / "fit.csv")
    assert code == 0 and out.startswith("alpha=")
    fit = pod.read_fit(tmp_path / "fit.csv")
    code, out, _ = _run(capsys, "pod", "eval", "--fit", tmp_path / "fit.csv", "--s", 0.5, 2.0)
    rows = list(csv.DictReader(out.splitlines()))
    assert float(rows[1]["p"]) == pytest.approx(pod.pod_eval(fit, 2.0).p, rel=1e-5)
    code, out, _ = _run(capsys, "pod", "s90", "--fit", tmp_path / "fit.csv")
    lines = dict(line.split(" = ") for line in out.splitlines())
    assert float(lines["s90"]) == pytest.approx(pod.s90(fit), rel=1e-5)
    assert float(lines["s90_95"]) >= float(lines["s90"])
    code, out, _ = _run(capsys, "pod", "compare", "--a", tmp_path / "fit.csv", "--b", tmp_path / "fit.csv")
    assert out.strip() == "indistinguishable"
    code, _, _ = _run(capsys, "pod", "plot", "--fit", tmp_path / "fit.csv", "--records", records_file,
                      "--out", tmp_path / "pod.svg")
    assert code == 0 and (tmp_path / "pod.svg").read_text().startswith("<svg")


def test_pod_fit_with_covariate(capsys, tmp_path, records_file):
    code, out, _ = _run(capsys, "pod", "fit", "--records", records_file, "--covariate", "spr",
                        "--out", tmp_path / "m.csv")
    assert code == 0 and "gamma=" in out
    code, out, _ = _run(capsys, "pod", "s90", "--fit", tmp_path / "m.csv", "--spr", 0.5)
    assert code == 0


def test_pod_fit_failure_is_2(capsys, tmp_path):
    path = tmp_path / "r.csv"
    write_records(path, [DetectionRecord(i, 1.0 + i, 0.1, 0.0) for i in range(12)])
    code, _, err = _run(capsys, "pod", "fit", "--records", path, "--out", tmp_path / "f.csv")
    assert code == EXIT_VALIDATION
    assert "identical" in err


def test_run_and_report(capsys, tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("run.seed = 2\nrun.output_dir = out\nmaterial = pmma\nspectrum.tube_kv = 90\n"
                   "phantoms.n_test = 3\nphantoms.radius_mm = 3,5\nsimulate.photons = 1e4\n")
    code, out, _ = _run(capsys, "run", "--config", cfg)
    assert code == 0 and "run complete" in out
    assert (tmp_path / "out" / "manifest.json").exists()
    code, _, _ = _run(capsys, "report", "--run", tmp_path / "out", "--out", tmp_path / "rep")
    assert code == 0
    assert (tmp_path / "rep" / "table1.csv").exists()
    code, _, _ = _run(capsys, "report", "--run", tmp_path / "nothing")
    assert code == EXIT_IO
