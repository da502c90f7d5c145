import csv
import json

import numpy as np
import pytest

from corrdiff.cli import main
from corrdiff.corrmat import TwoGroupSample
from corrdiff.errors import InvalidCorrelationMatrix, ValidationError
from corrdiff.io import (
    RunManifest,
    ingest,
    parse_value,
    read_config,
    read_matrix_csv,
    resolve_threads,
    verify_digests,
    write_matrix_csv,
    write_sample,
)
from corrdiff.simulate import SimParams, gen_parameters, make_rng, simulate_dataset

from conftest import random_corr


def make_dataset(directory, p=6, n_h=8, n_d=8, seed=0):
    design = SimParams(p=p, n_h=n_h, n_d=n_d, T=100, alpha_prop=0.3)
    theta, alpha = gen_parameters(design, make_rng(seed, 0))
    sample = simulate_dataset(theta, alpha, design, make_rng(seed, 1))
    return write_sample(sample, directory), sample


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return make_dataset(tmp_path_factory.mktemp("data"))[0]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("1e-6") == 1e-6
    assert parse_value("20, 40, 80") == (20, 40, 80)
    assert parse_value("0.5,") == (0.5,)
    assert parse_value("()") == ()
    assert parse_value("multiplicative") == "multiplicative"
    assert parse_value("true") is True


def test_read_config(tmp_path):
    path = tmp_path / "fit.cfg"
    path.write_text("# comment\nlink = additive_quotient\nmax_outer_iters = 50  # inline\nseed = 4\n")
    assert read_config(path) == {"link": "additive_quotient", "max_outer_iters": 50, "seed": 4}


def test_matrix_csv_lossless(tmp_path, rng):
    R = random_corr(5, rng)
    write_matrix_csv(R, tmp_path / "r.csv")
    np.testing.assert_array_equal(read_matrix_csv(tmp_path / "r.csv"), R)


def test_ingest_round_trip(tmp_path):
    manifest, sample = make_dataset(tmp_path / "a", p=5, n_h=4, n_d=3)
    data = ingest(manifest)
    assert (data.sample.n_h, data.sample.n_d, data.sample.p) == (4, 3, 5)
    np.testing.assert_array_equal(data.sample.healthy, sample.healthy)
    np.testing.assert_array_equal(data.sample.diseased, sample.diseased)
    again = ingest(write_sample(data.sample, tmp_path / "b"))
    np.testing.assert_array_equal(again.sample.healthy, data.sample.healthy)
    np.testing.assert_array_equal(again.sample.diseased, data.sample.diseased)
    assert data.labels == ["1", "2", "3", "4", "5"]


def test_ingest_study_sized_fixture(tmp_path):
    # synthetic stand-in with the group sizes and dimension of the clinical study
    manifest, _ = make_dataset(tmp_path, p=86, n_h=17, n_d=12)
    data = ingest(manifest)
    assert (data.sample.n_h, data.sample.n_d, data.sample.p) == (17, 12, 86)


def test_ingest_rejects_asymmetric(tmp_path):
    manifest, _ = make_dataset(tmp_path, p=4, n_h=2, n_d=2)
    path = tmp_path / "subject_H001.csv"
    R = read_matrix_csv(path)
    R[0, 1] += 0.01
    write_matrix_csv(R, path)
    with pytest.raises(InvalidCorrelationMatrix) as info:
        ingest(manifest)
    assert info.value.invariant == "symmetric"
    assert "subject_H001.csv" in str(info.value)


def test_ingest_drops_missing_variable(tmp_path):
    manifest, _ = make_dataset(tmp_path, p=22, n_h=3, n_d=3)
    path = tmp_path / "subject_D002.csv"
    lines = path.read_text().splitlines()
    cells = lines[4].split(",")
    cells[20] = ""  # column 21
    lines[4] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    data = ingest(manifest)
    assert data.sample.p == 21
    assert data.dropped == [20]
    assert "21" not in data.labels


def test_ingest_labels(tmp_path):
    manifest, _ = make_dataset(tmp_path, p=3, n_h=2, n_d=2)
    labels = tmp_path / "labels.csv"
    labels.write_text("index,name\n1,Hippocampus (L)\n2,Precuneus (R)\n3,Thalamus (L)\n")
    assert ingest(manifest, labels).labels[0] == "Hippocampus (L)"
    labels.write_text("index,name\n1,a\n1,b\n")
    with pytest.raises(ValidationError):
        ingest(manifest, labels)


def test_ingest_errors(tmp_path):
    with pytest.raises(ValidationError):
        ingest(tmp_path / "missing.csv")
    bad = tmp_path / "m.csv"
    bad.write_text("subject_id,group,path\ns1,X,a.csv\n")
    with pytest.raises(ValidationError):
        ingest(bad)


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv("CORRDIFF_THREADS", raising=False)
    assert resolve_threads() == 1
    monkeypatch.setenv("CORRDIFF_THREADS", "3")
    assert resolve_threads() == 3
    assert resolve_threads(2) == 2


def test_cli_fit(dataset, tmp_path):
    out = tmp_path / "fit"
    assert main(["fit", "--manifest", str(dataset), "--out", str(out)]) == 0
    for name in ("theta.csv", "alpha.json", "fit_report.json", "manifest.json"):
        assert (out / name).is_file()
    report = json.loads((out / "fit_report.json").read_text())
    assert report["theta"] == "theta.csv" and len(report["alpha"]) == 6
    assert {"loss_trace", "converged", "applied_lambda"} <= set(report)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "fit"
    assert not verify_digests(RunManifest(**manifest))

    out2 = tmp_path / "fit2"
    assert main(["fit", "--manifest", str(dataset), "--out", str(out2), "--threads", "3"]) == 0
    assert (out / "alpha.json").read_bytes() == (out2 / "alpha.json").read_bytes()
    assert (out / "theta.csv").read_bytes() == (out2 / "theta.csv").read_bytes()


def test_cli_fit_not_identifiable(tmp_path, capsys):
    theta = np.eye(4)
    theta[0, 1] = theta[1, 0] = 0.5
    s = TwoGroupSample(np.stack([theta] * 3), np.stack([theta] * 3))
    manifest = write_sample(s, tmp_path / "d")
    assert main(["fit", "--manifest", str(manifest), "--out", str(tmp_path / "o")]) == 3
    assert "identifiable" in capsys.readouterr().err


def test_cli_input_errors(dataset, tmp_path):
    assert main(["fit", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\n")
    assert main(["fit", "--manifest", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text("outer_tol = -1\n")
    assert main(["fit", "--manifest", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["fit"]) == 2


def test_cli_infer_gee(dataset, tmp_path):
    out = tmp_path / "inf"
    assert main(["infer", "--manifest", str(dataset), "--out", str(out)]) == 0
    rows = read_csv(out / "inference.csv")
    assert len(rows) == 6
    for r in rows:
        assert (r["selected"] == "true") == (float(r["p_bh"]) <= 0.05)
    info = json.loads((out / "inference.json").read_text())
    assert info["method"] == "gee" and info["inflation"] == 1.1 and info["median_correction"]
    assert len(read_csv(out / "manhattan.csv")) == 6


def test_cli_infer_jackknife(dataset, tmp_path):
    out = tmp_path / "jk"
    assert main(["infer", "--manifest", str(dataset), "--out", str(out), "--variance", "jackknife",
                 "--no-median-correction", "--q", "0.1"]) == 0
    info = json.loads((out / "inference.json").read_text())
    assert info["method"] == "jackknife" and info["inflation"] == 1.0
    assert not info["median_correction"] and info["q"] == 0.1


def test_cli_baseline(dataset, tmp_path):
    out = tmp_path / "base"
    assert main(["baseline", "--manifest", str(dataset), "--out", str(out)]) == 0
    assert len(read_csv(out / "baseline.csv")) == 15
    assert len(read_csv(out / "baseline_manhattan.csv")) == 30


def test_cli_baseline_study_size(tmp_path):
    manifest, _ = make_dataset(tmp_path / "d", p=86, n_h=17, n_d=12)
    out = tmp_path / "base"
    assert main(["baseline", "--manifest", str(manifest), "--out", str(out)]) == 0
    assert len(read_csv(out / "baseline.csv")) == 3655
    assert len(read_csv(out / "baseline_manhattan.csv")) == 2 * 3655


def test_cli_validate(dataset, tmp_path):
    out = tmp_path / "val"
    assert main(["validate", "--manifest", str(dataset), "--out", str(out)]) == 0
    info = json.loads((out / "validation.json").read_text())
    assert info["valid"] and info["p"] == 6
    assert read_matrix_csv(out / "average_H.csv").shape == (6, 6)


def test_cli_simulate(tmp_path, monkeypatch):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("n = 10\np = 4\nreps = 2\n")
    tables = []
    for threads in ("1", "3"):
        out = tmp_path / f"sim{threads}"
        monkeypatch.setenv("CORRDIFF_THREADS", threads)
        assert main(["simulate", "--experiment", "bias", "--config", str(cfg),
                     "--seed", "5", "--out", str(out)]) == 0
        (csv_path,) = out.glob("bias_*.csv")
        (meta,) = out.glob("bias_*.json")
        assert json.loads(meta.read_text())["grid"]["seed"] == 5
        tables.append(csv_path.read_bytes())
    assert tables[0] == tables[1]
    assert len(tables[0].decode().splitlines()) == 1 + 2 * 4


def test_cli_simulate_power_columns(tmp_path):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("n = 10\np = 5\nreps = 2\nprop_nonnull = 0.2\n")
    assert main(["simulate", "--experiment", "power", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    (csv_path,) = tmp_path.glob("power_*.csv")
    header = csv_path.read_text().splitlines()[0].split(",")
    assert "model_global_reject" in header and "model_power" in header


def test_cli_simulate_errors(tmp_path):
    assert main(["simulate", "--experiment", "nope", "--out", str(tmp_path)]) == 2
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("bogus = 1\n")
    assert main(["simulate", "--experiment", "bias", "--config", str(cfg), "--out", str(tmp_path)]) == 2
