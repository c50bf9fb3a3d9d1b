import csv
import json
import os

import numpy as np
import pytest

from distextremes.cli import main
from distextremes.diagnostics import annual_return_level


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["simulate", "--grid-side", "4", "--n", "120", "--seed", "5",
                 "--label-block-size", "8", "--outdir", str(d)]) == 0
    return d


def fit_args(data_dir, out, *extra):
    return ["--sites", str(data_dir / "sites.csv"), "--observations",
            str(data_dir / "observations.csv"), "--q", "0.8", "--outdir", str(out), *extra]


@pytest.fixture(scope="module")
def stationary(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert main(["fit", *fit_args(data_dir, out, "--block-size", "8", "--z1", "x,y")]) == 0
    return out


def read(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh) if str(path).endswith(".json") else list(csv.DictReader(fh))


class TestSimulate:
    def test_outputs(self, data_dir):
        sites = read(data_dir / "sites.csv")
        assert len(sites) == 16 and "block" in sites[0]
        assert len(read(data_dir / "observations.csv")) == 16 * 120
        assert read(data_dir / "manifest.json")


class TestFit:
    def test_report(self, stationary):
        rep = read(stationary / "report.json")
        assert rep["mode"] == "stationary" and rep["K"] == 2 and rep["d"] == 16
        names = [e["name"] for e in rep["estimates"]]
        assert names[:2] == ["alpha", "phi"] and len(names) == 6
        assert all(e["se"] > 0 for e in rep["estimates"])
        assert rep["fields"].startswith("omitted")
        assert not (stationary / "fields.csv").exists()
        assert set(os.listdir(stationary / "fit")) == {"fit.json", "theta.npy", "cov.npy"}

    def test_deterministic(self, data_dir, stationary, tmp_path):
        assert main(["fit", *fit_args(data_dir, tmp_path, "--block-size", "8", "--z1", "x,y",
                                      "--workers", "2")]) == 0
        for f in ("report.json", "fit/theta.npy", "fit/cov.npy", "fit/fit.json"):
            assert (tmp_path / f).read_bytes() == (stationary / f).read_bytes()

    def test_label_blocks(self, data_dir, tmp_path):
        assert main(["fit", *fit_args(data_dir, tmp_path, "--label-column", "block")]) == 0
        assert read(tmp_path / "report.json")["K"] == 2

    def test_svc(self, data_dir, tmp_path):
        assert main(["fit-svc", *fit_args(data_dir, tmp_path, "--block-size", "8", "--knots",
                                          "2", "--lambda1", "0,1", "--lambda2", "1",
                                          "--standardize")]) == 0
        rep = read(tmp_path / "report.json")
        assert rep["mode"] == "svc" and len(rep["gcv"]) == 2 and rep["scale"] == "standardized"
        rows = read(tmp_path / "fields.csv")
        assert len(rows) == 16 and float(rows[0]["sigma"]) > 0
        assert main(["return-levels", "--fit", str(tmp_path), "--periods", "20"]) == 0
        assert len(read(tmp_path / "return_levels.csv")) == 16


class TestDownstream:
    def test_diagnose(self, stationary):
        assert main(["diagnose", "--fit", str(stationary)]) == 0
        diag = read(stationary / "diagnostics.json")
        assert diag["n_values"] == 16 * 120
        assert 0 <= diag["site_ks_bonferroni_pvalue"] <= 1
        assert len(read(stationary / "pit.csv")) == 16 * 120

    def test_return_levels(self, stationary):
        assert main(["return-levels", "--fit", str(stationary), "--periods", "50,10",
                     "--site", "s1,s16"]) == 0
        rows = read(stationary / "return_levels.csv")
        assert [(r["site_id"], float(r["period"])) for r in rows] == [
            ("s1", 10.0), ("s1", 50.0), ("s16", 10.0), ("s16", 50.0)]
        theta = np.load(stationary / "fit" / "theta.npy")
        mu = np.array([1.0, 1.0]) @ theta[2:4]
        want = annual_return_level(mu, np.exp(theta[4]), theta[5], 50)
        assert float(rows[1]["level"]) == pytest.approx(want, rel=1e-10)
        assert float(rows[1]["se"]) > float(rows[0]["se"]) > 0


class TestExitCodes:
    def test_config(self, data_dir, tmp_path):
        assert main(["fit", *fit_args(data_dir, tmp_path, "--z1", "nope")]) == 2
        assert main(["fit", *fit_args(data_dir, tmp_path)[:-2], "--q", "1.5",
                     "--outdir", str(tmp_path)]) == 2
        assert main(["return-levels", "--fit", str(tmp_path / "missing")]) == 2

    def test_data(self, data_dir, tmp_path):
        args = fit_args(data_dir, tmp_path)
        args[1] = str(tmp_path / "absent.csv")
        assert main(["fit", *args]) == 3
        bad = tmp_path / "obs.csv"
        bad.write_text("replicate_id,site_id,value\n1,zz,3\n")
        args = fit_args(data_dir, tmp_path)
        args[3] = str(bad)
        assert main(["fit", *args]) == 3

    def test_numerical(self, data_dir, tmp_path):
        assert main(["fit", *fit_args(data_dir, tmp_path, "--maxiter", "1",
                                      "--restarts", "0")]) == 4
