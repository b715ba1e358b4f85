import json

import numpy as np
import pandas as pd
import pytest

import crossfit.covariance
import crossfit.simulate as sim
from crossfit.cli import CSV_HEADER, main
from crossfit.errors import NoConvergence
from crossfit.oracle import random_instance

from conftest import make_dataset


def dataset_frame(g, h, m, seed=0):
    """Long-format table for one simulated dataset with a composite x."""
    design, covariates, y, _, _ = make_dataset(g, h, m, seed=seed)
    i, j, k = np.meshgrid(np.arange(g), np.arange(h), np.arange(m),
                          indexing="ij")
    x = (4.0 + covariates.row[:, 0][i] + covariates.col[:, 0][j]
         + covariates.inter[:, :, 0][i, j] + covariates.within[..., 0][i, j, k])
    return pd.DataFrame({
        "i": i.ravel() + 1, "j": j.ravel() + 1, "k": k.ravel() + 1,
        "y": y.ravel(), "x": x.ravel(),
    })


def write_dataset(tmp_path, g=6, h=5, m=3, seed=0, name="data.csv"):
    path = tmp_path / name
    dataset_frame(g, h, m, seed=seed).to_csv(path, index=False)
    return path


class TestFitCommand:
    def test_round_trip_report(self, tmp_path, capsys):
        data = write_dataset(tmp_path)
        out = tmp_path / "report.json"
        code = main(["fit", "--data", str(data), "--decompose", "x",
                     "--out", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        assert report["schema_version"] == "1"
        assert report["method"] == "reml"
        assert report["converged"] is True
        assert report["design"] == {"g": 6, "h": 5, "m": 3, "n": 90}
        assert report["covariates"]["row"] == ["x.row"]
        assert report["covariates"]["within"] == ["x.within"]
        names = [row["name"] for row in report["estimates"]]
        assert names == ["xi0", "xi1[0]", "sigma_a2", "xi2[0]", "sigma_b2",
                         "xi3[0]", "sigma_g2", "xi4[0]", "sigma_e2"]
        assert "reml_criterion" in report
        assert np.isfinite(report["moments"]["mu4_e"])

    def test_ml_method(self, tmp_path):
        data = write_dataset(tmp_path)
        out = tmp_path / "report.json"
        assert main(["fit", "--data", str(data), "--decompose", "x",
                     "--method", "ml", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["method"] == "ml"
        assert "reml_criterion" not in report
        assert report["criterion"] == report["loglik"]

    def test_report_bytes_are_reproducible(self, tmp_path):
        data = write_dataset(tmp_path)
        out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
        main(["fit", "--data", str(data), "--decompose", "x", "--out", str(out1)])
        main(["fit", "--data", str(data), "--decompose", "x", "--out", str(out2)])
        assert out1.read_bytes() == out2.read_bytes()

    def test_missing_column(self, tmp_path, capsys):
        data = write_dataset(tmp_path)
        assert main(["fit", "--data", str(data), "--within-cols", "zz"]) == 2
        assert "zz" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        assert main(["fit", "--data", str(tmp_path / "nope.csv")]) == 2

    def test_nan_response(self, tmp_path, capsys):
        frame = dataset_frame(4, 3, 2)
        frame.loc[5, "y"] = np.nan
        path = tmp_path / "bad.csv"
        frame.to_csv(path, index=False)
        assert main(["fit", "--data", str(path)]) == 2
        assert "missing values" in capsys.readouterr().err

    def test_unbalanced_table(self, tmp_path, capsys):
        frame = dataset_frame(4, 3, 2).drop(index=7)
        path = tmp_path / "unbalanced.csv"
        frame.to_csv(path, index=False)
        assert main(["fit", "--data", str(path)]) == 2

    def test_duplicate_cell(self, tmp_path, capsys):
        frame = dataset_frame(4, 3, 2)
        frame.loc[1, ["i", "j", "k"]] = frame.loc[0, ["i", "j", "k"]]
        path = tmp_path / "dup.csv"
        frame.to_csv(path, index=False)
        assert main(["fit", "--data", str(path)]) == 2

    def test_ragged_csv(self, tmp_path, capsys):
        path = tmp_path / "ragged.csv"
        path.write_text("i,j,k,y\n1,1,1,0.5\n1,1,2,0.7,9,9,9\n")
        assert main(["fit", "--data", str(path)]) == 2
        assert "malformed" in capsys.readouterr().err

    def test_boundary_fit_warns_but_succeeds(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        a = rng.normal(0, 2.0, 8)
        b = rng.normal(0, 2.0, 8)
        e = rng.normal(0, 1.0, (8, 8, 3))
        y = 1.0 + a[:, None, None] + b[None, :, None] + e
        i, j, k = np.meshgrid(np.arange(8), np.arange(8), np.arange(3),
                              indexing="ij")
        frame = pd.DataFrame({"i": i.ravel() + 1, "j": j.ravel() + 1,
                              "k": k.ravel() + 1, "y": y.ravel()})
        path = tmp_path / "boundary.csv"
        frame.to_csv(path, index=False)
        out = tmp_path / "report.json"
        code = main(["fit", "--data", str(path), "--method", "ml",
                     "--out", str(out)])
        assert code == 0
        assert "floor" in capsys.readouterr().err
        report = json.loads(out.read_text())
        assert report["boundary"] == ["sigma_g2"]

    def test_nonconvergent_fit_exits_3(self, tmp_path, capsys):
        rng = np.random.default_rng(166)
        design, covariates, y, _, _ = random_instance(rng, 2, 3, 2)
        i, j, k = np.meshgrid(np.arange(2), np.arange(3), np.arange(2),
                              indexing="ij")
        frame = pd.DataFrame({
            "i": i.ravel() + 1, "j": j.ravel() + 1, "k": k.ravel() + 1,
            "y": y.ravel(),
            "xa": covariates.row[:, 0][i.ravel()],
            "xb": covariates.col[:, 0][j.ravel()],
            "xab": covariates.inter[:, :, 0][i.ravel(), j.ravel()],
            "xw": covariates.within[..., 0][i.ravel(), j.ravel(), k.ravel()],
        })
        path = tmp_path / "hard.csv"
        frame.to_csv(path, index=False)
        code = main(["fit", "--data", str(path), "--method", "reml",
                     "--row-cols", "xa", "--col-cols", "xb",
                     "--inter-cols", "xab", "--within-cols", "xw"])
        assert code == 3
        err = capsys.readouterr().err
        assert "best iterate" in err


class TestSimulateCommand:
    def test_preset_cell(self, tmp_path):
        out = tmp_path / "cell.csv"
        code = main(["simulate", "--preset", "table1-cell", "--g", "5",
                     "--h", "4", "--m", "3", "--reps", "6", "--seed", "1",
                     "--out-csv", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 10
        assert lines[1].startswith("xi0,5,4,3,")

    def test_csv_bytes_identical_across_runs(self, tmp_path):
        args = ["simulate", "--preset", "table2-cell", "--g", "5", "--h", "4",
                "--m", "3", "--reps", "5", "--seed", "2"]
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(args + ["--out-csv", str(out1)]) == 0
        assert main(args + ["--out-csv", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_csv_bytes_identical_across_worker_counts(self, tmp_path,
                                                      monkeypatch):
        args = ["simulate", "--preset", "table1-cell", "--g", "5", "--h", "4",
                "--m", "3", "--reps", "8", "--seed", "3"]
        out1, out2 = tmp_path / "w1.csv", tmp_path / "w2.csv"
        monkeypatch.setenv("CROSSFIT_THREADS", "1")
        assert main(args + ["--out-csv", str(out1)]) == 0
        monkeypatch.setenv("CROSSFIT_THREADS", "2")
        assert main(args + ["--out-csv", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_out_json_schema(self, tmp_path):
        out = tmp_path / "study.json"
        code = main(["simulate", "--preset", "table1-cell", "--g", "5",
                     "--h", "4", "--m", "3", "--reps", "4", "--seed", "4",
                     "--out-csv", str(tmp_path / "x.csv"),
                     "--out-json", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["schema_version"] == "1"
        study = payload["studies"][0]
        assert study["n_ok"] == 4
        assert len(study["parameters"]) == 9

    def test_preset_without_dims(self, capsys):
        assert main(["simulate", "--preset", "table1-cell"]) == 4
        assert "--g" in capsys.readouterr().err

    def test_no_selector(self, capsys):
        assert main(["simulate"]) == 4

    def test_bad_json_config(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        assert main(["simulate", "--config", str(path)]) == 4
        assert "bad JSON" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"g": 5, "h": 4, "m": 3, "turbo": True}))
        assert main(["simulate", "--config", str(path)]) == 4

    def test_infeasible_mixture_config(self, tmp_path, capsys):
        cfg = {
            "g": 5, "h": 4, "m": 3, "replicates": 3, "seed": 0,
            "variances": {"sigma_a2": 9.0, "sigma_b2": 0.4,
                          "sigma_g2": 36.0, "sigma_e2": 81.0},
            "dists": {"alpha": "normal", "beta": "mixture",
                      "gamma": "normal", "e": "normal"},
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert main(["simulate", "--config", str(path)]) == 4

    def test_mass_failure_exits_5(self, tmp_path, monkeypatch, capsys):
        def explode(stats, options=None):
            raise NoConvergence("synthetic fit failure")

        monkeypatch.setenv("CROSSFIT_THREADS", "1")
        monkeypatch.setattr(sim, "fit_reml", explode)
        code = main(["simulate", "--preset", "table1-cell", "--g", "5",
                     "--h", "4", "--m", "3", "--reps", "4", "--seed", "0",
                     "--out-csv", str(tmp_path / "x.csv")])
        assert code == 5


class TestValidateCommand:
    def test_passes_and_is_deterministic(self, capsys):
        assert main(["validate", "--seed", "3", "--instances", "4"]) == 0
        first = capsys.readouterr().out
        assert main(["validate", "--seed", "3", "--instances", "4"]) == 0
        second = capsys.readouterr().out
        assert first == second
        assert "validation passed" in first
        assert first.count("PASS") == 6

    def test_detects_broken_covariance(self, monkeypatch, capsys):
        real = crossfit.covariance.lambdas_from

        def corrupted(theta, design):
            lams = real(theta, design)
            values = np.array(lams.values, dtype=float)
            values[0] *= 1.01
            return type(lams)(tuple(values), lams.multiplicities)

        monkeypatch.setattr(crossfit.covariance, "lambdas_from", corrupted)
        assert main(["validate", "--seed", "3", "--instances", "2"]) == 1
        out = capsys.readouterr().out
        assert "FAIL" in out
        assert "validation FAILED" in out
