"""Ingestion validation, command round trips, determinism, exit codes."""

import filecmp

import numpy as np
import pytest

from svreg.cli import load_config_file, main
from svreg.data import Dataset, Subject, ingest, read_csv_columns, write_dataset


def write_files(tmp_path, obs_rows, cov_rows, cov_header="subject_id,x1"):
    obs = tmp_path / "observations.csv"
    cov = tmp_path / "covariates.csv"
    obs.write_text("subject_id,group,time,value\n" + "\n".join(obs_rows) + "\n")
    cov.write_text(cov_header + "\n" + "\n".join(cov_rows) + "\n")
    return obs, cov


class TestIngest:
    def test_merged_grid_is_union(self, tmp_path):
        obs, cov = write_files(
            tmp_path,
            ["a,1,1.0,0.1", "a,1,2.0,0.2", "a,1,3.0,0.3",
             "b,2,1.5,0.4", "b,2,2.0,0.5", "b,2,3.5,0.6"],
            ["a,0.0", "b,1.0"])
        ds = ingest(obs, cov)
        assert len(ds.subjects) == 2 and ds.n_groups == 2
        assert len(ds.merged_grid) == 5  # 2.0 shared
        np.testing.assert_array_equal(ds.subjects[0].covariates, [1.0, 0.0])

    def test_duplicate_time_names_row(self, tmp_path):
        obs, cov = write_files(
            tmp_path,
            ["a,1,1.0,0.1", "a,1,2.0,0.2", "a,1,2.0,0.3", "b,1,1.0,0.0", "b,1,2.0,0.1"],
            ["a,0.0", "b,1.0"])
        with pytest.raises(ValueError, match="row 4"):
            ingest(obs, cov)

    def test_missing_covariates_rejected(self, tmp_path):
        obs, cov = write_files(
            tmp_path,
            ["a,1,1.0,0.1", "a,1,2.0,0.2", "b,1,1.0,0.0", "b,1,2.0,0.1"],
            ["a,0.0"])
        with pytest.raises(ValueError, match="missing a covariate row"):
            ingest(obs, cov)

    def test_non_numeric_field_rejected(self, tmp_path):
        obs, cov = write_files(
            tmp_path,
            ["a,1,1.0,oops", "a,1,2.0,0.2", "b,1,1.0,0.0", "b,1,2.0,0.1"],
            ["a,0.0", "b,1.0"])
        with pytest.raises(ValueError, match="row 2"):
            ingest(obs, cov)

    def test_conflicting_group_rejected(self, tmp_path):
        obs, cov = write_files(
            tmp_path,
            ["a,1,1.0,0.1", "a,2,2.0,0.2", "b,1,1.0,0.0", "b,1,2.0,0.1"],
            ["a,0.0", "b,1.0"])
        with pytest.raises(ValueError, match="groups 1 and 2"):
            ingest(obs, cov)

    def test_empty_group_rejected(self, tmp_path):
        obs, cov = write_files(
            tmp_path,
            ["a,1,1.0,0.1", "a,1,2.0,0.2", "b,3,1.0,0.0", "b,3,2.0,0.1"],
            ["a,0.0", "b,1.0"])
        with pytest.raises(ValueError, match="missing"):
            ingest(obs, cov)

    def test_unknown_covariate_subject_rejected(self, tmp_path):
        obs, cov = write_files(
            tmp_path,
            ["a,1,1.0,0.1", "a,1,2.0,0.2"],
            ["a,0.0", "zz,1.0"])
        with pytest.raises(ValueError, match="unknown subjects"):
            ingest(obs, cov)

    def test_cohort_shaped_file(self, tmp_path):
        """282 subjects in two groups with 9-19 irregular observations each."""
        rng = np.random.default_rng(8)
        obs_rows, cov_rows = [], []
        for i in range(282):
            group = 1 if i < 106 else 2
            n_i = int(rng.integers(9, 20))
            times = np.sort(rng.uniform(14.0, 40.0, size=n_i))
            while np.any(np.diff(times) < 1e-6):
                times = np.sort(rng.uniform(14.0, 40.0, size=n_i))
            for t in times:
                obs_rows.append(f"w{i:03d},{group},{float(t)!r},{float(rng.normal(90, 8))!r}")
            cov_rows.append(f"w{i:03d},{int(rng.random() < 0.3)},{int(rng.random() < 0.1)}")
        obs, cov = write_files(tmp_path, obs_rows, cov_rows,
                               cov_header="subject_id,x1,x2")
        ds = ingest(obs, cov)
        assert len(ds.subjects) == 282
        assert ds.n_groups == 2
        assert all(9 <= len(s.times) <= 19 for s in ds.subjects)
        assert all(s.covariates.shape == (3,) for s in ds.subjects)

    def test_dataset_roundtrip_through_writer(self, tmp_path):
        subjects = [
            Subject("a", 1, np.array([0.5, 1.5]), np.array([0.1, -0.2]),
                    np.array([1.0, 2.0])),
            Subject("b", 2, np.array([1.0, 2.0, 3.0]), np.array([0.3, 0.1, 0.0]),
                    np.array([1.0, -1.0])),
        ]
        ds = Dataset.build(subjects)
        write_dataset(ds, tmp_path)
        again = ingest(tmp_path / "observations.csv", tmp_path / "covariates.csv")
        for s1, s2 in zip(ds.subjects, again.subjects):
            assert s1.id == s2.id and s1.group == s2.group
            np.testing.assert_array_equal(s1.times, s2.times)
            np.testing.assert_array_equal(s1.values, s2.values)
            np.testing.assert_array_equal(s1.covariates, s2.covariates)


class TestConfigFile:
    def test_parse_and_precedence(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("seed=9\niters = 40   # comment\nburnin=10\nthin=2\n"
                            f"out={tmp_path / 'out'}\ncase=case2\nsubjects=5\n")
        parsed = load_config_file(cfg_file)
        assert parsed["seed"] == "9" and parsed["case"] == "case2"
        # 'simulate' honors the file, flag overrides seed
        rc = main(["simulate", "--config", str(cfg_file), "--seed", "3",
                   "--subjects", "6"])
        assert rc == 0
        cols = read_csv_columns(tmp_path / "out" / "covariates.csv")
        assert len(cols["subject_id"]) == 6

    def test_malformed_config_rejected(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("this is not a pair\n")
        rc = main(["simulate", "--config", str(cfg_file), "--out", str(tmp_path / "o")])
        assert rc == 1


class TestCommands:
    def _simulate(self, tmp_path, **kw):
        args = ["simulate", "--out", str(tmp_path / "data"), "--seed", "1",
                "--subjects", kw.get("subjects", "8"), "--case", kw.get("case", "case1")]
        assert main(args) == 0
        return tmp_path / "data"

    def test_simulate_writes_expected_files(self, tmp_path):
        data = self._simulate(tmp_path)
        for name in ("observations.csv", "covariates.csv", "truth_curves.csv",
                     "truth_subjects.csv", "truth_beta.csv"):
            assert (data / name).exists()
        ds = ingest(data / "observations.csv", data / "covariates.csv")
        assert len(ds.subjects) == 8

    def test_fit_smoke_writes_all_outputs(self, tmp_path):
        data = self._simulate(tmp_path)
        out = tmp_path / "fit"
        rc = main(["fit", "--data", str(data), "--out", str(out), "--seed", "2",
                   "--iters", "10", "--burnin", "5", "--thin", "5"])
        assert rc == 0
        for name in ("draws.csv", "summary.csv", "trajectories.csv"):
            assert (out / name).exists()
        cols = read_csv_columns(out / "draws.csv")
        assert "sigma2_eps" in cols and len(cols["sigma2_eps"]) == 1

    def test_fit_with_baselines(self, tmp_path):
        data = self._simulate(tmp_path, subjects="10")
        out = tmp_path / "fit"
        rc = main(["fit", "--data", str(data), "--out", str(out), "--seed", "2",
                   "--iters", "30", "--burnin", "10", "--thin", "2",
                   "--baseline", "two-stage"])
        assert rc == 0
        assert (out / "ncs_trajectories.csv").exists()
        assert (out / "two_stage.csv").exists()

    def test_evaluate_zero_metrics_on_truth(self, tmp_path):
        data = self._simulate(tmp_path)
        truth = read_csv_columns(data / "truth_curves.csv")
        rows = []
        for sid, t, mv, uv in zip(truth["subject_id"], truth["time"],
                                  truth["m_true"], truth["u_true"]):
            rows.append(f"{sid},{t},0.0,{mv},{uv},0.0,0.0")
        (data / "trajectories.csv").write_text(
            "subject_id,time,y,m_hat,u_hat,lo,hi\n" + "\n".join(rows) + "\n")
        out = tmp_path / "eval"
        assert main(["evaluate", "--data", str(data), "--out", str(out)]) == 0
        metrics = read_csv_columns(out / "metrics.csv")
        assert metrics["method"] == ["svr"]
        assert float(metrics["ase_traj"][0]) == 0.0

    def test_full_pipeline_and_evaluate(self, tmp_path):
        data = self._simulate(tmp_path, subjects="10")
        rc = main(["fit", "--data", str(data), "--out", str(data), "--seed", "4",
                   "--iters", "40", "--burnin", "20", "--thin", "1",
                   "--baseline", "ncs"])
        assert rc == 0
        out = tmp_path / "eval"
        assert main(["evaluate", "--data", str(data), "--out", str(out)]) == 0
        metrics = read_csv_columns(out / "metrics.csv")
        assert set(metrics["method"]) == {"svr", "ncs"}
        for v in metrics["ase_traj"]:
            assert float(v) > 0

    def test_summarize_verb(self, tmp_path):
        rng = np.random.default_rng(5)
        draws_path = tmp_path / "draws.csv"
        lines = ["alpha,beta[0]"]
        for _ in range(200):
            lines.append(f"{rng.normal()!r},{rng.normal()!r}")
        draws_path.write_text("\n".join(lines) + "\n")
        out = tmp_path / "sum"
        assert main(["summarize", "--draws", str(draws_path), "--out", str(out)]) == 0
        cols = read_csv_columns(out / "summary.csv")
        assert cols["parameter"] == ["alpha", "beta[0]"]

    def test_replicates_layout(self, tmp_path):
        out = tmp_path / "reps"
        assert main(["simulate", "--out", str(out), "--seed", "1",
                     "--subjects", "6", "--replicates", "2"]) == 0
        assert (out / "rep001" / "observations.csv").exists()
        assert (out / "rep002" / "observations.csv").exists()
        # replicate seeds differ
        a = (out / "rep001" / "observations.csv").read_text()
        b = (out / "rep002" / "observations.csv").read_text()
        assert a != b

    def test_parallel_replicate_fits_match_serial(self, tmp_path):
        out = tmp_path / "reps"
        assert main(["simulate", "--out", str(out), "--seed", "1",
                     "--subjects", "6", "--replicates", "2"]) == 0
        fit_args = ["fit", "--data", str(out), "--seed", "5", "--iters", "20",
                    "--burnin", "10", "--thin", "2", "--replicates", "2"]
        assert main(fit_args + ["--out", str(tmp_path / "serial"), "--jobs", "1"]) == 0
        assert main(fit_args + ["--out", str(tmp_path / "pool"), "--jobs", "2"]) == 0
        for rep in ("rep001", "rep002"):
            a = (tmp_path / "serial" / rep / "draws.csv").read_text()
            b = (tmp_path / "pool" / rep / "draws.csv").read_text()
            assert a == b

    def test_determinism_byte_identical(self, tmp_path):
        d1 = self._simulate(tmp_path / "one")
        d2 = self._simulate(tmp_path / "two")
        assert filecmp.cmp(d1 / "observations.csv", d2 / "observations.csv",
                           shallow=False)
        for out_name, seed in (("f1", "7"), ("f2", "7")):
            rc = main(["fit", "--data", str(d1), "--out", str(tmp_path / out_name),
                       "--seed", seed, "--iters", "30", "--burnin", "10", "--thin", "2"])
            assert rc == 0
        for name in ("draws.csv", "summary.csv", "trajectories.csv"):
            assert filecmp.cmp(tmp_path / "f1" / name, tmp_path / "f2" / name,
                               shallow=False)

    def test_error_exit_codes(self, tmp_path):
        assert main(["fit", "--out", str(tmp_path / "x")]) == 1        # no --data
        assert main(["fit", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "x")]) == 1               # missing files
        assert main(["simulate", "--out", str(tmp_path / "x"),
                     "--case", "case1", "--replicates", "0"]) == 1

    def test_no_partial_outputs_on_failure(self, tmp_path):
        data = self._simulate(tmp_path)
        (data / "covariates.csv").write_text("subject_id,x1\n")  # break the input
        out = tmp_path / "fit"
        rc = main(["fit", "--data", str(data), "--out", str(out), "--iters", "10",
                   "--burnin", "5", "--thin", "5"])
        assert rc == 1
        assert not (out.exists() and any(out.iterdir()))
