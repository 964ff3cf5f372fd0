import json

import numpy as np
import pytest

from tdlab.cli import main
from tdlab.harness import read_trace_csv


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv("TDLAB_OUTPUT_DIR", str(tmp_path))
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def small_spec(workdir, **kw):
    assert main(["gen", "example1", "-o", "ex1.json"]) == 0
    data = json.loads((workdir / "ex1.json").read_text())
    data.update(n_iterations=3000, n_runs=3, **kw)
    return write(workdir / "small.json", data)


class TestSolve:
    def test_example1(self, workdir):
        assert main(["gen", "example1", "-o", "ex1.json"]) == 0
        assert main(["solve", "ex1.json", "-o", "solved.json"]) == 0
        out = json.loads((workdir / "solved.json").read_text())
        assert out["mu"] == pytest.approx(3.18182, abs=1e-5)
        assert out["theta_star"][0] == pytest.approx(3500 / 566)
        assert set(out) >= {"theta_star", "v_pi", "mu", "A", "b"}

    def test_zero_reward(self, workdir, capsys):
        path = write(workdir / "z.json", {"transition": [[0.2, 0.8], [0.3, 0.7]], "reward": [0, 0],
                                          "discount": 0.9, "features": [[1.0], [2.0]]})
        assert main(["solve", path]) == 0
        assert json.loads(capsys.readouterr().out)["theta_star"] == [0.0]

    def test_rank_deficient(self, workdir, capsys):
        path = write(workdir / "r.json", {"transition": [[0.2, 0.8], [0.3, 0.7]], "reward": [1, 2],
                                          "discount": 0.9, "features": [[1.0, 2.0], [2.0, 4.0]]})
        assert main(["solve", path]) == 1
        assert "RankDeficientFeatures" in capsys.readouterr().err

    def test_files_problem(self, workdir, capsys):
        write(workdir / "mrp.json", {"transition": [[0.2, 0.8], [0.3, 0.7]], "reward": [1, 2], "discount": 0.9})
        path = write(workdir / "p.json", {"kind": "files", "mrp": "mrp.json", "features": "identity"})
        assert main(["solve", path]) == 0
        out = json.loads(capsys.readouterr().out)
        np.testing.assert_allclose(out["theta_star"], out["v_pi"], atol=1e-10)

    def test_missing_file(self, workdir):
        assert main(["solve", "nope.json"]) == 1

    def test_bad_json(self, workdir):
        (workdir / "bad.json").write_text("{")
        assert main(["solve", "bad.json"]) == 1


class TestRun:
    def test_single_run(self, workdir):
        path = small_spec(workdir)
        assert main(["run", path, "--override", "n_runs=1", "-o", "one.csv"]) == 0
        data = read_trace_csv(workdir / "one.csv")
        for key in ("td0_dev", "td0avg_dev", "ctd_dev"):
            assert np.all(data[key] == 0)

    def test_deterministic(self, workdir):
        path = small_spec(workdir)
        assert main(["run", path, "-o", "a.csv"]) == 0
        assert main(["run", path, "-o", "b.csv", "--workers", "2"]) == 0
        assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()

    def test_output_dir_env(self, workdir, tmp_path_factory, monkeypatch):
        path = small_spec(workdir)
        other = tmp_path_factory.mktemp("outdir")
        monkeypatch.setenv("TDLAB_OUTPUT_DIR", str(other))
        assert main(["run", path]) == 0
        assert (other / "example1.csv").exists()

    def test_inadmissible(self, workdir, capsys):
        path = small_spec(workdir)
        assert main(["run", path, "--override", "algorithms.td0.c0=1"]) == 1
        err = capsys.readouterr().err
        assert "c0 < mu(1-beta)/(2(1+beta)^2) fails" in err

    def test_inadmissible_with_flag(self, workdir):
        path = small_spec(workdir)
        assert main(["run", path, "--override", "algorithms.td0.c0=0.1",
                     "--override", "algorithms.td0.allow_inadmissible=true", "-o", "x.csv"]) == 0

    def test_unknown_key(self, workdir, capsys):
        path = small_spec(workdir)
        assert main(["run", path, "--override", "n_rnus=1"]) == 1
        assert "did you mean 'n_runs'" in capsys.readouterr().err

    def test_all_runs_diverge(self, workdir):
        path = small_spec(workdir)
        code = main(["run", path, "--override", "algorithms.td0_avg.c0=60", "-o", "d.csv"])
        assert code == 2
        assert (workdir / "d.csv").read_text().startswith("# diverged td0avg")

    def test_usage_error(self, workdir):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1


class TestReports:
    def test_bounds(self, workdir):
        path = small_spec(workdir)
        assert main(["bounds", path, "-o", "b.json"]) == 0
        rep = json.loads((workdir / "b.json").read_text())
        td0 = rep["algorithms"]["td0"]
        assert td0["admissible"] and td0["step_bound"] == pytest.approx(0.04407, abs=1e-5)
        assert set(rep["c_big"]) == {"theorem", "alternate"}
        assert rep["algorithms"]["td0_avg"]["constants"]["c_dprime"] == pytest.approx(2.612375, abs=1e-6)
        ctd = rep["algorithms"]["ctd"]
        assert ctd["admissible"] and ctd["constants"]["c1"] < 1

    def test_bounds_inadmissible_reports_margins(self, workdir, capsys):
        path = small_spec(workdir)
        assert main(["bounds", path, "--override", "algorithms.td0.c0=1"]) == 0
        td0 = json.loads(capsys.readouterr().out)["algorithms"]["td0"]
        assert not td0["admissible"] and td0["step_margin"] < 0 and td0["failures"]

    def test_mixing(self, workdir, capsys):
        path = small_spec(workdir)
        assert main(["mixing", path]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["rho"] == pytest.approx(0.1, abs=1e-12)
        assert len(rep["b_prime_per_state"]) == 2

    def test_mixing_truncation_zero(self, workdir, capsys):
        path = small_spec(workdir)
        assert main(["mixing", path, "--truncation", "0"]) == 1
        assert "TruncationTooSmall" in capsys.readouterr().err

    def test_gen_roundtrip_example2(self, workdir):
        assert main(["gen", "example2", "-o", "ex2.json"]) == 0
        assert main(["solve", "ex2.json", "-o", "s2.json"]) == 0
        assert main(["run", "ex2.json", "--override", "n_runs=2", "--override", "n_iterations=2000",
                     "--override", "algorithms.ctd.epoch_length=500", "--override", "algorithms.ctd.allow_inadmissible=true",
                     "-o", "r2.csv"]) == 0
        data = read_trace_csv(workdir / "r2.csv")
        assert data["iteration"][-1] == 2000
