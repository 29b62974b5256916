import json
import subprocess
import sys

import numpy as np
import pytest

from arbc.cli import EXIT_CAP, EXIT_CONFIG, EXIT_ERROR, EXIT_OK, estimator_name, main
from arbc.core import Dataset


@pytest.fixture
def delta_files(tmp_path):
    bundle, data = tmp_path / "b.json", tmp_path / "d.jsonl"
    code = main(["gen", "--instance", "delta", "--H", "4", "--W", "4", "--delta", "0.1", "--samples", "80",
                 "--seed", "3", "--out", str(bundle), "--data", str(data)])
    assert code == EXIT_OK
    return bundle, data


class TestGen:
    """Instance bundles and trajectory files."""

    def test_delta(self, delta_files):
        bundle, data = delta_files
        d = json.loads(bundle.read_text())
        assert d["kind"] == "finite" and d["metadata"]["W"] == 4
        assert Dataset.read(data).actions.shape == (80, 4)

    def test_reproducible(self, tmp_path, delta_files):
        _, data = delta_files
        again = tmp_path / "again.jsonl"
        main(["gen", "--instance", "delta", "--H", "4", "--W", "4", "--delta", "0.1", "--samples", "80",
              "--seed", "3", "--out", str(tmp_path / "x.json"), "--data", str(again)])
        assert again.read_bytes() == data.read_bytes()

    @pytest.mark.parametrize("argv", [
        ["--instance", "consistency", "--H", "3"],
        ["--instance", "unbounded", "--H", "4", "--eps", "0.05"],
        ["--instance", "h", "--H", "8", "--W", "4", "--eps", "0.01"],
        ["--instance", "parity", "--H", "6", "--n-bits", "4", "--secret", "0,2", "--eta", "0.2"],
        ["--instance", "linear", "--H", "3"],
    ])
    def test_kinds(self, tmp_path, argv):
        out = tmp_path / "b.json"
        assert main(["gen", *argv, "--out", str(out)]) == EXIT_OK
        assert "kind" in json.loads(out.read_text())

    def test_missing_parameter(self, tmp_path):
        assert main(["gen", "--instance", "delta", "--H", "4", "--out", str(tmp_path / "b.json")]) == EXIT_CONFIG

    def test_samples_need_data(self, tmp_path):
        argv = ["gen", "--instance", "consistency", "--H", "3", "--samples", "5", "--out", str(tmp_path / "b.json")]
        assert main(argv) == EXIT_CONFIG

    def test_domain_error(self, tmp_path):
        argv = ["gen", "--instance", "delta", "--H", "4", "--W", "1", "--delta", "0.1", "--out", str(tmp_path / "b")]
        assert main(argv) == EXIT_ERROR


class TestFitEval:
    """Fitting and exact evaluation through files."""

    @pytest.mark.parametrize("estimator", ["log-loss", "rho", "boosted", "layered-rho", "traj_smoothed"])
    def test_fit_then_eval(self, tmp_path, delta_files, estimator):
        bundle, data = delta_files
        pol, summary = tmp_path / "p.json", tmp_path / "s.csv"
        code = main(["fit", "--bundle", str(bundle), "--data", str(data), "--estimator", estimator, "--seed", "1",
                     "--out", str(pol), "--summary", str(summary)])
        assert code == EXIT_OK
        fitted = json.loads(pol.read_text())
        assert fitted["estimator"] == estimator_name(estimator)
        head, row = summary.read_text().splitlines()
        assert head == "estimator,n,H,loss,wallclock_ms" and row.startswith(fitted["estimator"] + ",80,4,")
        out = tmp_path / "e.json"
        assert main(["eval", "--bundle", str(bundle), "--policy", str(pol), "--out", str(out)]) == EXIT_OK
        metrics = json.loads(out.read_text())
        if estimator != "layered-rho":
            # per-step selection may leave the class
            assert metrics["best_in_class"] <= metrics["hellinger_sq"] + 1e-12
        assert metrics["tv"] <= np.sqrt(metrics["hellinger_sq"]) + 1e-12

    def test_linear_gaalm_and_chunk(self, tmp_path):
        bundle, data = tmp_path / "b.json", tmp_path / "d.jsonl"
        main(["gen", "--instance", "linear", "--H", "3", "--samples", "60", "--seed", "0", "--out", str(bundle),
              "--data", str(data)])
        pol = tmp_path / "p.json"
        params = json.dumps({"n_iterations": 100})
        assert main(["fit", "--bundle", str(bundle), "--data", str(data), "--estimator", "gaalm", "--params", params,
                     "--out", str(pol), "--summary", str(tmp_path / "s")]) == EXIT_OK
        assert len(json.loads(pol.read_text())["theta"]) == 2
        params = json.dumps({"overrides": {"B": 10.0, "gamma": 1e-3, "eps_apx": 0.05, "T": 100, "eta": 1.0}})
        assert main(["fit", "--bundle", str(bundle), "--data", str(data), "--estimator", "chunk-kr", "--chunk", "3",
                     "--params", params, "--out", str(pol), "--summary", str(tmp_path / "s")]) == EXIT_OK
        assert main(["eval", "--bundle", str(bundle), "--policy", str(pol), "--out", str(tmp_path / "e")]) == EXIT_OK

    def test_default_cap(self, tmp_path):
        bundle, data = tmp_path / "b.json", tmp_path / "d.jsonl"
        main(["gen", "--instance", "linear", "--H", "2", "--samples", "20", "--seed", "0", "--out", str(bundle),
              "--data", str(data)])
        with pytest.warns(RuntimeWarning, match="capped"):
            code = main(["fit", "--bundle", str(bundle), "--data", str(data), "--estimator", "chunk-kr",
                         "--out", str(tmp_path / "p"), "--summary", str(tmp_path / "s")])
        assert code == EXIT_CAP

    @pytest.mark.parametrize("extra", [["--params", "[1]"], ["--params", "{"], ["--params", '{"bogus": 1}'],
                                       ["--estimator", "gaalm"]])
    def test_bad_parameters(self, tmp_path, delta_files, extra):
        bundle, data = delta_files
        argv = ["fit", "--bundle", str(bundle), "--data", str(data), "--estimator", "log_loss",
                "--out", str(tmp_path / "p"), "--summary", str(tmp_path / "s")]
        assert main(argv + extra) == EXIT_CONFIG

    def test_consistency_eval_needs_secret(self, tmp_path):
        bundle, data = tmp_path / "b.json", tmp_path / "d.jsonl"
        main(["gen", "--instance", "consistency", "--H", "3", "--samples", "16", "--seed", "2", "--out", str(bundle),
              "--data", str(data)])
        pol = tmp_path / "p.json"
        assert main(["fit", "--bundle", str(bundle), "--data", str(data), "--estimator", "log_loss",
                     "--out", str(pol), "--summary", str(tmp_path / "s")]) == EXIT_OK
        assert main(["eval", "--bundle", str(bundle), "--policy", str(pol)]) == EXIT_CONFIG
        out = tmp_path / "e.json"
        assert main(["eval", "--bundle", str(bundle), "--policy", str(pol), "--secret", "5", "--out", str(out)]) == 0
        np.testing.assert_allclose(json.loads(out.read_text())["best_in_class"], 0.25, atol=1e-12)

    def test_missing_file(self, tmp_path):
        assert main(["eval", "--bundle", str(tmp_path / "none"), "--policy", str(tmp_path / "p")]) == EXIT_CONFIG


class TestBenchDemo:
    """Sweeps and the noisy-parity demo."""

    def write_config(self, tmp_path):
        cfg = {"seed": 11, "instance": {"kind": "delta", "H": 4, "W": 4, "delta": 0.1},
               "estimators": ["log_loss", "rho"], "sweep": {"n": [50], "seeds": 3},
               "output": {"csv": "res.csv"}}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_bench_files(self, tmp_path):
        cfg = self.write_config(tmp_path)
        out = tmp_path / "a.csv"
        assert main(["bench", "--config", str(cfg), "--out", str(out), "--jobs", "2"]) == EXIT_OK
        assert out.read_text().startswith("estimator,instance,H,W,n,seed,")
        assert (tmp_path / "a.plot.csv").exists()
        out2 = tmp_path / "b.csv"
        assert main(["bench", "--config", str(cfg), "--out", str(out2)]) == EXIT_OK
        assert out.read_bytes() == out2.read_bytes()

    def test_bench_errors(self, tmp_path):
        assert main(["bench"]) == EXIT_CONFIG
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"seed": 0, "instance": {"kind": "delta"}, "sweep": {"n": [5], "seeds": 1},
                                   "estimators": ["log_loss"], "extra": 1}))
        assert main(["bench", "--config", str(bad)]) == EXIT_CONFIG

    def test_demo(self, tmp_path):
        cfg = tmp_path / "demo.json"
        cfg.write_text(json.dumps({"trials": 60, "train_size": 2}))
        out = tmp_path / "r.json"
        assert main(["demo-lpn", "--config", str(cfg), "--seed", "4", "--out", str(out)]) == EXIT_OK
        report = json.loads(out.read_text())
        assert report["parity_frequency"] > report["uniform_frequency"]
        cfg.write_text(json.dumps({"planets": 3}))
        assert main(["demo-lpn", "--config", str(cfg)]) == EXIT_CONFIG

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "arbc.cli", "gen", "--instance", "consistency", "--H", "2"],
                              capture_output=True, text=True, check=True)
        assert json.loads(proc.stdout)["kind"] == "consistency"
