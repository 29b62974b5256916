import json
import warnings

import numpy as np
import pytest

from arbc.bench import (
    CSV_HEADER, NA, ExperimentConfig, csv_text, default_plot_path, emit_report, plot_text, run_experiment, sort_rows,
)
from arbc.errors import ConfigError, DomainError


def delta_config(**extra):
    d = {"seed": 7, "instance": {"kind": "delta", "H": 4, "W": 4, "delta": 0.1},
         "estimators": ["log_loss", {"name": "rho", "label": "rho-strict"}],
         "sweep": {"n": [60, 120], "seeds": 3}}
    d.update(extra)
    return d


class TestConfig:
    """Validation of sweep descriptions."""

    def test_parse(self):
        cfg = ExperimentConfig.from_dict(delta_config())
        assert cfg.seeds == [0, 1, 2] and cfg.n == [60, 120]
        assert [s.display(None) for s in cfg.estimators] == ["log_loss", "rho-strict"]
        assert len(cfg.points()) == 2

    @pytest.mark.parametrize("patch,match", [
        ({"colour": 1}, "unknown key"),
        ({"sweep": {"n": [10], "seeds": 2, "m": [1]}}, "unknown key"),
        ({"instance": {"kind": "delta", "H": 4, "W": 4, "delta": 0.1, "z": 1}}, "unknown key"),
        ({"instance": {"kind": "torus"}}, "instance kind"),
        ({"estimators": ["magic"]}, "unknown estimator"),
        ({"estimators": ["gaalm"]}, "does not apply"),
        ({"sweep": {"seeds": 2}}, "'n' axis"),
        ({"sweep": {"n": [10]}}, "seeds"),
        ({"sweep": {"n": [10, -1], "seeds": 2}}, "positive"),
        ({"sweep": {"n": [10], "seeds": [1, 1]}}, "distinct"),
        ({"sweep": {"n": [10], "seeds": 2, "K": [2]}}, "chunk_kr"),
        ({"seed": -1}, "nonnegative"),
        ({"grid_points": 1}, "grid_points"),
    ])
    def test_rejects(self, patch, match):
        with pytest.raises(ConfigError, match=match):
            ExperimentConfig.from_dict(delta_config(**patch))

    def test_missing_seed(self):
        d = delta_config()
        del d["seed"]
        with pytest.raises(ConfigError, match="seed"):
            ExperimentConfig.from_dict(d)

    def test_w_axis_on_game(self):
        d = {"seed": 0, "instance": {"kind": "consistency", "H": 3}, "estimators": ["log_loss"],
             "sweep": {"n": [10], "W": [2], "seeds": 1}}
        with pytest.raises(ConfigError, match="W axis"):
            ExperimentConfig.from_dict(d)

    def test_load_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{")
        with pytest.raises(ConfigError, match="JSON"):
            ExperimentConfig.load(p)


class TestRun:
    """Rows, sentinels and ordering."""

    def test_empty_estimators(self):
        cfg = ExperimentConfig.from_dict(delta_config(estimators=[]))
        with pytest.warns(UserWarning, match="empty"):
            assert run_experiment(cfg) == []
        with pytest.raises(DomainError):
            emit_report([], "unused.csv")

    def test_consistency_game(self):
        cfg = ExperimentConfig.from_dict({"seed": 1, "instance": {"kind": "consistency", "H": 3},
                                          "estimators": ["log_loss"], "sweep": {"n": [16], "seeds": 4}})
        rows = run_experiment(cfg)
        assert len(rows) == 4
        for r in rows:
            np.testing.assert_allclose(r["best_in_class"], 0.25, rtol=0, atol=1e-12)
            assert 0.25 - 1e-12 <= r["hellinger_sq"] <= 2.0 + 1e-12

    def test_rows_and_sentinels(self):
        rows = run_experiment(ExperimentConfig.from_dict(delta_config()))
        assert len(rows) == 2 * 2 * 3
        text = csv_text(rows)
        lines = text.splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert all(line.endswith("," + NA) for line in lines[1:])
        for r in rows:
            assert r["tv"] <= np.sqrt(r["hellinger_sq"]) + 1e-12
            np.testing.assert_allclose(r["approx_ratio"], r["hellinger_sq"] / r["best_in_class"], rtol=1e-12)

    def test_wallclock_opt_in(self):
        rows = run_experiment(ExperimentConfig.from_dict(delta_config(record_wallclock=True)))
        assert all(r["wallclock_ms"] >= 0 for r in rows)

    def test_sort_order(self):
        rows = run_experiment(ExperimentConfig.from_dict(delta_config()))
        keys = [(r["estimator"], r["H"], r["n"], r["seed"]) for r in rows]
        assert keys == sorted(keys)
        shuffled = list(reversed(rows))
        assert sort_rows(shuffled) == rows

    def test_stat_floor(self):
        rows = run_experiment(ExperimentConfig.from_dict(delta_config(stat_floor=True, estimators=["log_loss"])))
        for r in rows:
            assert 0.0 <= r["stat_floor"] <= 2.0
            np.testing.assert_allclose(r["approx_ratio"], (r["hellinger_sq"] - r["stat_floor"]) / r["best_in_class"],
                                       rtol=1e-12)

    def test_h_axis(self):
        cfg = ExperimentConfig.from_dict(delta_config(sweep={"n": [60], "H": [3, 5], "W": [3.0, 4.0], "seeds": 2}))
        rows = run_experiment(cfg)
        assert {(r["H"], r["W"]) for r in rows} == {(3, 3.0), (3, 4.0), (5, 3.0), (5, 4.0)}

    def test_reports(self, tmp_path):
        rows = run_experiment(ExperimentConfig.from_dict(delta_config()))
        out = tmp_path / "r.csv"
        emit_report(rows, out, default_plot_path(out))
        assert out.read_text() == csv_text(rows)
        plot = (tmp_path / "r.plot.csv").read_text().splitlines()
        assert plot[0].startswith("estimator,H,median_approx_ratio")
        assert len(plot) == 1 + 2
        assert plot_text(rows) == "\n".join(plot) + "\n"


class TestLinear:
    """Linear instances with a chunk axis."""

    def test_k_axis_only_reaches_chunk_kr(self):
        fast = {"B": 10.0, "gamma": 1e-3, "eps_apx": 0.05, "T": 50, "eta": 1.0}
        cfg = ExperimentConfig.from_dict({
            "seed": 3, "instance": {"kind": "linear", "H": 2},
            "estimators": [{"name": "gaalm", "params": {"n_iterations": 20}},
                           {"name": "chunk_kr", "params": {"overrides": fast}}],
            "sweep": {"n": [20], "K": [1, 2], "seeds": 1}})
        labels = sorted(r["estimator"] for r in run_experiment(cfg))
        assert labels == ["chunk_kr[K=1]", "chunk_kr[K=2]", "gaalm", "gaalm"]

    def test_bad_estimator_params(self):
        cfg = ExperimentConfig.from_dict(delta_config(estimators=[{"name": "log_loss", "params": {"lam": 1}}]))
        with pytest.raises(ConfigError, match="bad parameters"):
            run_experiment(cfg)


class TestDeterminism:
    """Byte-identical output regardless of scheduling."""

    def test_same_seed_same_bytes(self):
        cfg = ExperimentConfig.from_dict(delta_config())
        assert csv_text(run_experiment(cfg)) == csv_text(run_experiment(cfg))

    def test_parallel_matches_serial(self):
        cfg = ExperimentConfig.from_dict(delta_config(estimators=["log_loss", "boosted_log_loss"]))
        assert csv_text(run_experiment(cfg, jobs=1)) == csv_text(run_experiment(cfg, jobs=4))

    def test_seed_changes_output(self):
        a = csv_text(run_experiment(ExperimentConfig.from_dict(delta_config())))
        b = csv_text(run_experiment(ExperimentConfig.from_dict(delta_config(seed=8))))
        assert a != b

    def test_bundle_instance(self, tmp_path):
        from arbc.instances import make_delta_instance

        (tmp_path / "b.json").write_text(make_delta_instance(4, 4, 0.1).dumps())
        d = delta_config(instance={"bundle": "b.json"})
        (tmp_path / "c.json").write_text(json.dumps(d))
        rows = run_experiment(ExperimentConfig.load(tmp_path / "c.json"))
        direct = run_experiment(ExperimentConfig.from_dict(delta_config()))
        assert csv_text(rows) == csv_text(direct)
