"""Experiment runner, CSV/JSONL emission, config handling, CLI exit codes,
and the self-check suite."""
import json

import numpy as np
import pytest

from qdispatch import SystemParams
from qdispatch.cli import (
    CSV_HEADER,
    ExperimentConfig,
    _replication_seed,
    load_config,
    main,
    raw_to_jsonl,
    rows_to_csv,
    run_experiment,
    solve_report,
    verify_checks,
)


class TestReplicationSeeds:
    def test_stable_across_scenario_sets(self):
        a = _replication_seed(0, "eps-klnt", 0.2, 3)
        b = _replication_seed(0, "eps-klnt", 0.2, 3)
        assert a == b

    def test_distinct_axes(self):
        seeds = {
            _replication_seed(0, "eps-klnt", 0.2, 0),
            _replication_seed(0, "eps-kt", 0.2, 0),
            _replication_seed(0, "eps-klnt", 0.4, 0),
            _replication_seed(0, "eps-klnt", 0.2, 1),
            _replication_seed(1, "eps-klnt", 0.2, 0),
        }
        assert len(seeds) == 5


class TestRunExperiment:
    def test_genie_vs_genie_all_zero(self):
        config = ExperimentConfig(
            mu=(0.45, 0.55), lambdas=(0.2,), policies=("owr",),
            horizon=5000, replications=1, base_seed=0)
        rows, raw = run_experiment(config)
        assert all(r.mean_regret == 0.0 and r.std_regret == 0.0 for r in rows)
        assert all(r.reps == 1 for r in rows)

    def test_rows_sorted_and_csv_schema(self):
        config = ExperimentConfig(
            mu=(0.45, 0.55), lambdas=(0.3, 0.2), policies=("uniform", "owr"),
            horizon=2000, replications=2, base_seed=1, checkpoint_count=8)
        rows, raw = run_experiment(config)
        keys = [(r.policy, r.lam, r.t) for r in rows]
        assert keys == sorted(keys)
        csv_text = rows_to_csv(rows)
        assert csv_text.splitlines()[0] == CSV_HEADER
        assert len(raw) == 2 * 2 * 2

    def test_worker_count_does_not_change_output(self):
        kw = dict(mu=(0.45, 0.55), lambdas=(0.2,), policies=("eps-kt",),
                  horizon=5000, replications=4, base_seed=2,
                  checkpoint_count=8)
        rows1, _ = run_experiment(ExperimentConfig(workers=1, **kw))
        rows2, _ = run_experiment(ExperimentConfig(workers=2, **kw))
        assert rows_to_csv(rows1) == rows_to_csv(rows2)

    def test_raw_jsonl_round_trip(self):
        config = ExperimentConfig(
            mu=(0.45, 0.55), lambdas=(0.2,), policies=("uniform",),
            horizon=1000, replications=2, base_seed=3, checkpoint_count=4)
        rows, raw = run_experiment(config)
        lines = raw_to_jsonl(raw, config.checkpoints).strip().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert rec["policy"] == "uniform"
        assert len(rec["regret"]) == len(rec["checkpoints"])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(mu=(0.5,), lambdas=(), policies=("owr",),
                             horizon=10, replications=1)
        with pytest.raises(ValueError):
            ExperimentConfig(mu=(0.5,), lambdas=(0.2,), policies=("owr",),
                             horizon=10, replications=0)


class TestSolveReport:
    def test_two_server_report(self):
        report = solve_report(SystemParams(lam=0.2, mu=(0.45, 0.55)))
        assert report["p"] == pytest.approx([0.25, 0.75], abs=1e-12)
        assert report["support"] == [0, 1]
        assert report["mean_total_queue"] == pytest.approx(19 / 80)
        assert report["r"] == pytest.approx([0.4, 0.4], abs=1e-12)
        assert report["delta_cap"] > 0
        assert not report["zero_tolerance_gap"]

    def test_single_server_report(self):
        report = solve_report(SystemParams(lam=0.3, mu=(0.5,)))
        assert report["p"] == [1.0]


class TestCliCommands:
    def test_solve_stdout(self, capsys):
        assert main(["solve", "--lambda", "0.2", "--mu", "0.45,0.55"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert float(out["p"][0]) == pytest.approx(0.25, abs=1e-12)
        assert float(out["p"][1]) == pytest.approx(0.75, abs=1e-12)

    def test_simulate_stdout(self, capsys):
        code = main(["simulate", "--lambda", "0.2", "--mu", "0.45,0.55",
                     "--policy", "owr", "--horizon", "50000", "--seed", "1"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert float(out["time_avg_total_queue"]) > 0
        assert "formula_total_queue" in out

    def test_unstable_input_is_config_error(self, capsys):
        assert main(["solve", "--lambda", "0.9", "--mu", "0.3,0.3"]) == 2

    def test_regret_csv_and_raw(self, tmp_path, capsys):
        out = tmp_path / "agg.csv"
        raw = tmp_path / "raw.jsonl"
        code = main(["regret", "--lambda", "0.2", "--mu", "0.45,0.55",
                     "--policies", "uniform", "--horizon", "2000",
                     "--reps", "2", "--seed", "4",
                     "--out", str(out), "--raw", str(raw)])
        assert code == 0
        assert out.read_text().splitlines()[0] == CSV_HEADER
        assert len(raw.read_text().strip().splitlines()) == 2

    def test_regret_toml_config_with_overrides(self, tmp_path):
        cfg = tmp_path / "exp.toml"
        cfg.write_text(
            "[experiment]\n"
            "mu = [0.45, 0.55]\n"
            "lambdas = [0.2]\n"
            'policies = ["uniform"]\n'
            "horizon = 1000\n"
            "replications = 1\n"
            "base_seed = 7\n"
            "checkpoint_count = 4\n")
        out1 = tmp_path / "a.csv"
        out2 = tmp_path / "b.csv"
        assert main(["regret", "--config", str(cfg), "--out", str(out1)]) == 0
        assert main(["regret", "--config", str(cfg), "--out", str(out2),
                     "--reps", "2"]) == 0
        assert out1.read_text() != out2.read_text()
        assert ",1\n" in out1.read_text() and ",2\n" in out2.read_text()

    def test_bad_config_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("not toml [")
        assert main(["regret", "--config", str(cfg)]) == 2
        assert main(["regret", "--policies", "sed"]) == 2
        assert main(["regret", "--lambda", "5.0"]) == 2


class TestVerify:
    def test_fresh_build_passes(self):
        checks = verify_checks(seed=0, fast=True)
        failed = [c["name"] for c in checks if not c["pass"]]
        assert not failed, f"verify checks failed: {failed}"

    def test_fault_injection_trips_oracle_check(self, monkeypatch):
        import qdispatch.cli as cli

        real = cli.optimal_routing

        def corrupted(params):
            rv = real(params)
            p = list(rv.p)
            if (len(p) >= 2 and p[0] > 0.02
                    and params.lam * (p[1] + 0.01) < params.mu[1]):
                p[0] -= 0.01
                p[1] += 0.01
                object.__setattr__(rv, "p", tuple(p))
            return rv

        monkeypatch.setattr(cli, "optimal_routing", corrupted)
        checks = cli.verify_checks(seed=0, fast=True)
        oracle = next(c for c in checks if c["name"] == "oracle_equivalence")
        assert not oracle["pass"]
