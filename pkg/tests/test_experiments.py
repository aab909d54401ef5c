import math

import numpy as np
import pytest

from hcope.envs import TabularMDP
from hcope.errors import ConfigError
from hcope.experiments import (
    CSV_COLUMNS,
    Problem,
    SweepConfig,
    SweepResult,
    TrialRecord,
    aggregate,
    config_text,
    emit_csv,
    ground_truth,
    make_estimator,
    make_problem,
    parse_config,
    read_csv,
    resolve_env,
    run_sweep,
    _trial,
)
from hcope.policies import TabularPolicy

from oracles import dp_value


class TestConfig:
    def test_defaults(self):
        cfg = SweepConfig()
        assert cfg.m == 100 and cfg.B == 2000 and cfg.delta == 0.05
        assert SweepConfig(env="cliff-world-v0", estimators=("is",)).m == 50
        assert SweepConfig(full_scale=True).m == 400

    def test_estimator_env_mismatch(self):
        with pytest.raises(ConfigError, match="continuous"):
            SweepConfig(env="mountain-car-v0", estimators=("mb-lr",))
        with pytest.raises(ConfigError, match="discrete"):
            SweepConfig(env="cliff-world-v0", estimators=("wdr-tabular",))

    def test_n_values_increasing(self):
        with pytest.raises(ConfigError):
            SweepConfig(n_values=(5, 5))
        with pytest.raises(ConfigError):
            SweepConfig(n_values=(0, 5))

    def test_parse_round_trip(self):
        cfg = SweepConfig(env="micro-mdp-v0", estimators=("is", "wdr-tabular"), n_values=(2, 4), trials=3,
                          B=100, delta=0.1, seed=9)
        assert parse_config(config_text(cfg)) == cfg

    def test_parse_comments_and_unknown_keys(self):
        cfg = parse_config("env = micro-mdp-v0  # tiny\nn-values = 3, 7\n")
        assert cfg.n_values == (3, 7)
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config("colour = red\n")
        with pytest.raises(ConfigError, match="bad value"):
            parse_config("B = many\n")


class TestRegistry:
    def test_resolve_micro(self):
        assert resolve_env("micro-mdp-1") == ("micro-mdp-v0", 1)
        with pytest.raises(ConfigError):
            resolve_env("micro-mdp-9")

    def test_unknown_policy(self):
        with pytest.raises(ConfigError, match="unknown policy"):
            make_problem("mountain-car-v0", pi_e="optimal")

    def test_estimator_names(self):
        p = make_problem("micro-mdp-v0")
        for name in ("is", "pdis", "wis", "pdwis", "mb-tabular", "wdr-tabular", "dr"):
            assert make_estimator(name, p.env).name == name
        with pytest.raises(ConfigError):
            make_estimator("mb-lr", p.env)

    def test_ground_truth_exact_for_tabular(self):
        p = make_problem("micro-mdp-v0", micro_index=1)
        v, se = ground_truth(p, 10, 0)
        env = p.env
        assert se == 0.0
        assert v == pytest.approx(dp_value(env.P, env.r, env.d0, p.pi_e.probs, env.spec.horizon, env.spec.gamma),
                                  abs=1e-13)


def rec(name, n, t, status, lb):
    return TrialRecord(name, n, t, status, lb, lb)


class TestAggregate:
    def test_constant_single_trial(self):
        rows = aggregate([rec("c", 1, 0, "valid", 0.5)], ("c",), (1,), 1.0, 0.0)
        assert rows[0].mean_bound == 0.5 and rows[0].error_rate == 0.0 and math.isnan(rows[0].ci_low)

    def test_valid_only_mean_and_rate(self):
        recs = [rec("a", 5, 0, "valid", 1.0), rec("a", 5, 1, "valid", 3.0), rec("a", 5, 2, "invalid", 9.0),
                rec("a", 5, 3, "failed", math.nan)]
        row = aggregate(recs, ("a",), (5,), 4.0, 0.0)[0]
        assert row.mean_bound == 2.0
        assert row.error_rate == pytest.approx(1 / 3)
        assert (row.valid, row.invalid, row.failed) == (2, 1, 1)
        half = 12.706204736174698 * math.sqrt(2.0) / math.sqrt(2)
        assert row.ci_high - row.mean_bound == pytest.approx(half, rel=1e-9)

    def test_trial_exchangeability(self):
        rng = np.random.default_rng(0)
        recs = [rec("a", 5, t, "valid" if x < 1 else "invalid", x) for t, x in enumerate(rng.normal(size=30))]
        perm = rng.permutation(30)
        shuffled = [TrialRecord(r.estimator, r.n, int(perm[r.trial]), r.status, r.lower_bound, r.point_estimate)
                    for r in recs][::-1]
        assert aggregate(recs, ("a",), (5,), 1.0, 0.0) == aggregate(shuffled, ("a",), (5,), 1.0, 0.0)

    def test_bound_equal_to_truth_is_valid(self):
        P = np.zeros((2, 1, 2))
        P[:, 0, 1] = 1.0
        env = TabularMDP(P, [[0.5], [0.5]], [1.0, 0.0], horizon=3, r_min=0.0, r_max=1.0)
        pi = TabularPolicy([[1.0], [1.0]])
        problem = Problem(env, pi, pi)
        v, _ = ground_truth(problem, 1, 0)
        cfg = SweepConfig(env="micro-mdp-v0", estimators=("is",), n_values=(3,), B=100)
        out = _trial(cfg, problem, [("is", make_estimator("is", env))], 3, 0, v)
        assert out[0].lower_bound == v == 1.5
        assert out[0].status == "valid"


SMALL = dict(env="micro-mdp-v0", estimators=("is", "wdr-tabular"), n_values=(5, 10), trials=4, B=100)


class TestSweep:
    def test_deterministic_and_worker_independent(self):
        a = run_sweep(SweepConfig(**SMALL))
        b = run_sweep(SweepConfig(**SMALL))
        c = run_sweep(SweepConfig(**SMALL, workers=3))
        assert a.rows == b.rows == c.rows
        assert a.records == c.records

    def test_seed_changes_results(self):
        a = run_sweep(SweepConfig(**SMALL))
        b = run_sweep(SweepConfig(**SMALL, seed=1))
        assert [r.lower_bound for r in a.records] != [r.lower_bound for r in b.records]

    def test_error_rate_on_micro_mdp(self):
        cfg = SweepConfig(env="micro-mdp-v0", estimators=("pdis",), n_values=(20,), trials=500, B=200)
        res = run_sweep(cfg)
        row = res.row("pdis", 20)
        assert row.valid + row.invalid == 500
        assert row.error_rate <= 0.10

    def test_ground_truth_precision_guard(self):
        cfg = SweepConfig(env="mountain-car-v0", estimators=("is",), n_values=(2,), trials=1, B=100,
                          ground_truth_rollouts=5)
        with pytest.raises(ConfigError, match="stderr"):
            run_sweep(cfg)


class TestCsv:
    def test_empty_result_header_only(self, tmp_path):
        path = tmp_path / "e.csv"
        emit_csv(SweepResult(), path)
        assert path.read_text().strip() == ",".join(CSV_COLUMNS)

    def test_round_trip_and_cardinality(self, tmp_path):
        res = run_sweep(SweepConfig(env="micro-mdp-v0", estimators=("is", "wis"), n_values=(3, 6, 9), trials=3,
                                    B=100))
        path = tmp_path / "s.csv"
        emit_csv(res, path)
        back = read_csv(path)
        assert len(back) == 6
        for a, b in zip(res.rows, back):
            for col in CSV_COLUMNS:
                x, y = getattr(a, col), getattr(b, col)
                if isinstance(x, float) and math.isnan(x):
                    assert math.isnan(y)
                elif isinstance(x, float):
                    assert y == pytest.approx(x, rel=1e-12)
                else:
                    assert x == y

    def test_figures(self, tmp_path):
        from hcope.plotting import render_figures
        res = run_sweep(SweepConfig(**SMALL))
        paths = render_figures(res, tmp_path / "fig")
        assert all(p.endswith(".png") for p in paths)
        for p in paths:
            with open(p, "rb") as fh:
                assert fh.read(8) == b"\x89PNG\r\n\x1a\n"
