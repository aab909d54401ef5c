import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hcope.bootstrap import (
    BootstrapConfig,
    bca_level,
    bca_lower_bound,
    lower_bound,
    percentile_lower_bound,
    resample_indices,
    resample_matrix,
)
from hcope.envs import micro_mdp, sample_dataset
from hcope.errors import ConfigError, NumericFailure
from hcope.importance import ImportanceEstimator
from hcope.mdp import Dataset, Trajectory

from oracles import dp_value


def scalar_dataset(values):
    return Dataset(tuple(Trajectory(np.array([0]), np.array([0]), np.array([float(x)])) for x in values))


class SampleMean:
    """Vectorised sample mean of the first reward; a non-RL estimator."""

    name = "mean"

    def prepare(self, ds, pi_e, pi_b):
        x = np.array([t.rewards[0] for t in ds])
        return _Prepared(x)


class _Prepared:
    def __init__(self, x):
        self.x, self.n = x, len(x)

    def evaluate(self, indices):
        return self.x[np.asarray(indices)].mean(axis=1)


def first_reward_mean(ds, pi_e, pi_b):
    return float(np.mean([t.rewards[0] for t in ds]))


class TestConfig:
    def test_order_index(self):
        assert BootstrapConfig(2000, 0.05).order_index == 100

    def test_invalid(self):
        with pytest.raises(ConfigError):
            BootstrapConfig(10, 0.05)
        with pytest.raises(ConfigError):
            BootstrapConfig(100, 1.5)
        with pytest.raises(ConfigError):
            BootstrapConfig(100, 0.05, method="studentized")
        with pytest.raises(ConfigError):
            BootstrapConfig(100, 0.05, workers=0)


class TestResampling:
    def test_single(self):
        assert resample_indices(1, np.random.default_rng(0)).tolist() == [0]

    def test_frequencies(self):
        idx = np.concatenate([resample_indices(10, np.random.default_rng(s)) for s in range(1000)])
        freq = np.bincount(idx, minlength=10) / idx.size
        assert np.all(np.abs(freq - 0.1) <= 0.02)

    def test_same_seed(self):
        a = resample_indices(50, np.random.default_rng(9))
        b = resample_indices(50, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_streams_are_per_resample(self):
        whole = resample_matrix(7, 0, 20, seed=4)
        part = resample_matrix(7, 13, 20, seed=4)
        assert np.array_equal(whole[13:], part)


class TestPercentile:
    def test_identical_trajectories(self):
        ds = scalar_dataset([0.25] * 10)
        rep = percentile_lower_bound(ds, SampleMean(), None, None, BootstrapConfig(200, 0.05))
        assert rep.lower_bound == rep.point_estimate == 0.25

    def test_is_exact_order_statistic(self):
        ds = scalar_dataset(np.random.default_rng(1).normal(size=15))
        cfg = BootstrapConfig(400, 0.05, keep_estimates=True)
        rep = percentile_lower_bound(ds, SampleMean(), None, None, cfg)
        x = np.array([t.rewards[0] for t in ds])
        manual = np.sort(x[resample_matrix(15, 0, 400, 0)].mean(axis=1))
        assert rep.order_index == 20
        assert rep.lower_bound == manual[19]
        assert rep.estimates == manual.tolist()
        assert rep.lower_bound <= max(rep.estimates)

    def test_function_estimator_agrees_with_vectorised(self):
        ds = scalar_dataset(np.random.default_rng(2).exponential(size=12))
        cfg = BootstrapConfig(100, 0.1)
        a = percentile_lower_bound(ds, SampleMean(), None, None, cfg)
        b = percentile_lower_bound(ds, first_reward_mean, None, None, cfg)
        assert a.lower_bound == pytest.approx(b.lower_bound, abs=1e-15)

    def test_constant_estimator(self):
        ds = scalar_dataset(np.arange(8))
        rep = percentile_lower_bound(ds, lambda d, e, b: 4.25, None, None, BootstrapConfig(100, 0.05))
        assert rep.lower_bound == 4.25

    def test_deterministic_report(self):
        mdp, pe, pb = micro_mdp(2)
        ds = sample_dataset(mdp, pb, 30, np.random.default_rng(0))
        est = ImportanceEstimator("pdwis", mdp.spec)
        cfg = BootstrapConfig(500, 0.05, seed=11)
        a = percentile_lower_bound(ds, est, pe, pb, cfg).to_text()
        b = percentile_lower_bound(ds, est, pe, pb, cfg).to_text()
        c = percentile_lower_bound(ds, est, pe, pb, BootstrapConfig(500, 0.05, seed=11, workers=4)).to_text()
        assert a == b == c

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
    def test_monotone_in_delta(self, seed, d1, d2):
        ds = scalar_dataset(np.random.default_rng(seed).normal(size=9))
        lo, hi = sorted((d1, d2))
        a = percentile_lower_bound(ds, SampleMean(), None, None, BootstrapConfig(200, lo))
        b = percentile_lower_bound(ds, SampleMean(), None, None, BootstrapConfig(200, hi))
        assert a.lower_bound <= b.lower_bound

    def test_failure_abort(self):
        ds = scalar_dataset(np.arange(10))

        def flaky(d, e, b):
            if min(t.rewards[0] for t in d) > 0:
                raise ArithmeticError("undefined")
            return 0.0
        with pytest.raises(NumericFailure, match="failed on"):
            percentile_lower_bound(ds, flaky, None, None, BootstrapConfig(200, 0.05))

    def test_too_few_trajectories(self):
        with pytest.raises(ConfigError):
            percentile_lower_bound(scalar_dataset([1.0]), SampleMean(), None, None, BootstrapConfig(100, 0.05))

    def test_report_serialisation(self):
        ds = scalar_dataset([0.1, 0.5, 0.9])
        rep = lower_bound(ds, SampleMean(), None, None, BootstrapConfig(100, 0.05))
        d = json.loads(rep.to_json())
        assert d["lower_bound"] == rep.lower_bound and d["B"] == 100
        assert "delta: 0.05\n" in rep.to_text()


def bca_reference(x, stat_values, delta):
    """Textbook BCa lower level, written out independently."""
    point = x.mean()
    z0 = stats.norm.ppf(np.mean(stat_values < point) + 0.5 * np.mean(stat_values == point))
    jk = np.array([np.delete(x, i).mean() for i in range(len(x))])
    u = jk.mean() - jk
    a = (u ** 3).sum() / (6 * (u ** 2).sum() ** 1.5)
    zd = stats.norm.ppf(delta)
    return stats.norm.cdf(z0 + (z0 + zd) / (1 - a * (z0 + zd)))


class TestBCa:
    def test_level_without_correction(self):
        est = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
        jk = np.array([-1.0, 0.0, 1.0])
        level, reason = bca_level(0.0, est, jk, 0.05)
        assert reason is None and level == pytest.approx(0.05, abs=1e-15)

    def test_symmetric_case_equals_percentile(self):
        x = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
        ds = scalar_dataset(x)
        cfg = BootstrapConfig(1000, 0.05, method="bca")
        # symmetric data: a = 0 exactly; z0 is zero only up to resampling noise
        rep = bca_lower_bound(ds, SampleMean(), None, None, cfg)
        per = percentile_lower_bound(ds, SampleMean(), None, None, cfg)
        assert abs(rep.diagnostics["bca_level"] - 0.05) < 0.02
        assert rep.lower_bound == pytest.approx(per.lower_bound, abs=0.35)

    def test_level_matches_textbook(self):
        x = np.random.default_rng(3).lognormal(size=25)
        cfg = BootstrapConfig(4000, 0.05, method="bca", keep_estimates=True)
        rep = bca_lower_bound(scalar_dataset(x), SampleMean(), None, None, cfg)
        expected = bca_reference(x, np.array(rep.estimates), 0.05)
        assert rep.diagnostics["bca_level"] == pytest.approx(expected, abs=1e-12)

    def test_right_skew_matches_scipy_and_dominates_percentile(self):
        x = np.random.default_rng(4).lognormal(sigma=1.0, size=40)
        ds = scalar_dataset(x)
        cfg = BootstrapConfig(20000, 0.05, method="bca")
        rep = bca_lower_bound(ds, SampleMean(), None, None, cfg)
        per = percentile_lower_bound(ds, SampleMean(), None, None, BootstrapConfig(20000, 0.05))
        ref = stats.bootstrap((x,), np.mean, n_resamples=20000, confidence_level=0.95, alternative="greater",
                              method="BCa", rng=np.random.default_rng(5)).confidence_interval.low
        assert rep.method == "bca"
        assert rep.lower_bound >= per.lower_bound
        # both are Monte Carlo; compare within a few resampling standard errors
        se = x.std(ddof=1) / np.sqrt(len(x))
        assert abs(rep.lower_bound - ref) <= 0.05 * se

    def test_two_trajectories_fall_back(self):
        ds = scalar_dataset([0.0, 1.0])
        with pytest.warns(RuntimeWarning, match="BCa unavailable"):
            rep = bca_lower_bound(ds, SampleMean(), None, None, BootstrapConfig(100, 0.05, method="bca"))
        assert rep.method == "percentile" and rep.warnings

    def test_degenerate_jackknife_falls_back(self):
        ds = scalar_dataset([1.0, 1.0, 1.0, 1.0])
        with pytest.warns(RuntimeWarning):
            rep = bca_lower_bound(ds, SampleMean(), None, None, BootstrapConfig(100, 0.05, method="bca"))
        assert rep.lower_bound == 1.0 and rep.method == "percentile"


def test_coverage_on_micro_mdp():
    mdp, pe, pb = micro_mdp(2)
    truth = dp_value(mdp.P, mdp.r, mdp.d0, pe.probs, mdp.spec.horizon, mdp.spec.gamma)
    est = ImportanceEstimator("pdis", mdp.spec)
    rng = np.random.default_rng(2024)
    cfg = BootstrapConfig(200, 0.05)
    errors = 0
    for trial in range(500):
        ds = sample_dataset(mdp, pb, 30, rng)
        rep = percentile_lower_bound(ds, est, pe, pb, BootstrapConfig(200, 0.05, seed=trial))
        errors += rep.lower_bound > truth
    assert cfg.order_index == 10
    assert errors / 500 <= 0.10
