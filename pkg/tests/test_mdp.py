import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcope.errors import ConfigError, DatasetFormatError, NumericFailure
from hcope.mdp import (
    Dataset,
    MdpSpec,
    Step,
    Trajectory,
    denormalize_return,
    load_dataset,
    normalize_return,
    save_dataset,
    trajectory_return,
)


def traj(rewards, states=None, actions=None, terminal=False):
    n = len(rewards)
    states = np.arange(n) if states is None else np.asarray(states)
    actions = np.zeros(n, dtype=np.int64) if actions is None else np.asarray(actions)
    return Trajectory(states, actions, np.asarray(rewards, dtype=float), terminal)


class TestReturn:
    def test_zero_rewards(self):
        assert trajectory_return(traj([0, 0, 0]), 0.7) == 0.0

    def test_undiscounted(self):
        assert trajectory_return(traj([1, 1, 1]), 1.0) == 3.0

    def test_discounted(self):
        assert trajectory_return(traj([1, 1, 1]), 0.5) == 1.75

    def test_empty_trajectory(self):
        empty = Trajectory(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
        with pytest.raises(ValueError, match="empty trajectory"):
            trajectory_return(empty, 1.0)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(-3, 3), st.floats(-3, 3),
           st.floats(0, 1))
    def test_linear_in_rewards(self, r, a, b, gamma):
        r = np.array(r)
        r2 = r[::-1].copy()
        mixed = trajectory_return(traj(a * r + b * r2), gamma)
        expected = a * trajectory_return(traj(r), gamma) + b * trajectory_return(traj(r2), gamma)
        assert mixed == pytest.approx(expected, abs=1e-9)


class TestNormalize:
    spec = MdpSpec(1.0, 100, -1.0, 0.0)

    def test_endpoints(self):
        assert normalize_return(self.spec.g_min, self.spec) == 0.0
        assert normalize_return(self.spec.g_max, self.spec) == 1.0

    def test_mountain_car_example(self):
        assert normalize_return(-35.0, self.spec) == pytest.approx(0.65, abs=1e-15)

    def test_degenerate(self):
        with pytest.raises(NumericFailure, match="degenerate reward range"):
            normalize_return(0.0, MdpSpec(1.0, 3, 1.0, 1.0))

    @given(st.floats(-100, 0), st.floats(-100, 0))
    def test_monotone_and_invertible(self, g1, g2):
        x1, x2 = normalize_return(g1, self.spec), normalize_return(g2, self.spec)
        if g1 <= g2:
            assert x1 <= x2
        if g2 - g1 > 1e-9:
            assert x1 < x2
        assert denormalize_return(x1, self.spec) == pytest.approx(g1, rel=1e-12, abs=1e-12)

    def test_discounted_range(self):
        spec = MdpSpec(0.5, 3, 0.0, 1.0)
        assert spec.g_max == pytest.approx(1.75)
        assert normalize_return(1.75, spec) == 1.0

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            MdpSpec(1.5, 3, 0, 1)
        with pytest.raises(ConfigError):
            MdpSpec(1.0, 0, 0, 1)
        with pytest.raises(ConfigError):
            MdpSpec(1.0, 3, 2, 1)


class TestTrajectory:
    def test_from_steps_and_iter(self):
        t = Trajectory.from_steps([Step(0, 1, 0.5), Step(2, 0, -1.0)], terminal=True)
        assert len(t) == 2
        assert list(t) == [Step(0, 1, 0.5), Step(2, 0, -1.0)]
        assert t.terminal and t.discrete

    def test_immutable(self):
        t = traj([1.0, 2.0])
        with pytest.raises(ValueError):
            t.rewards[0] = 5.0

    def test_pack_pads_after_termination(self):
        ds = Dataset((traj([1.0], states=[3]), traj([1.0, 2.0, 3.0])))
        p = ds.pack(3)
        assert p.rewards[0].tolist() == [1.0, 0.0, 0.0]
        assert p.states[0].tolist() == [3, 3, 3]
        assert p.valid[0].tolist() == [True, False, False]

    def test_pack_rejects_long(self):
        with pytest.raises(ValueError):
            Dataset((traj([1, 2, 3]),)).pack(2)


def random_dataset(draw_seed, n, continuous):
    rng = np.random.default_rng(draw_seed)
    out = []
    for _ in range(n):
        T = int(rng.integers(1, 6))
        if continuous:
            s = rng.standard_normal((T, 4)) * 1e3
            a = rng.standard_normal((T, 2))
        else:
            s = rng.integers(0, 50, T)
            a = rng.integers(0, 3, T)
        out.append(Trajectory(s, a, rng.standard_normal(T) / 3.0, bool(rng.integers(2))))
    return Dataset(tuple(out), "pb", "env-x")


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = random_dataset(0, 3, continuous=False)
        save_dataset(ds, tmp_path / "d.jsonl")
        back = load_dataset(tmp_path / "d.jsonl")
        assert back == ds
        assert back.env_id == "env-x" and back.behavior_policy_id == "pb"

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(0, 5), st.booleans())
    def test_round_trip_property(self, tmp_path_factory, seed, n, continuous):
        ds = random_dataset(seed, n, continuous)
        path = tmp_path_factory.mktemp("rt") / "d.jsonl"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert len(back) == len(ds)
        for a, b in zip(ds, back):
            assert np.array_equal(a.states, b.states) and a.states.dtype.kind == b.states.dtype.kind
            assert np.array_equal(a.actions, b.actions)
            assert np.array_equal(a.rewards, b.rewards)
            assert a.terminal == b.terminal

    def test_truncated_file(self, tmp_path):
        ds = random_dataset(1, 3, continuous=True)
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        text = path.read_text()
        path.write_text(text[: len(text) - 40])
        with pytest.raises(DatasetFormatError, match="line 4"):
            load_dataset(path)

    def test_empty_dataset(self, tmp_path):
        path = tmp_path / "e.jsonl"
        save_dataset(Dataset((), "pb", "env"), path)
        assert len(load_dataset(path)) == 0

    def test_bad_header(self, tmp_path):
        path = tmp_path / "h.jsonl"
        path.write_text('{"schema": "other"}\n')
        with pytest.raises(DatasetFormatError, match="line 1"):
            load_dataset(path)
