"""Trajectories, datasets, returns and reward normalization.

States and actions are plain numpy values: discrete ones are integer
indices, continuous ones are float vectors of fixed dimension. A
:class:`Trajectory` stores them as stacked arrays so that estimators can
work on whole datasets at once through :meth:`Dataset.pack`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DatasetFormatError, NumericFailure

SCHEMA = "hcope-dataset/1"


class Step(NamedTuple):
    state: object
    action: object
    reward: float


@dataclass(frozen=True)
class MdpSpec:
    """Horizon, discount and per-step reward range of an episodic MDP."""

    gamma: float
    horizon: int
    r_min: float
    r_max: float

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigError(f"horizon must be a positive integer, got {self.horizon}")
        if not (math.isfinite(self.r_min) and math.isfinite(self.r_max)):
            raise ConfigError("reward bounds must be finite")
        if self.r_min > self.r_max:
            raise ConfigError(f"r_min {self.r_min} exceeds r_max {self.r_max}")

    @property
    def discounts(self) -> np.ndarray:
        return self.gamma ** np.arange(self.horizon, dtype=float)

    @property
    def discount_mass(self) -> float:
        return float(self.discounts.sum())

    @property
    def reward_range(self) -> float:
        return self.r_max - self.r_min

    @property
    def g_min(self) -> float:
        return self.r_min * self.discount_mass

    @property
    def g_max(self) -> float:
        return self.r_max * self.discount_mass

    @property
    def shifted_return_max(self) -> float:
        """Largest return once rewards are shifted to start at zero (L * r_max)."""
        return self.horizon * self.reward_range

    def normalize_reward(self, r):
        if self.reward_range == 0:
            raise NumericFailure("degenerate reward range")
        return (np.asarray(r, dtype=float) - self.r_min) / self.reward_range


def trajectory_return(traj: "Trajectory", gamma: float) -> float:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    disc = gamma ** np.arange(len(traj), dtype=float)
    return float(np.dot(disc, traj.rewards))


def normalize_return(g, spec: MdpSpec):
    """Map a raw return onto [0, 1] using the spec's achievable range."""
    span = spec.g_max - spec.g_min
    if span == 0:
        raise NumericFailure("degenerate reward range")
    return (g - spec.g_min) / span


def denormalize_return(x, spec: MdpSpec):
    span = spec.g_max - spec.g_min
    if span == 0:
        raise NumericFailure("degenerate reward range")
    return spec.g_min + x * span


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A temporally ordered run of (state, action, reward) steps.

    ``terminal`` is true when the episode ended in an absorbing state before
    the horizon; the terminal state's own step is the last one recorded.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        states = np.asarray(self.states)
        actions = np.asarray(self.actions)
        rewards = np.asarray(self.rewards, dtype=float)
        if states.dtype.kind in "iub":
            states = states.astype(np.int64)
        else:
            states = states.astype(float)
        if actions.dtype.kind in "iub":
            actions = actions.astype(np.int64)
        else:
            actions = actions.astype(float)
        if rewards.ndim != 1:
            raise ValueError("rewards must be one-dimensional")
        T = rewards.shape[0]
        if states.shape[:1] != (T,) or actions.shape[:1] != (T,):
            raise ValueError("states, actions and rewards must have equal length")
        if states.ndim > 2 or actions.ndim > 2:
            raise ValueError("states and actions must be scalars or vectors per step")
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        if states.dtype.kind == "f" and not np.all(np.isfinite(states)):
            raise ValueError("continuous states must be finite")
        if actions.dtype.kind == "f" and not np.all(np.isfinite(actions)):
            raise ValueError("continuous actions must be finite")
        if states.dtype.kind == "i" and np.any(states < 0):
            raise ValueError("discrete state indices must be non-negative")
        if actions.dtype.kind == "i" and np.any(actions < 0):
            raise ValueError("discrete action indices must be non-negative")
        object.__setattr__(self, "states", _frozen(states))
        object.__setattr__(self, "actions", _frozen(actions))
        object.__setattr__(self, "rewards", _frozen(rewards))
        object.__setattr__(self, "terminal", bool(self.terminal))

    @classmethod
    def from_steps(cls, steps: Sequence[Step], terminal: bool = False) -> "Trajectory":
        if not steps:
            raise ValueError("empty trajectory")
        s, a, r = zip(*steps)
        return cls(np.array(s), np.array(a), np.array(r, dtype=float), terminal)

    def __len__(self):
        return int(self.rewards.shape[0])

    def __iter__(self) -> Iterator[Step]:
        for s, a, r in zip(self.states, self.actions, self.rewards):
            yield Step(s, a, float(r))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.terminal == other.terminal
            and _same(self.states, other.states)
            and _same(self.actions, other.actions)
            and _same(self.rewards, other.rewards)
        )

    __hash__ = None

    @property
    def discrete(self) -> bool:
        return self.states.dtype.kind == "i"


def _same(a, b):
    return a.dtype.kind == b.dtype.kind and a.shape == b.shape and np.array_equal(a, b)


@dataclass(frozen=True)
class Packed:
    """Dataset arrays padded to the horizon.

    Past a trajectory's last recorded step the state and action repeat the
    final recorded ones, the raw reward is 0 and ``valid`` is False.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    valid: np.ndarray
    lengths: np.ndarray
    terminal: np.ndarray

    @property
    def n(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.rewards.shape[1])


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple = ()
    behavior_policy_id: str = ""
    env_id: str = ""
    _packs: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        for t in self.trajectories:
            if not isinstance(t, Trajectory):
                raise TypeError("dataset entries must be Trajectory instances")
            if len(t) == 0:
                raise ValueError("empty trajectory")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def subset(self, indices) -> "Dataset":
        return Dataset(
            tuple(self.trajectories[int(i)] for i in indices),
            self.behavior_policy_id,
            self.env_id,
        )

    def pack(self, horizon: int) -> Packed:
        if horizon in self._packs:
            return self._packs[horizon]
        if not self.trajectories:
            raise ValueError("cannot pack an empty dataset")
        n = len(self.trajectories)
        lengths = np.array([len(t) for t in self.trajectories])
        if lengths.max() > horizon:
            raise ValueError(f"trajectory longer than horizon {horizon}")
        first = self.trajectories[0]
        s_shape = first.states.shape[1:]
        a_shape = first.actions.shape[1:]
        states = np.empty((n, horizon) + s_shape, dtype=first.states.dtype)
        actions = np.empty((n, horizon) + a_shape, dtype=first.actions.dtype)
        rewards = np.zeros((n, horizon))
        valid = np.zeros((n, horizon), dtype=bool)
        for i, t in enumerate(self.trajectories):
            T = len(t)
            if t.states.shape[1:] != s_shape or t.actions.shape[1:] != a_shape:
                raise ValueError("trajectories disagree on state or action shape")
            states[i, :T] = t.states
            states[i, T:] = t.states[-1]
            actions[i, :T] = t.actions
            actions[i, T:] = t.actions[-1]
            rewards[i, :T] = t.rewards
            valid[i, :T] = True
        packed = Packed(
            states, actions, rewards, valid, lengths,
            np.array([t.terminal for t in self.trajectories]),
        )
        for arr in (packed.states, packed.actions, packed.rewards, packed.valid):
            arr.setflags(write=False)
        self._packs[horizon] = packed
        return packed


# -- persistence ------------------------------------------------------------

def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _arr(a: np.ndarray) -> str:
    return "[" + ",".join(_num(x) for x in a.ravel().tolist()) + "]"


def _record(t: Trajectory, ds: Dataset) -> str:
    s_dim = 0 if t.states.ndim == 1 else t.states.shape[1]
    a_dim = 0 if t.actions.ndim == 1 else t.actions.shape[1]
    head = json.dumps({
        "env_id": ds.env_id,
        "behavior_policy_id": ds.behavior_policy_id,
        "terminal": t.terminal,
        "length": len(t),
        "state_dim": s_dim,
        "action_dim": a_dim,
        "state_kind": "discrete" if t.states.dtype.kind == "i" else "continuous",
        "action_kind": "discrete" if t.actions.dtype.kind == "i" else "continuous",
    })
    return (
        head[:-1]
        + f', "states": {_arr(t.states)}, "actions": {_arr(t.actions)}, "rewards": {_arr(t.rewards)}}}'
    )


def save_dataset(ds: Dataset, path) -> None:
    """Write one JSON header line then one JSON record per trajectory."""
    header = json.dumps({
        "schema": SCHEMA,
        "env_id": ds.env_id,
        "behavior_policy_id": ds.behavior_policy_id,
        "count": len(ds),
    })
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for t in ds.trajectories:
            fh.write(_record(t, ds) + "\n")


def _parse_array(values, kind, dim, length, lineno, name):
    if not isinstance(values, list):
        raise DatasetFormatError(lineno, f"{name} must be an array")
    width = max(dim, 1)
    if len(values) != length * width:
        raise DatasetFormatError(lineno, f"{name} has {len(values)} entries, expected {length * width}")
    if kind == "discrete":
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
            raise DatasetFormatError(lineno, f"{name} must hold integers")
        arr = np.array(values, dtype=np.int64)
    else:
        arr = np.array(values, dtype=float)
    return arr.reshape(length, dim) if dim else arr


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(1, "missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(1, f"malformed header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        raise DatasetFormatError(1, f"unsupported schema, expected {SCHEMA}")
    env_id = header.get("env_id", "")
    policy_id = header.get("behavior_policy_id", "")
    trajs = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(lineno, f"malformed record: {exc.msg}") from None
        try:
            length = rec["length"]
            if not isinstance(length, int) or length < 1:
                raise DatasetFormatError(lineno, "length must be a positive integer")
            if rec["env_id"] != env_id or rec["behavior_policy_id"] != policy_id:
                raise DatasetFormatError(lineno, "record ids disagree with header")
            states = _parse_array(rec["states"], rec["state_kind"], rec["state_dim"], length, lineno, "states")
            actions = _parse_array(rec["actions"], rec["action_kind"], rec["action_dim"], length, lineno, "actions")
            rewards = _parse_array(rec["rewards"], "continuous", 0, length, lineno, "rewards")
            trajs.append(Trajectory(states, actions, rewards, bool(rec["terminal"])))
        except KeyError as exc:
            raise DatasetFormatError(lineno, f"missing field {exc.args[0]}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DatasetFormatError):
                raise
            raise DatasetFormatError(lineno, str(exc)) from None
    if "count" in header and header["count"] != len(trajs):
        raise DatasetFormatError(len(lines) + 1, f"expected {header['count']} records, found {len(trajs)}")
    return Dataset(tuple(trajs), policy_id, env_id)
