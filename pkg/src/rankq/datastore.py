"""Trajectories, the offline dataset with its success/failure split, replay
buffers, and mixed offline/online batch sampling."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

O2O_MAGIC = b"O2O\x00"
O2O_VERSION = 1
POOLED = -1.0


class DatasetError(ValueError):
    pass


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    terminated: bool
    truncated: bool


def return_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """G_t = sum_{k>=t} gamma^(k-t) r_k."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


class Trajectory:
    """Ordered steps of one episode stored column-wise."""

    def __init__(self, obs, actions, rewards, next_obs, terminated, truncated):
        self.obs = np.asarray(obs, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.float64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.next_obs = np.asarray(next_obs, dtype=np.float64)
        self.terminated = np.asarray(terminated, dtype=bool)
        self.truncated = np.asarray(truncated, dtype=bool)
        n = len(self.rewards)
        if not (len(self.obs) == len(self.actions) == len(self.next_obs) == len(self.terminated)
                == len(self.truncated) == n):
            raise DatasetError("trajectory columns have different lengths")
        if n and np.any(np.abs(self.actions) > 1.0):
            raise DatasetError("actions must lie in [-1, 1]")
        if np.any((self.rewards != 0.0) & (self.rewards != 1.0)):
            raise DatasetError("rewards must be 0 or 1")

    @classmethod
    def from_transitions(cls, steps: Iterable[Transition]) -> "Trajectory":
        steps = list(steps)
        return cls([t.s for t in steps], [t.a for t in steps], [t.r for t in steps],
                   [t.s2 for t in steps], [t.terminated for t in steps], [t.truncated for t in steps])

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def success(self) -> bool:
        return bool(np.any(self.rewards > 0))

    def transitions(self):
        for i in range(len(self)):
            yield Transition(self.obs[i], self.actions[i], float(self.rewards[i]), self.next_obs[i],
                             bool(self.terminated[i]), bool(self.truncated[i]))

    def return_to_go(self, gamma: float) -> np.ndarray:
        return return_to_go(self.rewards, gamma)


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    success: np.ndarray
    rtg: np.ndarray
    offline: np.ndarray
    fallback: bool = False

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def concat(cls, parts: Sequence["Batch"]) -> "Batch":
        fields = ("obs", "actions", "rewards", "next_obs", "terminated", "truncated", "success",
                  "rtg", "offline")
        return cls(*[np.concatenate([getattr(p, f) for p in parts]) for f in fields],
                   fallback=any(p.fallback for p in parts))


_COLUMNS = ("obs", "actions", "rewards", "next_obs", "terminated", "truncated", "success", "rtg")


def _flatten(trajs: Sequence[Trajectory], gamma: float) -> dict[str, np.ndarray]:
    cols = {
        "obs": np.concatenate([t.obs for t in trajs]),
        "actions": np.concatenate([t.actions for t in trajs]),
        "rewards": np.concatenate([t.rewards for t in trajs]),
        "next_obs": np.concatenate([t.next_obs for t in trajs]),
        "terminated": np.concatenate([t.terminated for t in trajs]),
        "truncated": np.concatenate([t.truncated for t in trajs]),
        "success": np.concatenate([np.full(len(t), t.success) for t in trajs]),
        "rtg": np.concatenate([t.return_to_go(gamma) for t in trajs]),
    }
    return cols


class OfflineDataset:
    """All trajectories flattened to transition rows, with the success/failure split.

    Return-to-go is computed once here and never changes afterwards.
    """

    def __init__(self, trajectories: Sequence[Trajectory], gamma: float = 0.99):
        trajectories = [t for t in trajectories if len(t)]
        if not trajectories:
            raise DatasetError("dataset is empty")
        self.trajectories = list(trajectories)
        self.gamma = float(gamma)
        cols = _flatten(self.trajectories, self.gamma)
        for k, v in cols.items():
            setattr(self, k, v)
        self.traj_id = np.concatenate([np.full(len(t), i) for i, t in enumerate(self.trajectories)])
        self.success_idx, self.failure_idx = partition(self)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def rows(self, idx: np.ndarray, offline: bool = True) -> Batch:
        return Batch(*[getattr(self, c)[idx] for c in _COLUMNS], offline=np.full(len(idx), offline))

    def split(self, holdout_fraction: float, rng: np.random.Generator):
        """Trajectory-level split into (train, heldout) datasets."""
        order = rng.permutation(len(self.trajectories))
        n_hold = max(1, int(round(holdout_fraction * len(order))))
        hold = [self.trajectories[i] for i in sorted(order[:n_hold])]
        train = [self.trajectories[i] for i in sorted(order[n_hold:])]
        return OfflineDataset(train, self.gamma), OfflineDataset(hold, self.gamma)

    def summary(self) -> dict:
        return {
            "episodes": len(self.trajectories),
            "transitions": len(self),
            "success_episodes": int(sum(t.success for t in self.trajectories)),
            "success_fraction": float(np.mean([t.success for t in self.trajectories])),
            "success_transition_fraction": len(self.success_idx) / len(self),
        }


def partition(dataset: OfflineDataset) -> tuple[np.ndarray, np.ndarray]:
    """Transition-level index sets (D_success, D_failure), in dataset order."""
    if len(dataset) == 0:
        raise DatasetError("dataset is empty")
    succ = np.asarray(dataset.success, dtype=bool)
    return np.flatnonzero(succ), np.flatnonzero(~succ)


class ReplayBuffer:
    """Fixed-capacity ring buffer of transition rows; the oldest rows are evicted first."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.data = {
            "obs": np.zeros((capacity, obs_dim)),
            "actions": np.zeros((capacity, action_dim)),
            "rewards": np.zeros(capacity),
            "next_obs": np.zeros((capacity, obs_dim)),
            "terminated": np.zeros(capacity, dtype=bool),
            "truncated": np.zeros(capacity, dtype=bool),
            "success": np.zeros(capacity, dtype=bool),
            "rtg": np.zeros(capacity),
            "offline": np.zeros(capacity, dtype=bool),
        }
        self.ptr = 0
        self.size = 0
        self.inserted = 0

    def __len__(self) -> int:
        return self.size

    def add_rows(self, rows: dict[str, np.ndarray], offline: bool) -> None:
        n = len(rows["rewards"])
        if n > self.capacity:
            rows = {k: v[-self.capacity:] for k, v in rows.items()}
            n = self.capacity
        idx = (self.ptr + np.arange(n)) % self.capacity
        for k in _COLUMNS:
            self.data[k][idx] = rows[k]
        self.data["offline"][idx] = offline
        self.ptr = (self.ptr + n) % self.capacity
        self.size = min(self.size + n, self.capacity)
        self.inserted += n

    def add_trajectory(self, traj: Trajectory, gamma: float, offline: bool = False) -> None:
        self.add_rows(_flatten([traj], gamma), offline)

    def add_dataset(self, ds: OfflineDataset) -> None:
        self.add_rows({c: getattr(ds, c) for c in _COLUMNS}, offline=True)

    def ordered(self, key: str) -> np.ndarray:
        """Column in insertion order, oldest first."""
        if self.size < self.capacity:
            return self.data[key][:self.size]
        return np.roll(self.data[key], -self.ptr, axis=0)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise DatasetError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        d = self.data
        return Batch(*[d[c][idx] for c in _COLUMNS], offline=d["offline"][idx])


def offline_rows(mixing_ratio: float, batch_size: int) -> int:
    return int(math.ceil(round(mixing_ratio * batch_size, 9)))


class MixedSampler:
    """Draws batches from an offline dataset and an online buffer.

    ``mixing_ratio`` in [0, 1] keeps the stores separate and takes ceil(ratio*B)
    offline rows per batch. ``-1`` pools: offline rows seed one ring buffer and
    online rows are appended to it, evicting oldest-first regardless of origin.
    """

    def __init__(self, dataset: OfflineDataset | None, capacity: int, mixing_ratio: float,
                 obs_dim: int | None = None, action_dim: int | None = None):
        if not (mixing_ratio == POOLED or 0.0 <= mixing_ratio <= 1.0):
            raise ValueError(f"mixing ratio must be -1 or in [0, 1], got {mixing_ratio}")
        if dataset is None and (obs_dim is None or action_dim is None):
            raise ValueError("dims are required without an offline dataset")
        self.dataset = dataset
        self.mixing_ratio = float(mixing_ratio)
        obs_dim = dataset.obs_dim if dataset is not None else obs_dim
        action_dim = dataset.action_dim if dataset is not None else action_dim
        self.online = ReplayBuffer(capacity, obs_dim, action_dim)
        if self.pooled and dataset is not None:
            self.online.add_dataset(dataset)

    @property
    def pooled(self) -> bool:
        return self.mixing_ratio == POOLED

    def add_trajectory(self, traj: Trajectory, gamma: float) -> None:
        self.online.add_trajectory(traj, gamma, offline=False)

    def sample_offline(self, n: int, rng: np.random.Generator) -> Batch:
        if self.dataset is None:
            raise DatasetError("no offline dataset")
        return self.dataset.rows(rng.integers(0, len(self.dataset), size=n))

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.pooled:
            return self.online.sample(batch_size, rng)
        return _split_sample(self, offline_rows(self.mixing_ratio, batch_size), batch_size, rng)


def _split_sample(sampler: MixedSampler, n_off: int, batch_size: int, rng) -> Batch:
    has_online = len(sampler.online) > 0
    if sampler.dataset is None:
        return sampler.online.sample(batch_size, rng)
    if not has_online:
        b = sampler.sample_offline(batch_size, rng)
        b.fallback = n_off < batch_size
        return b
    parts = []
    if n_off:
        parts.append(sampler.sample_offline(n_off, rng))
    if batch_size - n_off:
        parts.append(sampler.online.sample(batch_size - n_off, rng))
    return Batch.concat(parts)


def hybrid_sample(sampler: MixedSampler, batch_size: int, rng: np.random.Generator) -> Batch:
    """Even offline/online split with the stores kept separate."""
    if sampler.pooled:
        raise ValueError("hybrid sampling needs separate stores")
    return _split_sample(sampler, offline_rows(0.5, batch_size), batch_size, rng)


# ---- .o2o files ---------------------------------------------------------------
# header: 4s magic, uint32 version, float64 gamma, uint32 obs_dim, uint32 action_dim,
#         uint32 n_trajectories, uint64 n_transitions
# then per trajectory: uint32 length, uint8 success, followed by `length` records
#         (obs f8[obs_dim], action f8[action_dim], reward f8, next_obs f8[obs_dim],
#          terminated u1, truncated u1), all little-endian.

_HEADER = struct.Struct("<4sIdIIIQ")
_TRAJ_HEADER = struct.Struct("<IB")


def _record_dtype(obs_dim: int, action_dim: int) -> np.dtype:
    return np.dtype([("obs", "<f8", (obs_dim,)), ("action", "<f8", (action_dim,)), ("reward", "<f8"),
                     ("next_obs", "<f8", (obs_dim,)), ("terminated", "u1"), ("truncated", "u1")])


def save_dataset(path: str | Path, ds: OfflineDataset) -> None:
    dt = _record_dtype(ds.obs_dim, ds.action_dim)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(O2O_MAGIC, O2O_VERSION, ds.gamma, ds.obs_dim, ds.action_dim,
                             len(ds.trajectories), len(ds)))
        for t in ds.trajectories:
            f.write(_TRAJ_HEADER.pack(len(t), int(t.success)))
            rec = np.zeros(len(t), dtype=dt)
            rec["obs"], rec["action"], rec["reward"] = t.obs, t.actions, t.rewards
            rec["next_obs"], rec["terminated"], rec["truncated"] = t.next_obs, t.terminated, t.truncated
            f.write(rec.tobytes())


def load_dataset(path: str | Path) -> OfflineDataset:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, gamma, obs_dim, action_dim, n_traj, n_rows = _HEADER.unpack_from(raw, 0)
    if magic != O2O_MAGIC:
        raise DatasetError(f"{path}: not an .o2o dataset")
    if version != O2O_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    dt = _record_dtype(obs_dim, action_dim)
    off = _HEADER.size
    trajs = []
    for _ in range(n_traj):
        length, success = _TRAJ_HEADER.unpack_from(raw, off)
        off += _TRAJ_HEADER.size
        rec = np.frombuffer(raw, dtype=dt, count=length, offset=off)
        off += length * dt.itemsize
        t = Trajectory(rec["obs"], rec["action"], rec["reward"], rec["next_obs"],
                       rec["terminated"].astype(bool), rec["truncated"].astype(bool))
        if t.success != bool(success):
            raise DatasetError(f"{path}: success flag disagrees with rewards")
        trajs.append(t)
    ds = OfflineDataset(trajs, gamma)
    if len(ds) != n_rows:
        raise DatasetError(f"{path}: transition count mismatch")
    return ds


def export_csv(ds: OfflineDataset, path: str | Path) -> None:
    """One row per transition with trajectory id, step index and success flag."""
    so = [f"s_{i}" for i in range(ds.obs_dim)]
    ac = [f"a_{i}" for i in range(ds.action_dim)]
    s2 = [f"s2_{i}" for i in range(ds.obs_dim)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["traj_id", "step", "success", *so, *ac, "reward", *s2, "terminated", "truncated", "rtg"])
        step = 0
        for i in range(len(ds)):
            step = 0 if i == 0 or ds.traj_id[i] != ds.traj_id[i - 1] else step + 1
            w.writerow([int(ds.traj_id[i]), step, int(ds.success[i]), *map(repr, ds.obs[i].tolist()),
                        *map(repr, ds.actions[i].tolist()), repr(float(ds.rewards[i])),
                        *map(repr, ds.next_obs[i].tolist()), int(ds.terminated[i]),
                        int(ds.truncated[i]), repr(float(ds.rtg[i]))])
