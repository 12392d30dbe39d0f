import numpy as np
import pytest

from rankq.datastore import OfflineDataset, Trajectory


def make_traj(length, success, obs_dim=4, action_dim=2, seed=0, truncated=None):
    """Synthetic episode: reward 1 on the last step iff ``success``; timeouts are truncated."""
    rng = np.random.default_rng(seed)
    obs = rng.uniform(-1, 1, size=(length + 1, obs_dim))
    rewards = np.zeros(length)
    term = np.zeros(length, dtype=bool)
    trunc = np.zeros(length, dtype=bool)
    if success:
        rewards[-1] = 1.0
        term[-1] = True
    elif truncated is not False:
        trunc[-1] = True
    return Trajectory(obs[:-1], rng.uniform(-1, 1, size=(length, action_dim)), rewards, obs[1:], term, trunc)


@pytest.fixture
def small_dataset():
    return OfflineDataset([make_traj(3, True, seed=1), make_traj(5, False, seed=2)], gamma=0.99)
