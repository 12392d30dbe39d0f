"""Offline pretraining then online fine-tuning on the medium point maze.

    python3 demos/maze_offline_to_online.py [algorithm ...]

Uses a small network and budget so a run takes a minute or two on one core.
Prints evaluation success and mean episode length at each checkpoint.
"""
import sys

from rankq.datastore import OfflineDataset
from rankq.envs import ScriptedCollector, collect_trajectories, make_maze
from rankq.trainer import TrainConfig, train

algorithms = sys.argv[1:] or ["rankq", "cql_sac", "sac"]
env = make_maze("medium")
data = OfflineDataset(collect_trajectories(env, ScriptedCollector("play"), 200, seed=1))
print(data.summary())

for algo in algorithms:
    cfg = TrainConfig(algorithm=algo, hidden="64,64", batch_size=128, offline_steps=1000, online_env_steps=1500,
                      eval_every=500, offline_eval_every=500)
    rec = train(cfg, data, env).record
    curve = "  ".join(f"{r['phase'][:3]}@{r['step']}: {r['success_rate']:.2f}/{r['avg_length']:.0f}"
                      for r in rec.rows)
    print(f"{algo:10s} {curve}")
