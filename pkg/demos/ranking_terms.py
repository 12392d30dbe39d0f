"""Walk through the ranking terms on a single success row and a single failure row.

    python3 demos/ranking_terms.py
"""
import numpy as np

from rankq.critics import CriticObjectiveConfig, make_negatives, rank_fn, rank_term

cfg = CriticObjectiveConfig(kind="rankq")

# negatives for a small batch: noisy and very noisy share one draw of noise
actions = np.array([[0.2, -0.4], [0.9, 0.1], [-0.5, 0.5]])
neg = make_negatives(actions, cfg.sigma, np.random.default_rng(0))
print("dataset actions\n", actions)
print("noisy\n", neg.noisy.round(3))
print("very noisy (same noise, doubled)\n", neg.very_noisy.round(3))
print("permuted (batch shifted by one)\n", neg.permuted)

# pairwise term: small when the first Q is well above the second
for gap in (-2.0, 0.0, 2.0, 6.0):
    print(f"rank_fn(Q1 - Q2 = {gap:+.0f}) = {rank_fn(gap, 0.0):.4f}")

q = {k: np.array([v]) for k, v in dict(a=2.0, noisy=1.0, very_noisy=0.5, random=-1.0, permuted=0.0).items()}
val, dq, parts = rank_term(q, np.array([True]), cfg)
print("success row terms", {k: round(v, 4) for k, v in parts.items()}, "total", round(val, 4))
print("dL/dQ per action", {k: round(float(v[0]), 4) for k, v in dq.items()})

val, _, parts = rank_term(q, np.array([False]), cfg)
print("same Q on a failure row: only the random action must score below the dataset action ->", round(val, 4))
