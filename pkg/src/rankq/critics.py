"""Twin Q-critics and the four critic objectives: TD, CQL, Cal-QL and RankQ.

Every objective is assembled from pure functions of Q-values (``*_term``),
so the value-level math can be tested on hand-set numbers and the
parameter-level gradients follow from one backward pass per twin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .datastore import Batch
from .ndmath import AdamState, GradBundle, Mlp, NonFiniteError, adam_step, logsumexp, polyak_average, \
    sigmoid, softmax, softplus

KINDS = ("td", "cql", "calql", "rankq")
ESTIMATORS = ("logsumexp", "mean-policy")
FAIL_PAIRS = ("random", "noisy")


class ConfigError(ValueError):
    pass


class BatchError(ValueError):
    pass


@dataclass
class CriticObjectiveConfig:
    kind: str = "td"
    alpha: float = 5.0
    use_lagrange: bool = False
    target_action_gap: float = 0.8
    lagrange_lr: float = 3e-4
    n_policy_actions: int = 10
    n_random_actions: int = 10
    cql_estimator: str = "logsumexp"
    cql_temp: float = 1.0
    alpha0: float = 1.0
    alpha1: float = 1.0
    sigma: float = 0.15
    double_sigma: bool = False
    no_permuted: bool = False
    no_chain: bool = False
    fail_pair: str = "random"
    gamma: float = 0.99

    def errors(self) -> list[str]:
        errs = []
        if self.kind not in KINDS:
            errs.append(f"kind must be one of {KINDS}, got {self.kind!r}")
        for name in ("alpha", "alpha0", "alpha1", "sigma", "cql_temp"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be > 0")
        if self.kind in ("cql", "calql") and (self.n_policy_actions < 1 or self.n_random_actions < 1):
            errs.append("n_policy_actions and n_random_actions must be >= 1")
        if self.cql_estimator not in ESTIMATORS:
            errs.append(f"cql_estimator must be one of {ESTIMATORS}")
        if self.fail_pair not in FAIL_PAIRS:
            errs.append(f"fail_pair must be one of {FAIL_PAIRS}")
        if not 0.0 <= self.gamma <= 1.0:
            errs.append("gamma must be in [0, 1]")
        return errs

    def validate(self) -> "CriticObjectiveConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    @property
    def effective_sigma(self) -> float:
        return 2.0 * self.sigma if self.double_sigma else self.sigma


class UniformPolicy:
    """Uniform actions on [-1, 1]^d; stands in for the actor in the toy regression."""

    def __init__(self, action_dim: int):
        self.action_dim = action_dim

    def sample(self, obs: np.ndarray, rng: np.random.Generator, record: bool = False):
        a = rng.uniform(-1.0, 1.0, size=(len(obs), self.action_dim))
        return a, np.full(len(obs), -self.action_dim * math.log(2.0))


class CriticPair:
    """Twin Q networks over ``concat(obs, action)`` with Polyak-averaged targets."""

    def __init__(self, obs_dim: int, action_dim: int, hidden=(256, 256, 256),
                 rng: np.random.Generator | None = None, tau: float = 0.005, activation: str = "relu"):
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [obs_dim + action_dim, *hidden, 1]
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.q = [Mlp(sizes, activation, rng), Mlp(sizes, activation, rng)]
        self.targets = [q.copy() for q in self.q]
        self.tau = tau
        self.extra_calls = 0

    def copy(self) -> "CriticPair":
        new = CriticPair.__new__(CriticPair)
        new.obs_dim, new.action_dim, new.tau, new.extra_calls = self.obs_dim, self.action_dim, self.tau, 0
        new.q = [q.copy() for q in self.q]
        new.targets = [t.copy() for t in self.targets]
        return new

    def evaluate(self, i: int, obs: np.ndarray, action_sets: list[np.ndarray], record: bool = True) -> np.ndarray:
        """Q_i for each action set at the same states, shape (len(action_sets), n). One forward pass."""
        k, n = len(action_sets), len(obs)
        x = np.concatenate([np.concatenate([obs, a], axis=1) for a in action_sets])
        return self.q[i].forward(x, record=record).reshape(k, n)

    def backward(self, i: int, dq: np.ndarray) -> GradBundle:
        return self.q[i].backward(dq.reshape(-1, 1))

    def q_min(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([obs, actions], axis=1)
        return np.minimum(self.q[0].forward(x, record=False), self.q[1].forward(x, record=False))[:, 0]

    def target_min(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([obs, actions], axis=1)
        return np.minimum(self.targets[0].forward(x, record=False),
                          self.targets[1].forward(x, record=False))[:, 0]


def polyak_update(critics: CriticPair, tau: float | None = None) -> None:
    tau = critics.tau if tau is None else tau
    for t, q in zip(critics.targets, critics.q):
        polyak_average(t, q, tau)


# ---- value-level terms --------------------------------------------------------------

def td_target(critics: CriticPair, batch: Batch, next_actions: np.ndarray, gamma: float) -> np.ndarray:
    """r + gamma * (1 - terminated) * min_j Qbar_j(s', a'). Truncation keeps the bootstrap."""
    boot = critics.target_min(batch.next_obs, next_actions)
    y = batch.rewards + gamma * (1.0 - batch.terminated) * boot
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("non-finite TD target")
    return y


def td_term(q: np.ndarray, y: np.ndarray):
    diff = q - y
    return 0.5 * float(np.mean(diff * diff)), diff / len(q)


def rank_fn(q_pos, q_neg):
    """Smooth hinge sp(Q_neg - Q_pos)."""
    return softplus(np.asarray(q_neg) - np.asarray(q_pos))


def cql_term(q_data, q_pi, logp_pi, q_rand, log_density_rand, alpha: float, estimator: str = "logsumexp",
             temp: float = 1.0, floor: np.ndarray | None = None):
    """alpha * (E_pi[Q] - E_data[Q]) and its derivatives w.r.t. each Q array.

    ``q_pi`` is (n_pi, B), ``q_rand`` (n_rand, B). With ``floor`` (Cal-QL) every
    policy-sample Q is replaced by max(Q, floor) before aggregation.
    Returns ``(value, gap, dq_data, dq_pi, dq_rand)`` where ``gap`` is the
    un-weighted E_pi[Q] - E_data[Q].
    """
    n = q_data.shape[0]
    if floor is not None:
        pass_mask = q_pi > floor[None, :]
        q_pi_used = np.where(pass_mask, q_pi, floor[None, :])
    else:
        pass_mask = np.ones_like(q_pi, dtype=bool)
        q_pi_used = q_pi
    if estimator == "logsumexp":
        cat = np.concatenate([q_rand - log_density_rand, q_pi_used - logp_pi], axis=0)
        ood = temp * logsumexp(cat / temp, axis=0)
        w = softmax(cat / temp, axis=0) * (alpha / n)
        dq_rand = w[:len(q_rand)]
        dq_pi = w[len(q_rand):] * pass_mask
    elif estimator == "mean-policy":
        ood = q_pi_used.mean(axis=0)
        dq_rand = np.zeros_like(q_rand)
        dq_pi = np.full_like(q_pi, alpha / (n * q_pi.shape[0])) * pass_mask
    else:
        raise ConfigError(f"unknown estimator {estimator!r}")
    gap = float(np.mean(ood) - np.mean(q_data))
    return alpha * gap, gap, np.full(n, -alpha / n), dq_pi, dq_rand


RANK_PAIRS_SUCC = (("a", "noisy"), ("a", "very_noisy"), ("a", "random"), ("a", "permuted"))
RANK_PAIRS_CHAIN = (("noisy", "very_noisy"), ("very_noisy", "random"))


def rank_pairs(cfg: CriticObjectiveConfig):
    """(success pairs, failure pairs) after ablations."""
    succ = [p for p in RANK_PAIRS_SUCC if not (cfg.no_permuted and p[1] == "permuted")]
    if not cfg.no_chain:
        succ += list(RANK_PAIRS_CHAIN)
    fail = [("a", "random" if cfg.fail_pair == "random" else "noisy")]
    return succ, fail


def rank_term(q: dict[str, np.ndarray], success: np.ndarray, cfg: CriticObjectiveConfig):
    """Per-row ranking losses averaged over the whole batch.

    Success rows carry alpha0 * (L_succ + L_chain), failure rows alpha1 * L_fail.
    Returns ``(value, dq, parts)`` with ``dq`` keyed like ``q``.
    """
    success = np.asarray(success, dtype=bool)
    n = len(success)
    dq = {k: np.zeros(n) for k in q}
    parts = {"succ": 0.0, "chain": 0.0, "fail": 0.0}
    succ_pairs, fail_pairs = rank_pairs(cfg)
    total = 0.0
    for pairs, rows, weight, fail in ((succ_pairs, success, cfg.alpha0, False),
                                      (fail_pairs, ~success, cfg.alpha1, True)):
        if not rows.any():
            continue
        for pos, neg in pairs:
            x = q[neg][rows] - q[pos][rows]
            val = weight * float(np.sum(softplus(x))) / n
            total += val
            parts["fail" if fail else "chain" if (pos, neg) in RANK_PAIRS_CHAIN else "succ"] += val
            g = weight * sigmoid(x) / n
            dq[neg][rows] += g
            dq[pos][rows] -= g
    return total, dq, parts


# ---- negatives ---------------------------------------------------------------------

@dataclass
class NegativeActions:
    noisy: np.ndarray
    very_noisy: np.ndarray
    random: np.ndarray
    permuted: np.ndarray
    delta: np.ndarray  # sigma * eps, shared by noisy and very_noisy

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"noisy": self.noisy, "very_noisy": self.very_noisy, "random": self.random,
                "permuted": self.permuted}


def make_negatives(actions: np.ndarray, sigma: float, rng: np.random.Generator) -> NegativeActions:
    """One eps ~ N(0, I) per row, reused at scales sigma and 2*sigma; fresh uniforms; cyclic shift by one."""
    actions = np.asarray(actions, dtype=np.float64)
    if len(actions) < 1:
        raise BatchError("empty batch")
    delta = sigma * rng.standard_normal(actions.shape)
    random = rng.uniform(-1.0, 1.0, size=actions.shape)
    permuted = np.roll(actions, -1, axis=0)
    return NegativeActions(actions + delta, actions + 2.0 * delta, random, permuted, delta)


# ---- losses over networks ------------------------------------------------------------

@dataclass
class CriticLoss:
    value: float
    grads: list[GradBundle]
    terms: dict[str, float] = field(default_factory=dict)


class LagrangeMultiplier:
    """Dual variable scaling the CQL gap toward ``target_action_gap``."""

    def __init__(self, lr: float = 3e-4, init: float = 1.0):
        self.log_value = np.array([math.log(init)])
        self.state = AdamState.for_params([self.log_value], lr)

    @property
    def value(self) -> float:
        return float(np.clip(np.exp(self.log_value[0]), 0.0, 1e6))

    def update(self, gaps: list[float], target_gap: float) -> None:
        # ascent on value * (gap - target), written as descent on its negation
        g = -self.value * float(np.mean([gp - target_gap for gp in gaps]))
        adam_step([self.log_value], GradBundle([np.array([g])]), self.state)


def _sample_next(policy, critics: CriticPair, batch: Batch, rng):
    a2, _ = policy.sample(batch.next_obs, rng)
    return a2


def td_loss(critics: CriticPair, batch: Batch, policy, rng: np.random.Generator, gamma: float = 0.99) -> CriticLoss:
    """Half mean squared TD error for each twin against the min-twin target backup."""
    if len(batch) == 0:
        raise BatchError("empty batch")
    y = td_target(critics, batch, _sample_next(policy, critics, batch, rng), gamma)
    total, grads, terms = 0.0, [], {}
    for i in range(2):
        q = critics.evaluate(i, batch.obs, [batch.actions])
        val, dq = td_term(q[0], y)
        grads.append(critics.backward(i, dq[None]))
        total += val
        terms[f"q{i + 1}_mean"] = float(q.mean())
    terms["td"] = total
    return CriticLoss(total, grads, terms)


def _conservative(critics, batch, policy, cfg, rng, floor, lagrange):
    cfg.validate()
    if len(batch) == 0:
        raise BatchError("empty batch")
    n = len(batch)
    y = td_target(critics, batch, _sample_next(policy, critics, batch, rng), cfg.gamma)
    obs_pi = np.tile(batch.obs, (cfg.n_policy_actions, 1))
    a_pi, logp = policy.sample(obs_pi, rng)
    a_pi = a_pi.reshape(cfg.n_policy_actions, n, -1)
    logp = logp.reshape(cfg.n_policy_actions, n)
    use_rand = cfg.cql_estimator == "logsumexp"
    n_rand = cfg.n_random_actions if use_rand else 0
    a_rand = rng.uniform(-1.0, 1.0, size=(n_rand, n, critics.action_dim))
    log_density = critics.action_dim * math.log(0.5)
    scale = lagrange.value if lagrange is not None else 1.0
    total, grads = 0.0, []
    terms = {"td": 0.0, "reg": 0.0, "gap_q1": 0.0, "gap_q2": 0.0}
    sets = [batch.actions, *a_pi, *a_rand]
    # batched evaluations beyond the dataset action, counted once for the twin pair
    critics.extra_calls += len(sets) - 1
    for i in range(2):
        q = critics.evaluate(i, batch.obs, sets)
        q_data, q_pi, q_rand = q[0], q[1:1 + cfg.n_policy_actions], q[1 + cfg.n_policy_actions:]
        td_val, dq_td = td_term(q_data, y)
        reg, gap, dq_data, dq_pi, dq_rand = cql_term(
            q_data, q_pi, logp, q_rand, log_density, cfg.alpha, cfg.cql_estimator, cfg.cql_temp, floor)
        if lagrange is not None:
            reg = scale * (reg - cfg.target_action_gap)
            dq_data, dq_pi, dq_rand = scale * dq_data, scale * dq_pi, scale * dq_rand
        dq = np.concatenate([(dq_td + dq_data)[None], dq_pi, dq_rand])
        grads.append(critics.backward(i, dq))
        total += td_val + reg
        terms["td"] += td_val
        terms["reg"] += reg
        terms[f"gap_q{i + 1}"] = cfg.alpha * gap
    return CriticLoss(total, grads, terms)


def cql_regularizer(critics: CriticPair, batch: Batch, policy, cfg: CriticObjectiveConfig,
                    rng: np.random.Generator, lagrange: LagrangeMultiplier | None = None) -> CriticLoss:
    """TD loss plus alpha * (E_pi[Q] - E_data[Q]) applied to each twin."""
    return _conservative(critics, batch, policy, cfg, rng, None, lagrange)


def calql_regularizer(critics: CriticPair, batch: Batch, policy, refvals: np.ndarray | None,
                      cfg: CriticObjectiveConfig, rng: np.random.Generator,
                      lagrange: LagrangeMultiplier | None = None) -> CriticLoss:
    """As ``cql_regularizer`` with policy-sample Q floored at the reference value V(s)."""
    if refvals is None or len(refvals) != len(batch) or not np.all(np.isfinite(refvals)):
        raise BatchError("Cal-QL needs a finite reference value for every row")
    return _conservative(critics, batch, policy, cfg, rng, np.asarray(refvals, dtype=np.float64), lagrange)


def rankq_loss(critics: CriticPair, batch: Batch, policy, cfg: CriticObjectiveConfig,
               rng: np.random.Generator) -> CriticLoss:
    """TD loss plus alpha0 * (L_succ + L_chain) on success rows and alpha1 * L_fail on failure rows."""
    cfg.validate()
    n = len(batch)
    if n == 0:
        raise BatchError("batch with no success and no failure rows")
    y = td_target(critics, batch, _sample_next(policy, critics, batch, rng), cfg.gamma)
    neg = make_negatives(batch.actions, cfg.effective_sigma, rng)
    names = ["noisy", "very_noisy", "random"] + ([] if cfg.no_permuted else ["permuted"])
    negs = neg.as_dict()
    total, grads = 0.0, []
    terms = {"td": 0.0, "rank": 0.0, "succ": 0.0, "chain": 0.0, "fail": 0.0}
    critics.extra_calls += len(names)
    for i in range(2):
        q = critics.evaluate(i, batch.obs, [batch.actions] + [negs[k] for k in names])
        qd = {"a": q[0], **{k: q[j + 1] for j, k in enumerate(names)}}
        td_val, dq_td = td_term(q[0], y)
        rank_val, dq_rank, parts = rank_term(qd, batch.success, cfg)
        dq = np.stack([dq_td + dq_rank["a"]] + [dq_rank[k] for k in names])
        grads.append(critics.backward(i, dq))
        total += td_val + rank_val
        terms["td"] += td_val
        terms["rank"] += rank_val
        for k, v in parts.items():
            terms[k] += v
    return CriticLoss(total, grads, terms)


def critic_loss(critics: CriticPair, batch: Batch, policy, cfg: CriticObjectiveConfig,
                rng: np.random.Generator, lagrange: LagrangeMultiplier | None = None) -> CriticLoss:
    if cfg.kind == "td":
        return td_loss(critics, batch, policy, rng, cfg.gamma)
    if cfg.kind == "cql":
        return cql_regularizer(critics, batch, policy, cfg, rng, lagrange)
    if cfg.kind == "calql":
        return calql_regularizer(critics, batch, policy, batch.rtg, cfg, rng, lagrange)
    if cfg.kind == "rankq":
        return rankq_loss(critics, batch, policy, cfg, rng)
    raise ConfigError(f"unknown critic objective {cfg.kind!r}")


def td_only(cfg: CriticObjectiveConfig) -> CriticObjectiveConfig:
    return replace(cfg, kind="td")
