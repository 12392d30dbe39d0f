"""Tanh-squashed Gaussian policy, SAC actor loss, and entropy temperature."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .critics import CriticPair
from .ndmath import AdamState, GradBundle, Mlp, adam_step, softplus

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _log1m_tanh2(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u)), stable for large |u|
    return 2.0 * (math.log(2.0) - u - softplus(-2.0 * u))


class SquashedGaussianPolicy:
    """Trunk MLP emitting per-dimension mean and log-std; actions are tanh(mean + std * xi)."""

    def __init__(self, obs_dim: int, action_dim: int, hidden=(256, 256, 256),
                 rng: np.random.Generator | None = None, activation: str = "relu"):
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.net = Mlp([obs_dim, *hidden, 2 * action_dim], activation, rng)
        self._cache = None

    def copy(self) -> "SquashedGaussianPolicy":
        new = SquashedGaussianPolicy.__new__(SquashedGaussianPolicy)
        new.obs_dim, new.action_dim = self.obs_dim, self.action_dim
        new.net = self.net.copy()
        new._cache = None
        return new

    def _heads(self, obs, record):
        out = self.net.forward(np.atleast_2d(obs), record=record)
        mean, raw_ls = out[:, :self.action_dim], out[:, self.action_dim:]
        return mean, raw_ls, np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)

    def sample_with_noise(self, obs: np.ndarray, xi: np.ndarray, record: bool = False):
        mean, raw_ls, log_std = self._heads(obs, record)
        std = np.exp(log_std)
        u = mean + std * xi
        a = np.tanh(u)
        logp = np.sum(-0.5 * xi * xi - log_std - _HALF_LOG_2PI - _log1m_tanh2(u), axis=1)
        if record:
            self._cache = (a, u, std, xi, raw_ls)
        return a, logp

    def sample(self, obs: np.ndarray, rng: np.random.Generator, record: bool = False):
        """Reparameterized draw; returns ``(action, log_prob)`` with the tanh change-of-variables term."""
        xi = rng.standard_normal((len(np.atleast_2d(obs)), self.action_dim))
        return self.sample_with_noise(obs, xi, record)

    def mode(self, obs: np.ndarray) -> np.ndarray:
        mean, _, _ = self._heads(obs, False)
        return np.tanh(mean)

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mean, _, log_std = self._heads(obs, False)
        a = np.clip(actions, -1 + 1e-12, 1 - 1e-12)
        u = np.arctanh(a)
        xi = (u - mean) / np.exp(log_std)
        return np.sum(-0.5 * xi * xi - log_std - _HALF_LOG_2PI - _log1m_tanh2(u), axis=1)

    def backward(self, d_action: np.ndarray, d_logp: np.ndarray) -> GradBundle:
        """Chain gradients w.r.t. the last recorded sample's actions and log-probs into the trunk."""
        a, u, std, xi, raw_ls = self._cache
        self._cache = None
        d_logp = d_logp[:, None]
        du = d_action * (1.0 - a * a) + d_logp * 2.0 * a
        d_mean = du
        d_ls = du * std * xi - d_logp
        d_ls = d_ls * ((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX))
        return self.net.backward(np.concatenate([d_mean, d_ls], axis=1))


@dataclass
class EntropyTemp:
    log_temp: np.ndarray
    target_entropy: float
    state: AdamState
    auto: bool = True

    @classmethod
    def create(cls, action_dim: int, init: float = 1.0, lr: float = 3e-4, auto: bool = True) -> "EntropyTemp":
        log_temp = np.array([math.log(init)])
        return cls(log_temp, -float(action_dim), AdamState.for_params([log_temp], lr), auto)

    @property
    def value(self) -> float:
        return float(np.exp(self.log_temp[0]))

    def grad(self, logp: np.ndarray) -> float:
        """d/dlog_temp of -log_temp * (logp + target_entropy), averaged."""
        return -float(np.mean(logp + self.target_entropy))

    def update(self, logp: np.ndarray) -> None:
        if self.auto:
            adam_step([self.log_temp], GradBundle([np.array([self.grad(logp)])]), self.state)


@dataclass
class ActorLoss:
    value: float
    grads: GradBundle
    logp: np.ndarray
    q_mean: float
    dqda: np.ndarray


def actor_loss(policy: SquashedGaussianPolicy, critics: CriticPair, obs: np.ndarray, temp: float,
               rng: np.random.Generator | None = None, xi: np.ndarray | None = None) -> ActorLoss:
    """mean(temp * log_prob - min_j Q_j(s, a)) with a ~ pi(s); critics are not updated."""
    if xi is None:
        xi = rng.standard_normal((len(obs), policy.action_dim))
    a, logp = policy.sample_with_noise(obs, xi, record=True)
    n = len(obs)
    x = np.concatenate([obs, a], axis=1)
    q1 = critics.q[0].forward(x)
    q2 = critics.q[1].forward(x)
    use_first = q1[:, 0] <= q2[:, 0]
    q = np.where(use_first, q1[:, 0], q2[:, 0])
    # route the min through whichever twin attained it
    up1 = np.where(use_first, 1.0, 0.0)[:, None]
    dqda = critics.q[0].backward(up1).input_grad[:, -policy.action_dim:] \
        + critics.q[1].backward(1.0 - up1).input_grad[:, -policy.action_dim:]
    value = float(np.mean(temp * logp - q))
    grads = policy.backward(-dqda / n, np.full(n, temp / n))
    return ActorLoss(value, grads, logp, float(q.mean()), dqda)
