"""Q-landscape diagnostics: dQ/da fields, gradient-ascent paths, dQ/da
statistics over checkpoints, and per-category ranking accuracies."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .critics import CriticPair, make_negatives
from .ndmath import Mlp, central_difference, relative_error

CATEGORIES = ("noisy", "very_noisy", "random", "permuted")


class UnsupportedError(ValueError):
    pass


# ---- critic adapters ------------------------------------------------------------------
# Anything with value(obs, actions) -> (n,) and value_and_grad(obs, actions) -> ((n,), (n, d)).

class MlpCritic:
    def __init__(self, net: Mlp, action_dim: int):
        self.net, self.action_dim = net, action_dim

    def value(self, obs, actions):
        return self.net.forward(np.concatenate([obs, actions], 1), record=False)[:, 0]

    def value_and_grad(self, obs, actions):
        q = self.net.forward(np.concatenate([obs, actions], 1))
        g = self.net.backward(np.ones_like(q)).input_grad
        return q[:, 0], g[:, -self.action_dim:]


class PairCritic:
    """Min over the live twins, which is what the actor ascends."""

    def __init__(self, pair: CriticPair):
        self.parts = [MlpCritic(q, pair.action_dim) for q in pair.q]
        self.action_dim = pair.action_dim

    def value(self, obs, actions):
        return np.minimum(*(p.value(obs, actions) for p in self.parts))

    def value_and_grad(self, obs, actions):
        (q1, g1), (q2, g2) = (p.value_and_grad(obs, actions) for p in self.parts)
        first = (q1 <= q2)[:, None]
        return np.minimum(q1, q2), np.where(first, g1, g2)


class AnalyticCritic:
    """Critic from closed-form ``f(actions)`` and ``grad(actions)``; ignores the state."""

    def __init__(self, f: Callable, grad: Callable, action_dim: int = 2):
        self.f, self.grad, self.action_dim = f, grad, action_dim

    def value(self, obs, actions):
        return np.asarray(self.f(actions), dtype=np.float64)

    def value_and_grad(self, obs, actions):
        return self.value(obs, actions), np.asarray(self.grad(actions), dtype=np.float64)


def as_critic(c):
    if isinstance(c, CriticPair):
        return PairCritic(c)
    return c


def _obs_rows(state, n):
    return np.repeat(np.atleast_2d(np.asarray(state, dtype=np.float64)), n, axis=0)


# ---- gradient field -------------------------------------------------------------------

@dataclass
class GradField:
    xs: np.ndarray
    ys: np.ndarray
    q: np.ndarray      # (res, res), q[j, i] at (xs[i], ys[j])
    grad: np.ndarray   # (res, res, 2)
    fd_error: float    # worst relative error of the finite-difference cross-check

    @property
    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.grad, axis=-1)


def fd_action_grad(critic, state, action: np.ndarray, h: float = 1e-5) -> np.ndarray:
    obs = _obs_rows(state, 1)
    return central_difference(lambda a: float(critic.value(obs, a[None])[0]), action, h)


def grad_field(critic, state, grid_res: int = 41, n_checks: int = 10, seed: int = 0, h: float = 1e-5) -> GradField:
    """dQ/da on a grid over [-1, 1]^2 by backprop, cross-checked by central differences."""
    critic = as_critic(critic)
    if critic.action_dim != 2:
        raise UnsupportedError("field plots need a 2-D action space; use dqda_stats instead")
    xs = np.linspace(-1.0, 1.0, grid_res)
    gx, gy = np.meshgrid(xs, xs)
    acts = np.stack([gx.ravel(), gy.ravel()], 1)
    q, g = critic.value_and_grad(_obs_rows(state, len(acts)), acts)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in rng.choice(len(acts), size=min(n_checks, len(acts)), replace=False):
        num = fd_action_grad(critic, state, acts[i], h)
        if np.linalg.norm(g[i]) > 1e-8 or np.linalg.norm(num) > 1e-8:
            worst = max(worst, relative_error(g[i], num))
    return GradField(xs, xs.copy(), q.reshape(grid_res, grid_res), g.reshape(grid_res, grid_res, 2), worst)


# ---- gradient ascent ------------------------------------------------------------------

@dataclass
class AscentPath:
    start: np.ndarray
    points: np.ndarray   # (steps + 1, d), first row is the start
    q: np.ndarray
    converged: bool

    @property
    def steps(self) -> int:
        return len(self.points) - 1


def ring_starts(n: int = 8, radius: float = 0.9) -> np.ndarray:
    ang = 2 * np.pi * np.arange(n) / n
    return radius * np.stack([np.cos(ang), np.sin(ang)], 1)


def ascent_paths(critic, starts: np.ndarray, lr: float = 0.05, max_steps: int = 200,
                 success_pred: Callable[[np.ndarray], bool] | None = None, state=None) -> list[AscentPath]:
    """Iterate a <- clip(a + lr * dQ/da) from each start; stops once ``success_pred`` holds or the step vanishes."""
    critic = as_critic(critic)
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    if np.any(np.abs(starts) > 1.0):
        raise ValueError("starts must lie within [-1, 1]")
    state = np.zeros(1) if state is None else state
    obs = _obs_rows(state, 1)
    pred = success_pred or (lambda a: False)
    out = []
    for s in starts:
        a = s.copy()
        pts, qs = [a.copy()], []
        for _ in range(max_steps + 1):
            q, g = critic.value_and_grad(obs, a[None])
            qs.append(float(q[0]))
            if pred(a) or len(pts) > max_steps:
                break
            nxt = np.clip(a + lr * g[0], -1.0, 1.0)
            if np.max(np.abs(nxt - a)) < 1e-12:
                break
            a = nxt
            pts.append(a.copy())
        out.append(AscentPath(s.copy(), np.array(pts), np.array(qs), bool(pred(a))))
    return out


# ---- dQ/da statistics -------------------------------------------------------------------

@dataclass
class DqdaStats:
    max: float
    std: float


def dqda_stats(critic, obs: np.ndarray, actions: np.ndarray) -> DqdaStats:
    """Element-wise max and population std of |dQ/da| over a probe batch."""
    _, g = as_critic(critic).value_and_grad(obs, actions)
    mag = np.abs(g)
    return DqdaStats(float(mag.max()), float(mag.std()))


def dqda_over_training(checkpoints: Sequence, probe_obs: np.ndarray, probe_actions: np.ndarray) -> list[DqdaStats]:
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    return [dqda_stats(c, probe_obs, probe_actions) for c in checkpoints]


# ---- ranking accuracy ---------------------------------------------------------------------

@dataclass
class RankingAccuracies:
    noisy: float
    very_noisy: float
    random: float
    permuted: float

    def as_dict(self) -> dict[str, float]:
        return {c: getattr(self, c) for c in CATEGORIES}


def ranking_accuracy(critic, obs: np.ndarray, actions: np.ndarray, sigma: float, seed: int) -> RankingAccuracies:
    """Fraction of held-out success rows with Q(s, a) strictly above each negative; ties count as wrong."""
    if len(obs) == 0:
        raise ValueError("empty held-out set")
    critic = as_critic(critic)
    rng = np.random.default_rng(seed)
    # rows arrive in episode order; shuffle so permuted partners come from unrelated states, as in a sampled batch
    order = rng.permutation(len(obs))
    obs, actions = obs[order], actions[order]
    neg = make_negatives(actions, sigma, rng)
    q = critic.value(obs, actions)
    acc = {c: float(np.mean(q > critic.value(obs, getattr(neg, c)))) for c in CATEGORIES}
    return RankingAccuracies(**acc)


# ---- CSV --------------------------------------------------------------------------------------

def write_field_csv(field: GradField, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["a0", "a1", "q", "dq_da0", "dq_da1"])
        for j, y in enumerate(field.ys):
            for i, x in enumerate(field.xs):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(field.q[j, i])),
                            repr(float(field.grad[j, i, 0])), repr(float(field.grad[j, i, 1]))])


def write_paths_csv(paths: Sequence[AscentPath], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "step", "a0", "a1", "q", "converged"])
        for k, p in enumerate(paths):
            for t, (pt, q) in enumerate(zip(p.points, p.q)):
                w.writerow([k, t, repr(float(pt[0])), repr(float(pt[1])), repr(float(q)), int(p.converged)])


def write_rows_csv(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})


# ---- SVG ---------------------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_field_svg(field: GradField, paths: Sequence[AscentPath], path: str | Path, title: str = "",
                   radius: float | None = None, stride: int = 4) -> None:
    """Heatmap of Q with dQ/da arrows and ascent paths."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(field.q, origin="lower", extent=(-1, 1, -1, 1), cmap="viridis")
    fig.colorbar(im, ax=ax, label="Q")
    gx, gy = np.meshgrid(field.xs, field.ys)
    g = field.grad / np.maximum(field.magnitude[..., None], 1e-12)
    ax.quiver(gx[::stride, ::stride], gy[::stride, ::stride], g[::stride, ::stride, 0], g[::stride, ::stride, 1],
              color="white", alpha=0.7, width=0.004)
    for p in paths:
        ax.plot(p.points[:, 0], p.points[:, 1], color="red" if not p.converged else "orange", lw=1.5)
        ax.plot(*p.start, "o", color="red", ms=4)
    if radius:
        t = np.linspace(0, 2 * np.pi, 100)
        ax.plot(radius * np.cos(t), radius * np.sin(t), "w--", lw=1)
    ax.set_xlabel("a0")
    ax.set_ylabel("a1")
    ax.set_title(title)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def plot_series_svg(series: dict[str, tuple[Sequence[float], Sequence[float]]], path: str | Path,
                    ylabel: str = "", logy: bool = False, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, (x, y) in series.items():
        ax.plot(x, y, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
