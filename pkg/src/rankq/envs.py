"""Desk-scale tasks: the 2-D disc regression toy, a sparse-reward point maze,
and scripted behavior policies for collecting offline data."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datastore import Trajectory


class InvalidTaskError(ValueError):
    pass


# ---- toy disc task --------------------------------------------------------------

@dataclass(frozen=True)
class ToyDiscTask:
    radius: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.radius < 1.0:
            raise InvalidTaskError(f"success radius must be in (0, 1), got {self.radius}")

    def reward(self, actions: np.ndarray) -> np.ndarray:
        return (np.linalg.norm(np.atleast_2d(actions), axis=1) <= self.radius).astype(np.float64)

    def is_success(self, action: np.ndarray) -> bool:
        return bool(np.linalg.norm(action) <= self.radius)


@dataclass
class ToyDataset:
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def success(self) -> np.ndarray:
        return self.rewards > 0


def toy_sample_dataset(task: ToyDiscTask, n_succ: int, n_fail: int, seed: int) -> ToyDataset:
    """Uniform draws inside the disc (reward 1), then draws outside it with a0 > 0 (reward 0)."""
    if n_succ <= 0 or n_fail <= 0:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    r = task.radius * np.sqrt(rng.uniform(size=n_succ))
    theta = rng.uniform(0.0, 2 * np.pi, size=n_succ)
    succ = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    fail = np.empty((0, 2))
    while len(fail) < n_fail:
        cand = np.stack([rng.uniform(0.0, 1.0, size=2 * n_fail), rng.uniform(-1.0, 1.0, size=2 * n_fail)], 1)
        cand = cand[(np.linalg.norm(cand, axis=1) > task.radius) & (cand[:, 0] > 0)]
        fail = np.concatenate([fail, cand])
    fail = fail[:n_fail]
    return ToyDataset(np.concatenate([succ, fail]), np.concatenate([np.ones(n_succ), np.zeros(n_fail)]))


# ---- point maze -----------------------------------------------------------------

MEDIUM = """\
########
#G.....#
#......#
#####..#
#......#
#S.....#
#S.....#
########
"""

LARGE = """\
############
#G.........#
#..........#
#########..#
#..........#
#..........#
#..#########
#..........#
#..........#
#########..#
#S.........#
############
"""

LAYOUTS = {"medium": (MEDIUM, 200), "large": (LARGE, 400)}


@dataclass
class MazeLayout:
    walls: np.ndarray  # bool (rows, cols), True = wall
    goal_cell: tuple[int, int]
    start_cells: list[tuple[int, int]]

    @classmethod
    def from_text(cls, text: str) -> "MazeLayout":
        lines = [ln.rstrip("\n") for ln in text.strip("\n").splitlines() if ln.strip()]
        width = max(len(ln) for ln in lines)
        walls = np.ones((len(lines), width), dtype=bool)
        goal, starts = None, []
        for r, ln in enumerate(lines):
            for c, ch in enumerate(ln):
                if ch not in "#.GS":
                    raise InvalidTaskError(f"unknown layout character {ch!r} at row {r}, col {c}")
                walls[r, c] = ch == "#"
                if ch == "G":
                    if goal is not None:
                        raise InvalidTaskError("layout has more than one goal cell")
                    goal = (r, c)
                elif ch == "S":
                    starts.append((r, c))
        if goal is None or not starts:
            raise InvalidTaskError("layout needs one G cell and at least one S cell")
        layout = cls(walls, goal, starts)
        dist = layout.distances()
        if any(dist[s] < 0 for s in starts):
            raise InvalidTaskError("goal unreachable from a start cell")
        return layout

    @property
    def shape(self) -> tuple[int, int]:
        return self.walls.shape

    def is_wall(self, x: float, y: float) -> bool:
        r, c = int(np.floor(y)), int(np.floor(x))
        if r < 0 or c < 0 or r >= self.walls.shape[0] or c >= self.walls.shape[1]:
            return True
        return bool(self.walls[r, c])

    def free_cells(self) -> list[tuple[int, int]]:
        return [tuple(rc) for rc in np.argwhere(~self.walls)]

    def distances(self, target: tuple[int, int] | None = None) -> np.ndarray:
        """BFS step counts to ``target`` (default: goal) over 4-connected free cells; -1 if unreachable."""
        target = self.goal_cell if target is None else target
        dist = np.full(self.walls.shape, -1, dtype=int)
        dist[target] = 0
        q = deque([target])
        while q:
            r, c = q.popleft()
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nr, nc = r + dr, c + dc
                if 0 <= nr < dist.shape[0] and 0 <= nc < dist.shape[1] and not self.walls[nr, nc] \
                        and dist[nr, nc] < 0:
                    dist[nr, nc] = dist[r, c] + 1
                    q.append((nr, nc))
        return dist


def load_layout(path: str | Path) -> MazeLayout:
    return MazeLayout.from_text(Path(path).read_text())


class PointMaze:
    """Damped double integrator in a grid maze. Position is in cell units, x = column, y = row.

    State is ``(x, y, vx, vy)``; observations rescale it to roughly [-1, 1].
    Reward is 1 (and the episode terminates) once within ``goal_radius`` of the goal center.
    """

    def __init__(self, layout: MazeLayout, max_steps: int = 200, goal_radius: float = 0.5,
                 damping: float = 0.9, accel: float = 0.02):
        self.layout = layout
        self.max_steps = int(max_steps)
        self.goal_radius = float(goal_radius)
        self.damping = float(damping)
        self.accel = float(accel)
        gr, gc = layout.goal_cell
        self.goal = np.array([gc + 0.5, gr + 0.5])
        self.state = np.zeros(4)
        self.t = 0

    obs_dim = 4
    action_dim = 2

    @property
    def speed_cap(self) -> float:
        """Bound on |v| per axis reachable from rest under |a| <= 1."""
        return self.accel / (1.0 - self.damping)

    def observe(self, state: np.ndarray | None = None) -> np.ndarray:
        s = self.state if state is None else state
        rows, cols = self.layout.shape
        return np.array([2 * s[0] / cols - 1, 2 * s[1] / rows - 1, s[2] / self.speed_cap, s[3] / self.speed_cap])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        cells = self.layout.start_cells
        r, c = cells[rng.integers(len(cells))]
        self.state = np.array([c + rng.uniform(0.1, 0.9), r + rng.uniform(0.1, 0.9), 0.0, 0.0])
        self.t = 0
        return self.observe()

    def set_state(self, state) -> np.ndarray:
        self.state = np.asarray(state, dtype=np.float64).copy()
        return self.observe()

    def at_goal(self, state: np.ndarray | None = None) -> bool:
        s = self.state if state is None else state
        return bool(np.hypot(s[0] - self.goal[0], s[1] - self.goal[1]) <= self.goal_radius)

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        x, y, vx, vy = self.state
        vx = self.damping * vx + self.accel * a[0]
        vy = self.damping * vy + self.accel * a[1]
        # axis-separated moves; speed < 1 cell/step so at most one boundary per axis
        nx = x + vx
        if self.layout.is_wall(nx, y):
            nx = np.floor(nx) - 1e-9 if vx > 0 else np.floor(nx) + 1.0 + 1e-9
            vx = 0.0
        ny = y + vy
        if self.layout.is_wall(nx, ny):
            ny = np.floor(ny) - 1e-9 if vy > 0 else np.floor(ny) + 1.0 + 1e-9
            vy = 0.0
        self.state = np.array([nx, ny, vx, vy])
        self.t += 1
        reward = 1.0 if self.at_goal() else 0.0
        terminated = reward > 0
        truncated = (not terminated) and self.t >= self.max_steps
        return self.observe(), reward, terminated, truncated


def maze_step(env: PointMaze, action):
    return env.step(action)


def make_maze(name: str = "medium", **kw) -> PointMaze:
    if name in LAYOUTS:
        text, timeout = LAYOUTS[name]
        kw.setdefault("max_steps", timeout)
        return PointMaze(MazeLayout.from_text(text), **kw)
    path = Path(name)
    if path.exists():
        return PointMaze(load_layout(path), **kw)
    raise InvalidTaskError(f"unknown environment {name!r}")


# ---- scripted behavior ------------------------------------------------------------

class WaypointController:
    """PD controller that follows BFS cell centers toward a target cell."""

    def __init__(self, env: PointMaze, target: tuple[int, int] | None = None, kp: float = 4.0, kd: float = 12.0):
        self.env = env
        self.kp, self.kd = kp, kd
        self.set_target(target if target is not None else env.layout.goal_cell)

    def set_target(self, cell: tuple[int, int]) -> None:
        self.target = tuple(cell)
        self.dist = self.env.layout.distances(self.target)

    def reached(self, state) -> bool:
        r, c = int(state[1]), int(state[0])
        return (r, c) == self.target

    def waypoint(self, state) -> np.ndarray:
        r, c = int(state[1]), int(state[0])
        if (r, c) == self.target:
            return np.array([self.target[1] + 0.5, self.target[0] + 0.5])
        best = (r, c)
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if self.dist[nr, nc] >= 0 and (self.dist[best] < 0 or self.dist[nr, nc] < self.dist[best]):
                best = (nr, nc)
        # look one more cell ahead along straight corridors to avoid stop-and-go
        nxt = best
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = best[0] + dr, best[1] + dc
            if self.dist[nr, nc] >= 0 and self.dist[nr, nc] < self.dist[nxt] \
                    and (nr - best[0], nc - best[1]) == (best[0] - r, best[1] - c):
                nxt = (nr, nc)
        return np.array([nxt[1] + 0.5, nxt[0] + 0.5])

    def __call__(self, state) -> np.ndarray:
        err = self.waypoint(state) - state[:2]
        return np.clip(self.kp * err - self.kd * state[2:], -1.0, 1.0)


@dataclass
class ScriptedCollector:
    """``play``: goal-directed episodes, some with a detour through a random cell first.
    ``diverse``: a mixture of goal-directed, scripted random-waypoint tours, and uniform-random episodes.
    """
    mode: str = "play"
    noise: float = 0.2
    detour_fraction: float = 0.3
    detour_cells: int = 2
    random_fraction: float = 0.3
    scripted_fraction: float = 0.3

    def __post_init__(self):
        if self.mode not in ("play", "diverse"):
            raise ValueError(f"collector mode must be play or diverse, got {self.mode!r}")

    def episode_kind(self, rng: np.random.Generator) -> str:
        u = rng.uniform()
        if self.mode == "play":
            return "detour" if u < self.detour_fraction else "goal"
        if u < self.random_fraction:
            return "random"
        if u < self.random_fraction + self.scripted_fraction:
            return "scripted"
        return "goal"


def _random_cell(env: PointMaze, rng) -> tuple[int, int]:
    cells = env.layout.free_cells()
    return cells[rng.integers(len(cells))]


def run_episode(env: PointMaze, policy, rng: np.random.Generator) -> Trajectory:
    """Roll out ``policy(obs, state) -> action`` until termination or timeout."""
    obs = env.reset(rng)
    rows = []
    while True:
        a = np.clip(policy(obs, env.state), -1.0, 1.0)
        nobs, r, term, trunc = env.step(a)
        rows.append((obs, a, r, nobs, term, trunc))
        obs = nobs
        if term or trunc:
            break
    return Trajectory(*[np.array(col) for col in zip(*rows)])


def collect_trajectories(env: PointMaze, collector: ScriptedCollector, n_episodes: int, seed: int,
                         kinds: list | None = None) -> list[Trajectory]:
    """Seed-deterministic scripted rollouts. If ``kinds`` is a list, episode kinds are appended to it."""
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_episodes):
        kind = collector.episode_kind(rng)
        if kinds is not None:
            kinds.append(kind)
        ctrl = WaypointController(env)
        plan: list[tuple[int, int]] = []
        if kind == "detour":
            plan = [_random_cell(env, rng) for _ in range(collector.detour_cells)]
        elif kind == "scripted":
            plan = [_random_cell(env, rng) for _ in range(4)]
        if plan:
            ctrl.set_target(plan[0])

        def policy(obs, state, ctrl=ctrl, plan=plan, kind=kind):
            if kind == "random":
                return rng.uniform(-1.0, 1.0, size=2)
            if plan and ctrl.reached(state):
                plan.pop(0)
                ctrl.set_target(plan[0] if plan else env.layout.goal_cell)
                if kind == "scripted" and not plan:
                    ctrl.set_target(_random_cell(env, rng))
            return ctrl(state) + collector.noise * rng.standard_normal(2)

        out.append(run_episode(env, policy, rng))
    return out
