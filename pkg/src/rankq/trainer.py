"""Offline pretraining and online fine-tuning for the algorithm matrix."""
from __future__ import annotations

import csv
import io
import pickle
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import seeding
from .actor import EntropyTemp, SquashedGaussianPolicy, actor_loss
from .critics import ConfigError, CriticObjectiveConfig, CriticPair, LagrangeMultiplier, critic_loss, \
    polyak_update
from .datastore import POOLED, Batch, MixedSampler, OfflineDataset, Trajectory, hybrid_sample
from .envs import PointMaze, make_maze, run_episode
from .ndmath import Adam, NonFiniteError, save_mlp


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlgorithmSpec:
    offline: str | None   # critic objective before the boundary, None = no offline phase
    online: str           # critic objective after it
    sampling: str         # "mixed" (config ratio), "pooled", "hybrid" or "online"


ALGORITHMS = {
    "sac": AlgorithmSpec(None, "td", "online"),
    "sac_off": AlgorithmSpec("td", "td", "pooled"),
    "hybrid": AlgorithmSpec("td", "td", "hybrid"),
    "cql": AlgorithmSpec("cql", "cql", "mixed"),
    "cql_sac": AlgorithmSpec("cql", "td", "mixed"),
    "calql": AlgorithmSpec("calql", "calql", "mixed"),
    "calql_sac": AlgorithmSpec("calql", "td", "mixed"),
    "rankq": AlgorithmSpec("rankq", "rankq", "mixed"),
    "rankq_sac": AlgorithmSpec("rankq", "td", "mixed"),
}

ABLATIONS = ("none", "double_sigma", "no_permuted", "no_chain")


@dataclass
class TrainConfig:
    algorithm: str = "rankq"
    env: str = "medium"
    dataset: str = ""
    offline_steps: int = 20000
    online_env_steps: int = 20000
    updates_per_env_step: int = 1
    batch_size: int = 256
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    grad_clip: float = 1.0
    buffer_capacity: int = 1_000_000
    mixing_ratio: float = 0.5
    eval_every: int = 5000
    offline_eval_every: int = 5000
    eval_episodes: int = 20
    seed: int = 0
    hidden: str = "256,256,256"
    actor_activation: str = "relu"
    gamma: float = 0.99
    tau: float = 0.005
    init_temperature: float = 0.1
    auto_entropy: bool = True
    temp_lr: float = 3e-4
    probe_size: int = 512
    # critic objective
    alpha: float = 5.0
    use_lagrange: bool = False
    target_action_gap: float = 0.8
    n_policy_actions: int = 10
    n_random_actions: int = 10
    cql_estimator: str = "logsumexp"
    alpha0: float = 1.0
    alpha1: float = 1.0
    sigma: float = 0.15
    ablation: str = "none"
    fail_pair: str = "random"

    @property
    def spec(self) -> AlgorithmSpec:
        return ALGORITHMS[self.algorithm]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(int(h) for h in str(self.hidden).split(",") if h.strip())

    def objective(self, kind: str) -> CriticObjectiveConfig:
        return CriticObjectiveConfig(
            kind=kind, alpha=self.alpha, use_lagrange=self.use_lagrange,
            target_action_gap=self.target_action_gap, n_policy_actions=self.n_policy_actions,
            n_random_actions=self.n_random_actions, cql_estimator=self.cql_estimator,
            alpha0=self.alpha0, alpha1=self.alpha1, sigma=self.sigma,
            double_sigma=self.ablation == "double_sigma", no_permuted=self.ablation == "no_permuted",
            no_chain=self.ablation == "no_chain", fail_pair=self.fail_pair, gamma=self.gamma)

    def errors(self) -> list[str]:
        errs = []
        if self.algorithm not in ALGORITHMS:
            errs.append(f"algorithm must be one of {sorted(ALGORITHMS)}, got {self.algorithm!r}")
        for name in ("batch_size", "updates_per_env_step", "eval_every", "offline_eval_every",
                     "eval_episodes", "buffer_capacity", "probe_size"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be positive")
        for name in ("offline_steps", "online_env_steps"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be >= 0")
        for name in ("grad_clip", "actor_lr", "critic_lr", "init_temperature", "tau"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be > 0")
        if not (self.mixing_ratio == POOLED or 0.0 <= self.mixing_ratio <= 1.0):
            errs.append("mixing_ratio must be -1 or in [0, 1]")
        if self.ablation not in ABLATIONS:
            errs.append(f"ablation must be one of {ABLATIONS}")
        try:
            if not self.hidden_sizes:
                errs.append("hidden must list at least one width")
        except ValueError:
            errs.append(f"hidden must be comma-separated integers, got {self.hidden!r}")
        if self.tau > 1:
            errs.append("tau must be <= 1")
        errs += [e for e in self.objective("rankq").errors() if "kind" not in e]
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errs))
        return self


# ---- flat key = value config files ----------------------------------------------------

def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    if typ is bool or typ == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if typ is int or typ == "int":
        try:
            return int(raw)
        except ValueError:
            try:
                f = float(raw)  # accepts 1e6
            except ValueError:
                raise ValueError(f"{name}: expected an integer, got {raw!r}") from None
            if not f.is_integer():
                raise ValueError(f"{name}: expected an integer, got {raw!r}") from None
            return int(f)
    if typ is float or typ == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{name}: expected a number, got {raw!r}") from None
    return raw


def config_keys() -> dict[str, object]:
    return {f.name: f.default for f in fields(TrainConfig)}


def _apply(cfg: TrainConfig, pairs: dict[str, str]) -> tuple[TrainConfig, list[str]]:
    types = {f.name: f.type for f in fields(TrainConfig)}
    errs, vals = [], {}
    for k, v in pairs.items():
        if k not in types:
            errs.append(f"unknown key {k!r}")
            continue
        try:
            vals[k] = _coerce(k, v, types[k])
        except ValueError as e:
            errs.append(str(e))
    return replace(cfg, **vals), errs


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    """Apply string ``key -> value`` pairs. Unknown keys and bad values are reported together."""
    cfg, errs = _apply(cfg, pairs)
    if errs:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errs))
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {i}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> TrainConfig:
    """File values, then overrides; every problem (unknown key, bad value, failed invariant) is listed at once."""
    pairs = parse_config_text(Path(path).read_text()) if path else {}
    pairs.update(overrides or {})
    cfg, errs = _apply(TrainConfig(), pairs)
    errs += cfg.errors()
    if errs:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errs))
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


# ---- run record ----------------------------------------------------------------------

RECORD_COLUMNS = (
    "phase", "step", "env_steps", "grad_steps", "success_rate", "avg_length", "critic_loss", "td_loss",
    "reg_loss", "actor_loss", "temperature", "q_mean", "dqda_max", "dqda_std", "extra_critic_calls",
    "offline_fraction", "fallback_batches",
)


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)

    def append(self, row: dict, wall: float) -> None:
        if self.rows and row["step"] < self.rows[-1]["step"]:
            raise TrainingError("run record steps must be monotone")
        self.rows.append(row)
        self.wall_times.append(wall)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in RECORD_COLUMNS])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())
        # wall time is nondeterministic, so it lives beside the record
        Path(path).with_name(Path(path).stem + "_timing.csv").write_text(
            "row,wall_time\n" + "".join(f"{i},{t:.3f}\n" for i, t in enumerate(self.wall_times)))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---- evaluation ----------------------------------------------------------------------

def evaluate(policy, env: PointMaze, n_episodes: int, seed: int, workers: int = 1) -> tuple[float, float]:
    """Deterministic-mode rollouts; mean length counts timeouts at full length."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")

    def one(i):
        e = PointMaze(env.layout, env.max_steps, env.goal_radius, env.damping, env.accel)
        tr = run_episode(e, lambda obs, state: policy.mode(obs[None])[0], np.random.default_rng([seed, i]))
        return tr.success, len(tr)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            res = list(ex.map(one, range(n_episodes)))
    else:
        res = [one(i) for i in range(n_episodes)]
    return float(np.mean([r[0] for r in res])), float(np.mean([r[1] for r in res]))


def dqda_stats(policy, critics: CriticPair, obs: np.ndarray, xi: np.ndarray) -> tuple[float, float]:
    """Element-wise max and std of |dQ/da| (min twin) at policy-sampled probe actions."""
    res = actor_loss(policy, critics, obs, 0.0, xi=xi)
    mag = np.abs(res.dqda)
    return float(mag.max()), float(mag.std())


# ---- trainer -------------------------------------------------------------------------

class Trainer:
    """Owns all mutable training state; picklable so runs can resume from a checkpoint."""

    def __init__(self, cfg: TrainConfig, dataset: OfflineDataset | None = None, env: PointMaze | None = None):
        cfg.validate()
        self.cfg = cfg
        spec = cfg.spec
        if spec.offline is None:
            dataset = None
        elif dataset is None:
            raise TrainingError(f"algorithm {cfg.algorithm!r} needs an offline dataset")
        if dataset is not None and "rankq" in (spec.offline, spec.online) and len(dataset.success_idx) == 0:
            raise TrainingError("RankQ needs success transitions, but the offline dataset has none")
        self.dataset = dataset
        self.env = env if env is not None else make_maze(cfg.env)
        obs_dim, act_dim = self.env.obs_dim, self.env.action_dim
        if dataset is not None and (dataset.obs_dim, dataset.action_dim) != (obs_dim, act_dim):
            raise TrainingError("dataset dimensions do not match the environment")
        init = seeding.stream(cfg.seed, "init")
        self.policy = SquashedGaussianPolicy(obs_dim, act_dim, cfg.hidden_sizes, init, cfg.actor_activation)
        self.critics = CriticPair(obs_dim, act_dim, cfg.hidden_sizes, init, cfg.tau)
        self.actor_opt = Adam(self.policy.net, cfg.actor_lr, cfg.grad_clip)
        self.critic_opts = [Adam(q, cfg.critic_lr, cfg.grad_clip) for q in self.critics.q]
        self.temp = EntropyTemp.create(act_dim, cfg.init_temperature, cfg.temp_lr, cfg.auto_entropy)
        uses_cql = {"cql", "calql"} & {spec.offline, spec.online}
        self.lagrange = LagrangeMultiplier(cfg.objective("cql").lagrange_lr) if cfg.use_lagrange and uses_cql \
            else None
        self.rng_batch = seeding.stream(cfg.seed, "data")
        self.rng_loss = seeding.stream(cfg.seed, "negatives")
        self.rng_env = seeding.stream(cfg.seed, "env")
        self.rng_act = seeding.stream(cfg.seed, "act")
        self.eval_seed = seeding.child_seed(cfg.seed, "eval")
        self.eval_workers = 1  # evaluation threads; results do not depend on it
        ratio = {"pooled": POOLED, "hybrid": 0.5, "online": 0.0, "mixed": cfg.mixing_ratio}[spec.sampling]
        self.sampler = MixedSampler(dataset, cfg.buffer_capacity, ratio, obs_dim, act_dim)
        probe = seeding.stream(cfg.seed, "probe")
        if dataset is not None:
            self.probe_obs = dataset.obs[probe.integers(0, len(dataset), size=cfg.probe_size)]
        else:
            self.probe_obs = None
        self.probe_xi = probe.standard_normal((cfg.probe_size, act_dim))
        self.record = RunRecord()
        self.grad_steps = 0
        self.env_steps = 0
        self.offline_done = 0
        self.phase = "offline"
        self.total_time = 0.0
        self._acc: dict[str, float] = {}
        self._acc_n = 0
        self._fallbacks = 0
        self._episode: list = []
        self._obs = None

    # -- one gradient step -------------------------------------------------------------

    def objective(self) -> CriticObjectiveConfig:
        spec = self.cfg.spec
        return self.cfg.objective(spec.offline if self.phase == "offline" else spec.online)

    def sample(self) -> Batch:
        cfg = self.cfg
        if self.phase == "offline":
            return self.sampler.sample_offline(cfg.batch_size, self.rng_batch)
        if cfg.spec.sampling == "hybrid":
            return hybrid_sample(self.sampler, cfg.batch_size, self.rng_batch)
        return self.sampler.sample_batch(cfg.batch_size, self.rng_batch)

    def update(self) -> dict[str, float]:
        batch = self.sample()
        obj = self.objective()
        calls0 = self.critics.extra_calls
        try:
            closs = critic_loss(self.critics, batch, self.policy, obj, self.rng_loss,
                                self.lagrange if obj.kind in ("cql", "calql") else None)
            for opt, g in zip(self.critic_opts, closs.grads):
                opt.step(g)
            aloss = actor_loss(self.policy, self.critics, batch.obs, self.temp.value, self.rng_loss)
            self.actor_opt.step(aloss.grads)
        except NonFiniteError as e:
            raise TrainingError(f"non-finite values at {self.phase} grad step {self.grad_steps} "
                                f"(objective {obj.kind}, last losses {self._means()}): {e}") from e
        self.temp.update(aloss.logp)
        if self.lagrange is not None and obj.kind in ("cql", "calql"):
            self.lagrange.update([closs.terms["gap_q1"], closs.terms["gap_q2"]], obj.target_action_gap)
        polyak_update(self.critics, self.cfg.tau)
        self.grad_steps += 1
        self._fallbacks += int(batch.fallback)
        reg = closs.terms.get("reg", closs.terms.get("rank", 0.0))
        stats = {"critic_loss": closs.value, "td_loss": closs.terms["td"], "reg_loss": reg,
                 "actor_loss": aloss.value, "q_mean": aloss.q_mean,
                 "extra_critic_calls": self.critics.extra_calls - calls0,
                 "offline_fraction": float(np.mean(batch.offline))}
        for k, v in stats.items():
            self._acc[k] = self._acc.get(k, 0.0) + v
        self._acc_n += 1
        return stats

    def _means(self) -> dict[str, float]:
        return {k: v / max(self._acc_n, 1) for k, v in self._acc.items()}

    # -- bookkeeping -------------------------------------------------------------------

    def _log_row(self, t0: float) -> dict:
        cfg = self.cfg
        sr, length = evaluate(self.policy, self.env, cfg.eval_episodes, self.eval_seed, self.eval_workers)
        probe = self.probe_obs
        if probe is None and len(self.sampler.online):
            probe = self.sampler.online.data["obs"][:min(cfg.probe_size, len(self.sampler.online))]
        dmax, dstd = (dqda_stats(self.policy, self.critics, probe, self.probe_xi[:len(probe)])
                      if probe is not None else (0.0, 0.0))
        m = self._means()
        step = self.grad_steps if self.phase == "offline" else self.offline_done + self.env_steps
        row = {"phase": self.phase, "step": step, "env_steps": self.env_steps, "grad_steps": self.grad_steps,
               "success_rate": sr, "avg_length": length, "temperature": self.temp.value,
               "dqda_max": dmax, "dqda_std": dstd, "fallback_batches": self._fallbacks}
        for k in ("critic_loss", "td_loss", "reg_loss", "actor_loss", "q_mean", "extra_critic_calls",
                  "offline_fraction"):
            row[k] = m.get(k, 0.0)
        self.record.append(row, self.total_time + time.perf_counter() - t0)
        self._acc, self._acc_n, self._fallbacks = {}, 0, 0
        return row

    # -- phases ------------------------------------------------------------------------

    def run_offline(self, out_dir: Path | None = None, progress=None) -> RunRecord:
        cfg = self.cfg
        if self.phase != "offline":
            return self.record
        t0 = time.perf_counter()
        n_steps = cfg.offline_steps if self.dataset is not None else 0
        while self.grad_steps < n_steps:
            self.update()
            if self.grad_steps % cfg.offline_eval_every == 0 or self.grad_steps == n_steps:
                row = self._log_row(t0)
                if progress:
                    progress(row)
                self.checkpoint(out_dir)
        self.offline_done = self.grad_steps
        self.phase = "online"
        self.total_time += time.perf_counter() - t0
        return self.record

    def run_online(self, out_dir: Path | None = None, progress=None) -> RunRecord:
        cfg = self.cfg
        if self.phase == "offline":
            self.run_offline(out_dir, progress)
        t0 = time.perf_counter()
        while self.env_steps < cfg.online_env_steps:
            self.env_step()
            if self._can_update():
                for _ in range(cfg.updates_per_env_step):
                    self.update()
            if self.env_steps % cfg.eval_every == 0 or self.env_steps == cfg.online_env_steps:
                row = self._log_row(t0)
                if progress:
                    progress(row)
                self.checkpoint(out_dir)
        self.total_time += time.perf_counter() - t0
        return self.record

    def _can_update(self) -> bool:
        return self.dataset is not None or len(self.sampler.online) > 0

    def env_step(self) -> None:
        """One stochastic environment step; finished episodes enter the online store whole."""
        if self._obs is None:
            self._obs = self.env.reset(self.rng_env)
            self._episode = []
        a, _ = self.policy.sample(self._obs[None], self.rng_act)
        a = a[0]
        nobs, r, term, trunc = self.env.step(a)
        self._episode.append((self._obs, a, r, nobs, term, trunc))
        self._obs = nobs
        self.env_steps += 1
        if term or trunc:
            self.sampler.add_trajectory(Trajectory(*[np.array(c) for c in zip(*self._episode)]), self.cfg.gamma)
            self._obs = None

    def checkpoint(self, out_dir: Path | None) -> None:
        if out_dir is None:
            return
        out_dir = Path(out_dir)
        ck = out_dir / "checkpoints" / f"step_{self.record.rows[-1]['step']:08d}"
        ck.mkdir(parents=True, exist_ok=True)
        save_mlp(ck / "actor.mlp", self.policy.net)
        for i in range(2):
            save_mlp(ck / f"q{i + 1}.mlp", self.critics.q[i])
            save_mlp(ck / f"q{i + 1}_target.mlp", self.critics.targets[i])
        tmp = out_dir / "state.pkl.tmp"
        with open(tmp, "wb") as f:
            pickle.dump(self, f)
        tmp.replace(out_dir / "state.pkl")
        self.record.write(out_dir / "run_record.csv")

    def run(self, out_dir: Path | None = None, progress=None) -> RunRecord:
        self.run_offline(out_dir, progress)
        return self.run_online(out_dir, progress)


def resume(out_dir: str | Path) -> Trainer:
    with open(Path(out_dir) / "state.pkl", "rb") as f:
        return pickle.load(f)


def run_offline(cfg: TrainConfig, dataset: OfflineDataset, env: PointMaze | None = None) -> Trainer:
    tr = Trainer(cfg, dataset, env)
    tr.run_offline()
    return tr


def run_online(cfg: TrainConfig, trainer: Trainer) -> Trainer:
    trainer.run_online()
    return trainer


def train(cfg: TrainConfig, dataset: OfflineDataset | None, env: PointMaze | None = None,
          out_dir: str | Path | None = None, progress=None) -> Trainer:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
    tr = Trainer(cfg, dataset, env)
    tr.run(out, progress)
    if out is not None:
        tr.record.write(out / "run_record.csv")
    return tr
