"""Critic-only regression on the 2-D disc task, for looking at Q landscapes.

There is no state and no actor: each row is a one-step episode, so the TD
target is just the reward and the "policy" used by the conservative
objectives is uniform over the action box.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis
from .critics import ConfigError, CriticObjectiveConfig, CriticPair, UniformPolicy, critic_loss, polyak_update
from .datastore import Batch
from .envs import ToyDataset, ToyDiscTask, toy_sample_dataset
from .ndmath import Adam
from .seeding import child_seed, stream

OBJECTIVES = ("td", "cql", "calql", "rankq")
TOY_ABLATIONS = ("none", "double_sigma", "no_permuted", "no_chain")
TRACE_COLUMNS = ("iter", "loss", "td", "reg", "dqda_max", "dqda_std", "q_succ", "q_fail", "q_ood")


@dataclass
class ToyConfig:
    objective: str = "rankq"
    iters: int = 2000
    seed: int = 0
    n_succ: int = 200
    n_fail: int = 200
    radius: float = 0.5
    hidden: tuple = (64, 64)
    lr: float = 3e-4
    batch_size: int = 128
    alpha: float = 5.0
    alpha0: float = 1.0
    alpha1: float = 1.0
    sigma: float = 0.15
    ablation: str = "none"
    record_every: int = 50
    probe_size: int = 512
    grad_clip: float = 1.0
    tau: float = 0.005

    def objective_config(self) -> CriticObjectiveConfig:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.ablation not in TOY_ABLATIONS:
            raise ConfigError(f"ablation must be one of {TOY_ABLATIONS}, got {self.ablation!r}")
        flags = {k: self.ablation == k for k in TOY_ABLATIONS[1:]}
        return CriticObjectiveConfig(kind=self.objective, alpha=self.alpha, alpha0=self.alpha0, alpha1=self.alpha1,
                                     sigma=self.sigma, **flags).validate()


@dataclass
class ToyResult:
    config: ToyConfig
    task: ToyDiscTask
    data: ToyDataset
    critics: CriticPair
    trace: list[dict] = field(default_factory=list)
    snapshots: list[tuple[int, CriticPair]] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.trace])

    def paths(self, lr: float = 0.05, max_steps: int = 200) -> list[analysis.AscentPath]:
        return analysis.ascent_paths(self.critics, analysis.ring_starts(8, 0.9), lr, max_steps,
                                     self.task.is_success, state=np.zeros(0))

    def converged(self) -> int:
        return sum(p.converged for p in self.paths())

    def field(self, grid_res: int = 41) -> analysis.GradField:
        return analysis.grad_field(self.critics, np.zeros(0), grid_res, seed=self.config.seed)


def toy_batch(data: ToyDataset, idx: np.ndarray) -> Batch:
    n = len(idx)
    r = data.rewards[idx]
    empty = np.zeros((n, 0))
    return Batch(empty, data.actions[idx], r, empty.copy(), np.ones(n), np.zeros(n), r > 0, r.copy(),
                 np.ones(n, dtype=bool))


def train_toy(cfg: ToyConfig, snapshot_every: int = 0) -> ToyResult:
    """Fit a twin critic on the disc dataset with the chosen objective."""
    obj = cfg.objective_config()
    task = ToyDiscTask(cfg.radius)
    data = toy_sample_dataset(task, cfg.n_succ, cfg.n_fail, child_seed(cfg.seed, "data"))
    critics = CriticPair(0, 2, tuple(cfg.hidden), stream(cfg.seed, "init"), tau=cfg.tau)
    opts = [Adam(q, cfg.lr, cfg.grad_clip or None) for q in critics.q]
    policy = UniformPolicy(2)
    rng_batch, rng_neg = stream(cfg.seed, "batches"), stream(cfg.seed, "negatives")
    probe = stream(cfg.seed, "probe").uniform(-1.0, 1.0, size=(cfg.probe_size, 2))
    probe_obs = np.zeros((cfg.probe_size, 0))
    # off-support check points: the empty half-plane a0 < 0 outside the disc
    ood = probe[(probe[:, 0] < 0) & (np.linalg.norm(probe, axis=1) > cfg.radius)]
    succ, fail = data.success, ~data.success
    res = ToyResult(cfg, task, data, critics)
    n = len(data.rewards)
    for it in range(1, cfg.iters + 1):
        idx = rng_batch.choice(n, size=min(cfg.batch_size, n), replace=False)
        loss = critic_loss(critics, toy_batch(data, idx), policy, obj, rng_neg)
        for opt, g in zip(opts, loss.grads):
            opt.step(g)
        polyak_update(critics)
        if it % cfg.record_every == 0 or it == cfg.iters:
            st = analysis.dqda_stats(critics, probe_obs, probe)
            qd = critics.q_min(np.zeros((n, 0)), data.actions)
            q_ood = critics.q_min(np.zeros((len(ood), 0)), ood)
            res.trace.append({
                "iter": it, "loss": loss.value, "td": loss.terms.get("td", 0.0),
                "reg": loss.value - loss.terms.get("td", 0.0), "dqda_max": st.max, "dqda_std": st.std,
                "q_succ": float(qd[succ].mean()), "q_fail": float(qd[fail].mean()),
                "q_ood": float(q_ood.mean()) if len(ood) else float("nan"),
            })
        if snapshot_every and it % snapshot_every == 0:
            res.snapshots.append((it, critics.copy()))
    return res


def compare(objectives=OBJECTIVES, seeds=(0, 1, 2), **overrides) -> dict[str, list[int]]:
    """Converged ascent-path counts per objective and seed."""
    return {o: [train_toy(ToyConfig(objective=o, seed=s, **overrides)).converged() for s in seeds]
            for o in objectives}


def write_artifacts(res: ToyResult, out_dir: str | Path, svg: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = res.config.objective if res.config.ablation == "none" else f"{res.config.objective}_{res.config.ablation}"
    fld, paths = res.field(), res.paths()
    files = {"field": out / f"{tag}_field.csv", "paths": out / f"{tag}_paths.csv", "trace": out / f"{tag}_trace.csv"}
    analysis.write_field_csv(fld, files["field"])
    analysis.write_paths_csv(paths, files["paths"])
    analysis.write_rows_csv(res.trace, files["trace"])
    if svg:
        files["field_svg"] = out / f"{tag}_field.svg"
        n_conv = sum(p.converged for p in paths)
        analysis.plot_field_svg(fld, paths, files["field_svg"], f"{tag}: {n_conv}/8 converge", res.task.radius)
        files["dqda_svg"] = out / f"{tag}_dqda.svg"
        analysis.plot_series_svg({"max": (res.column("iter"), res.column("dqda_max")),
                                  "std": (res.column("iter"), res.column("dqda_std"))},
                                 files["dqda_svg"], "|dQ/da|", logy=True, title=tag)
    return files


def with_objective(cfg: ToyConfig, objective: str) -> ToyConfig:
    return replace(cfg, objective=objective)
