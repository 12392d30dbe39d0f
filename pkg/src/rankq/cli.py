"""Command-line entry point: ``rankq <subcommand> ...``.

Errors are reported on stderr as one JSON line ``{"error": <category>, "message": ...}``
with a category-specific exit code; exit code 0 means every output was written.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import analysis, toy
from .critics import ConfigError, CriticPair
from .datastore import DatasetError, OfflineDataset, export_csv, load_dataset, save_dataset
from .envs import InvalidTaskError, LAYOUTS, ScriptedCollector, collect_trajectories, make_maze
from .ndmath import NonFiniteError, load_mlp
from .seeding import stream
from .trainer import TrainConfig, Trainer, TrainingError, config_keys, dump_config, evaluate, load_config, \
    resume

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "io": 5, "training": 6, "unsupported": 7, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _keys_epilog() -> str:
    lines = ["config keys (key = default; override with key=value):"]
    lines += [f"  {k} = {v}" for k, v in config_keys().items()]
    return "\n".join(lines)


def _toy_epilog() -> str:
    from dataclasses import fields
    lines = ["toy keys (key = default; override with key=value):"]
    lines += [f"  {f.name} = {f.default}" for f in fields(toy.ToyConfig) if f.name not in ("objective", "seed")]
    return "\n".join(lines)


def _pairs(items: list[str]) -> dict[str, str]:
    out = {}
    for it in items:
        if "=" not in it:
            raise CliError("config", f"expected key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _out_dir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError("io", f"cannot create output directory {p}: {e}") from e
    return p


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---- subcommands ----------------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    env = make_maze(args.env)
    collector = ScriptedCollector(mode=args.mode, noise=args.noise)
    kinds: list[str] = []
    trajs = collect_trajectories(env, collector, args.episodes, args.seed, kinds)
    ds = OfflineDataset(trajs, args.gamma)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(out, ds)
    except OSError as e:
        raise CliError("io", f"cannot write {out}: {e}") from e
    summary = ds.summary()
    summary["composition"] = {k: kinds.count(k) for k in sorted(set(kinds))}
    summary["path"] = str(out)
    return summary


def _load_ds(path: str) -> OfflineDataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise CliError("io", f"dataset not found: {path}") from e


def cmd_train(args) -> dict:
    out = _out_dir(args.out)
    if args.resume:
        if args.overrides or args.config:
            raise CliError("config", "--resume continues the saved run; overrides and --config are not allowed")
        if not (out / "state.pkl").exists():
            raise CliError("io", f"nothing to resume in {out}")
        tr = resume(out)
        tr.eval_workers = args.eval_workers
        tr.run(out, _progress if args.verbose else None)
        tr.record.write(out / "run_record.csv")
    else:
        overrides = _pairs(args.overrides)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        cfg = load_config(args.config, overrides)
        ds = _load_ds(cfg.dataset) if cfg.spec.offline is not None and cfg.dataset else None
        if cfg.spec.offline is not None and ds is None:
            raise CliError("config", f"algorithm {cfg.algorithm!r} needs dataset=<path to .o2o>")
        (out / "config.txt").write_text(dump_config(cfg))
        tr = Trainer(cfg, ds, make_maze(cfg.env))
        tr.eval_workers = args.eval_workers
        tr.run(out, _progress if args.verbose else None)
        tr.record.write(out / "run_record.csv")
    last = tr.record.rows[-1] if tr.record.rows else {}
    return {"run_record": str(out / "run_record.csv"), "rows": len(tr.record.rows),
            "final_success_rate": last.get("success_rate"), "env_steps": tr.env_steps,
            "grad_steps": tr.grad_steps}


def _progress(row: dict) -> None:
    print(f"[{row['phase']}] step {row['step']} SR {row['success_rate']:.2f} len {row['avg_length']:.1f} "
          f"critic {row['critic_loss']:.4f}", file=sys.stderr, flush=True)


def _checkpoints(run: Path) -> list[Path]:
    cks = sorted((run / "checkpoints").glob("step_*"))
    if not cks:
        raise CliError("io", f"no checkpoints under {run}")
    return cks


def _load_policy(ck: Path, action_dim: int):
    from .actor import SquashedGaussianPolicy
    pol = SquashedGaussianPolicy.__new__(SquashedGaussianPolicy)
    pol.net = load_mlp(ck / "actor.mlp")
    pol.obs_dim, pol.action_dim, pol._cache = pol.net.in_dim, action_dim, None
    return pol


def _load_critics(ck: Path, action_dim: int) -> CriticPair:
    pair = CriticPair.__new__(CriticPair)
    pair.q = [load_mlp(ck / f"q{i}.mlp") for i in (1, 2)]
    pair.targets = [load_mlp(ck / f"q{i}_target.mlp") for i in (1, 2)]
    pair.obs_dim, pair.action_dim = pair.q[0].in_dim - action_dim, action_dim
    pair.tau, pair.extra_calls = 0.005, 0
    return pair


def _run_config(run: Path) -> TrainConfig:
    cfg_path = run / "config.txt"
    if not cfg_path.exists():
        raise CliError("io", f"missing {cfg_path}")
    return load_config(cfg_path)


def cmd_eval(args) -> dict:
    run = Path(args.run)
    cfg = _run_config(run)
    cks = _checkpoints(run)
    ck = cks[-1] if args.checkpoint is None else run / "checkpoints" / f"step_{args.checkpoint:08d}"
    if not ck.exists():
        raise CliError("io", f"no checkpoint {ck}")
    env = make_maze(cfg.env)
    pol = _load_policy(ck, env.action_dim)
    sr, length = evaluate(pol, env, args.episodes, args.seed, args.eval_workers)
    return {"checkpoint": ck.name, "episodes": args.episodes, "success_rate": sr, "avg_length": length}


def cmd_toy(args) -> dict:
    pairs = _pairs(args.overrides)
    base = toy.ToyConfig(seed=args.seed, iters=args.iters)
    types = {f: type(getattr(base, f)) for f in base.__dataclass_fields__}
    vals = {}
    errs = []
    for k, v in pairs.items():
        if k not in types or k in ("objective", "seed"):
            errs.append(f"unknown toy key {k!r}")
            continue
        try:
            vals[k] = tuple(int(x) for x in v.split(",")) if types[k] is tuple else types[k](v) \
                if types[k] is not bool else v.lower() in ("1", "true", "yes")
        except ValueError:
            errs.append(f"{k}: cannot parse {v!r}")
    if errs:
        raise CliError("config", "; ".join(errs))
    objectives = toy.OBJECTIVES if args.objective == "all" else (args.objective,)
    out = _out_dir(args.out)
    report = {}
    peaks = {}
    for o in objectives:
        res = toy.train_toy(toy.ToyConfig(**{**base.__dict__, **vals, "objective": o}))
        files = toy.write_artifacts(res, out, svg=not args.no_svg)
        peaks[o] = res.column("dqda_max")
        report[o] = {"converged": res.converged(), "dqda_peak": float(peaks[o].max()),
                     "q_ood_final": res.trace[-1]["q_ood"], "files": sorted(str(p) for p in files.values())}
    if "cql" in peaks and "rankq" in peaks:
        k = int(np.argmax(peaks["cql"]))
        report["cql_over_rankq_at_cql_peak"] = float(peaks["cql"][k] / max(peaks["rankq"][k], 1e-12))
    return report


def cmd_analyze(args) -> dict:
    run = Path(args.run)
    cfg = _run_config(run)
    out = _out_dir(args.out)
    cks = _checkpoints(run)
    env = make_maze(cfg.env)
    probe_rng = stream(cfg.seed, "probe")
    heldout = _load_ds(args.heldout) if args.heldout else None
    src = heldout if heldout is not None else (_load_ds(cfg.dataset) if cfg.dataset else None)
    if src is None:
        raise CliError("config", "analyze needs --heldout or a run trained with a dataset")
    obs = src.obs[probe_rng.integers(0, len(src), size=cfg.probe_size)]
    xi = probe_rng.standard_normal((cfg.probe_size, env.action_dim))
    rows = []
    for ck in cks:
        crit = _load_critics(ck, env.action_dim)
        pol = _load_policy(ck, env.action_dim)
        acts, _ = pol.sample_with_noise(obs, xi)
        st = analysis.dqda_stats(crit, obs, acts)
        rows.append({"step": int(ck.name.split("_")[1]), "dqda_max": st.max, "dqda_std": st.std})
    analysis.write_rows_csv(rows, out / "dqda_stats.csv")
    report = {"dqda_stats": str(out / "dqda_stats.csv"), "checkpoints": len(cks)}
    final = _load_critics(cks[-1], env.action_dim)
    if not args.no_svg:
        steps = [r["step"] for r in rows]
        analysis.plot_series_svg({"max": (steps, [r["dqda_max"] for r in rows]),
                                  "std": (steps, [r["dqda_std"] for r in rows])},
                                 out / "dqda_stats.svg", "|dQ/da|", logy=True)
    if heldout is not None:
        succ = heldout.success_idx
        if len(succ) == 0:
            raise CliError("data", "held-out dataset has no success rows")
        acc = analysis.ranking_accuracy(final, heldout.obs[succ], heldout.actions[succ], cfg.sigma, args.seed)
        analysis.write_rows_csv([{"category": k, "accuracy": v} for k, v in acc.as_dict().items()],
                                out / "ranking_accuracy.csv")
        report["ranking_accuracy"] = acc.as_dict()
    try:
        state = env.observe(env.reset(np.random.default_rng(args.seed)))
        fld = analysis.grad_field(final, state, args.grid_res, seed=args.seed)
        paths = analysis.ascent_paths(final, analysis.ring_starts(), state=state)
        analysis.write_field_csv(fld, out / "field.csv")
        analysis.write_paths_csv(paths, out / "paths.csv")
        if not args.no_svg:
            analysis.plot_field_svg(fld, paths, out / "field.svg", "start-state Q landscape")
        report["field_fd_error"] = fld.fd_error
    except analysis.UnsupportedError as e:
        report["field"] = f"skipped: {e}"
    return report


def cmd_export_csv(args) -> dict:
    ds = _load_ds(args.dataset)
    try:
        export_csv(ds, args.out)
    except OSError as e:
        raise CliError("io", f"cannot write {args.out}: {e}") from e
    return {"csv": args.out, "rows": len(ds)}


# ---- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="rankq", description="Offline-to-online critic objectives lab.",
                                epilog=_keys_epilog(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="collect a scripted point-maze dataset", formatter_class=fmt)
    g.add_argument("--env", default="medium", help=f"{sorted(LAYOUTS)} or a layout file path")
    g.add_argument("--mode", default="play", choices=("play", "diverse"))
    g.add_argument("--episodes", type=int, default=200)
    g.add_argument("--noise", type=float, default=0.2)
    g.add_argument("--gamma", type=float, default=0.99)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="offline then online training", epilog=_keys_epilog(), formatter_class=fmt)
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.add_argument("--config", default="", help="flat key = value file; command-line overrides win")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    t.add_argument("--eval-workers", type=int, default=1)
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpointed policy", formatter_class=fmt)
    e.add_argument("--run", required=True)
    e.add_argument("--checkpoint", type=int, default=None, help="step number; default is the last")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--eval-workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    y = sub.add_parser("toy", help="critic-only study on the 2-D disc task", epilog=_toy_epilog(),
                       formatter_class=fmt)
    y.add_argument("overrides", nargs="*", metavar="key=value")
    y.add_argument("--objective", default="all", choices=("all", *toy.OBJECTIVES))
    y.add_argument("--iters", type=int, default=toy.ToyConfig.iters)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out", required=True)
    y.add_argument("--no-svg", action="store_true")
    y.set_defaults(func=cmd_toy)

    a = sub.add_parser("analyze", help="dQ/da statistics, ranking accuracies and fields for a run",
                       formatter_class=fmt)
    a.add_argument("--run", required=True)
    a.add_argument("--heldout", default="", help="held-out .o2o for ranking accuracies")
    a.add_argument("--out", required=True)
    a.add_argument("--grid-res", type=int, default=41)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--no-svg", action="store_true")
    a.set_defaults(func=cmd_analyze)

    x = sub.add_parser("export-csv", help="dump an .o2o dataset as CSV", formatter_class=fmt)
    x.add_argument("--dataset", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_csv)
    return p


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (DatasetError, InvalidTaskError)):
        return "data"
    if isinstance(exc, (TrainingError, NonFiniteError)):
        return "training"
    if isinstance(exc, analysis.UnsupportedError):
        return "unsupported"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ValueError):
        return "config"
    return "internal"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure gets a category and exit code
        cat = _category(exc)
        print(json.dumps({"error": cat, "message": str(exc)}), file=sys.stderr)
        if cat == "internal":
            traceback.print_exc()
        return EXIT_CODES[cat]
    _print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
