"""Operator entry point: `guimem <group> <command> [flags]`.

Groups: flywheel (pool growth), memory (bank building and encoder
training), agent (single episodes), eval (fits and sweeps). Exit codes:
0 success, 2 configuration error, 3 pipeline error; failures also print a
single machine-readable JSON line on stderr. Precedence: defaults, then
flags, then --config file values.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .agent import MemoryMode, MemorySources, ScriptedPolicy, ToyLmPolicy, \
    run_episode
from .backbone import FrozenBackbone
from .bank import build_memory_bank, load_bank, save_bank
from .core import EpisodeConfig
from .encoder import EncoderConfig, init_encoder_params
from .errors import GuimemError
from .evalkit import fit_cubic_logk, fit_log_linear, memory_benefit_sweep
from .flywheel import FlywheelConfig, make_seed_pool, run_iteration
from .gateway import CHAT_API_KEY_VAR, CHAT_BASE_URL_VAR, SEARCH_API_KEY_VAR
from .mockstack import make_mock_clients
from .retrieval import DEFAULT_DIM, FeatureHashEmbedder
from .simenv import SimAnnotator, SimWorld, load_world, solve_bfs
from .store import MediaStore, load_pool, save_pool
from .training import build_training_set, train
from .util import record_line, stable_digest


class ConfigError(Exception):
    pass


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(record_line({"error": kind, "message": message}) + "\n")
    return code


def _apply_config_file(args: argparse.Namespace) -> None:
    """--config JSON values override flags (which override defaults)."""
    path = getattr(args, "config", None)
    if not path:
        return
    try:
        overrides = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigError(f"config key {key!r} is not a flag of this command")
        setattr(args, attr, value)


def _write_run_manifest(out: Path, args: argparse.Namespace,
                        artifacts: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "kind": "run_manifest", "version": __version__,
        "command": args.command, "subcommand": args.subcommand,
        "seed": getattr(args, "seed", None),
        "inputs": {k: str(v) for k, v in vars(args).items()
                   if k not in ("command", "subcommand", "func") and v is not None},
        "artifacts": artifacts,
    }
    (out / "run_manifest.json").write_text(record_line(record) + "\n",
                                           encoding="utf-8")


# --- flywheel ------------------------------------------------------------------

def cmd_flywheel_run(args) -> int:
    pool_dir = Path(args.pool)
    out = Path(args.out) if args.out else pool_dir
    if args.live:
        missing = [v for v in (CHAT_API_KEY_VAR, CHAT_BASE_URL_VAR,
                               SEARCH_API_KEY_VAR) if not os.environ.get(v)]
        if missing:
            raise ConfigError(f"--live requires env vars: {', '.join(missing)}")
        raise ConfigError(
            "--live additionally needs a browser adapter wired in "
            "programmatically; the bundled stack is --mock only")

    media = MediaStore(out / "media")
    if (pool_dir / "pool.manifest").exists():
        state, pool_media = load_pool(pool_dir)
        media.fallbacks.extend(pool_media.fallbacks)
        media.add_fallback(pool_media.root)
    else:
        state = make_seed_pool()
    clients = make_mock_clients(media, seed=args.seed)
    cfg = FlywheelConfig(seed=args.seed,
                         queries_per_iteration=args.queries_per_iteration,
                         results_per_query=args.results_per_query,
                         tasks_per_env=args.tasks_per_env)
    artifacts: dict[str, str] = {}
    for i in range(args.iterations):
        state, report = run_iteration(state, clients, cfg)
        report_path = out / f"iteration_{report.iteration:04d}.report"
        report.save(report_path)
        artifacts[report_path.name] = stable_digest(report_path.read_bytes())
        sys.stdout.write(report.to_records()[0] + "\n")
    digest = save_pool(state, pool_dir, media)
    artifacts["pool.manifest"] = digest
    _write_run_manifest(out, args, artifacts)
    sys.stdout.write(record_line({"kind": "pool_saved", "digest": digest,
                                  "tasks": len(state.tasks),
                                  "envs": len(state.envs),
                                  "trajs": len(state.trajs)}) + "\n")
    return 0


# --- memory ----------------------------------------------------------------------

def cmd_memory_build(args) -> int:
    state, media = load_pool(Path(args.pool))
    embedder = FeatureHashEmbedder(dim=args.dim, seed=args.seed)
    backbone = FrozenBackbone()
    enc_cfg = EncoderConfig()
    params = init_encoder_params(enc_cfg, seed=args.seed)
    bank = build_memory_bank(state, media, embedder, backbone, enc_cfg, params)
    bank_path = Path(args.bank)
    bank_path.parent.mkdir(parents=True, exist_ok=True)
    index_path = Path(args.index) if args.index else None
    save_bank(bank, bank_path, index_path, dim=args.dim)
    sys.stdout.write(record_line({
        "kind": "bank_saved", "items": len(bank), "bank": str(bank_path),
        "index": str(index_path or f"{bank_path}.cmix")}) + "\n")
    return 0


def cmd_memory_train(args) -> int:
    state, media = load_pool(Path(args.pool))
    out = Path(args.out) if args.out else Path(args.pool) / "training"
    out.mkdir(parents=True, exist_ok=True)
    embedder = FeatureHashEmbedder(dim=args.dim, seed=args.seed)
    backbone = FrozenBackbone()
    enc_cfg = EncoderConfig()
    params = init_encoder_params(enc_cfg, seed=args.seed)
    instances = build_training_set(state, embedder, backbone, media,
                                   limit=args.instances)
    result = train(instances, enc_cfg, backbone, params, steps=args.steps,
                   batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    np.savez(out / "encoder_params.npz", **result.params)
    curve = "\n".join(f"{i},{loss:.6f}" for i, loss in
                      enumerate(result.step_losses))
    (out / "loss_curve.csv").write_text("step,loss\n" + curve + "\n",
                                        encoding="utf-8")
    _write_run_manifest(out, args, {
        "encoder_params.npz": stable_digest((out / "encoder_params.npz").read_bytes()),
        "loss_curve.csv": stable_digest((out / "loss_curve.csv").read_bytes()),
    })
    sys.stdout.write(record_line({
        "kind": "train_done", "instances": len(instances),
        "initial_loss": f"{result.initial_loss:.6f}",
        "final_loss": f"{result.final_loss:.6f}",
        "trainable_fraction": f"{result.trainable_fraction:.6f}"}) + "\n")
    return 0


# --- agent -----------------------------------------------------------------------

def cmd_agent_run(args) -> int:
    world = load_world(Path(args.world))
    if args.task not in world.tasks:
        raise ConfigError(f"task {args.task!r} not in world "
                          f"{sorted(world.tasks)}")
    out = Path(args.out) if args.out else None
    media = MediaStore(out / "media" if out else
                       Path(args.world).parent / "media")
    env = SimWorld(world, media, env_id=world.id)
    mode = MemoryMode(args.mode)

    memory = None
    if args.bank:
        bank = load_bank(Path(args.bank))
        items = bank.items()
        dim = items[0].key.vector.shape[0] if items else DEFAULT_DIM
        index = bank.build_index(dim)
        pool = None
        if args.pool:
            pool, pool_media = load_pool(Path(args.pool))
            media.add_fallback(pool_media.root)
            for fb in pool_media.fallbacks:
                media.add_fallback(fb)
        memory = MemorySources(embedder=FeatureHashEmbedder(dim=dim, seed=args.seed),
                               index=index, bank=bank, pool=pool, k=args.k)
    elif mode is not MemoryMode.NONE:
        memory = None  # behaves as mode none via empty injection

    sim_task = world.tasks[args.task]
    from .core import Difficulty, Provenance, TaskQuery
    task = TaskQuery(id=args.task, env_id=world.id, text=sim_task.text,
                     expected_outcome=sim_task.expected_outcome,
                     difficulty=Difficulty.MEDIUM,
                     provenance=Provenance.SYNTHESIZED, category=world.category)
    if args.policy == "oracle":
        plan = solve_bfs(world, sim_task)
        if plan is None:
            raise ConfigError(f"task {args.task} unreachable; no oracle plan")
        policy = ScriptedPolicy(plan)
    else:
        policy = ToyLmPolicy(FrozenBackbone())

    result = run_episode(env, task, policy, mode, media,
                         cfg=EpisodeConfig(t_max=args.t_max),
                         memory=memory, annotator=SimAnnotator(env),
                         traj_id=f"cli-{args.task}")
    sys.stdout.write(record_line({
        "kind": "episode_result", "task": args.task,
        "termination": result.termination.value,
        "steps": len(result.trajectory.steps),
        "actions": [a for a in
                    (step.action.kind.value for step in result.trajectory.steps)],
        "mean_latency_s": f"{float(np.mean(result.step_latency_s)):.6f}",
        "goal_reached": env.goal_check(),
        "incidents": list(result.incidents)}) + "\n")
    return 0


# --- eval ------------------------------------------------------------------------

def _read_points(path: Path) -> list[tuple[float, float]]:
    points = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ConfigError(f"bad points line: {line!r}")
        points.append((float(parts[0]), float(parts[1])))
    return points


def cmd_eval_fit(args) -> int:
    points = _read_points(Path(args.points))
    fit = (fit_log_linear if args.kind == "log_linear" else fit_cubic_logk)(points)
    sys.stdout.write(record_line({
        "kind": "fit", "fit_kind": fit.kind,
        "coefficients": [f"{c:.9f}" for c in fit.coefficients],
        "residual": f"{fit.residual:.9f}", "n_points": fit.n_points}) + "\n")
    return 0


def cmd_eval_sweep(args) -> int:
    family_dir = Path(args.world_family)
    world_files = sorted(family_dir.glob("*.world"))
    if not world_files:
        raise ConfigError(f"no .world files under {family_dir}")
    worlds = [load_world(p) for p in world_files]
    out = Path(args.out) if args.out else family_dir
    media = MediaStore(out / "media")
    bank_sizes = tuple(int(x) for x in args.bank_sizes.split(","))
    ks = tuple(int(x) for x in args.k.split(","))
    result = memory_benefit_sweep(worlds, media, bank_sizes=bank_sizes, ks=ks,
                                  episodes_per_cell=args.episodes,
                                  seed=args.seed)
    lines = result.to_records()
    for k in ks:
        points = [(size, result.rate_of("continuous", size, k))
                  for size in bank_sizes]
        if len(set(size for size, _ in points)) >= 2:
            fit = fit_log_linear(points)
            lines.append(record_line({
                "kind": "fit", "fit_kind": fit.kind, "k": k,
                "coefficients": [f"{c:.9f}" for c in fit.coefficients],
                "residual": f"{fit.residual:.9f}", "n_points": fit.n_points}))
    text = "\n".join(lines) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    _write_run_manifest(out, args, {
        "sweep_report.txt": stable_digest(text.encode("utf-8"))})
    return 0


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guimem",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    groups = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        p.add_argument("--config", default=None,
                       help="JSON file whose values override flags")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker hint; 1 keeps runs reproducible")

    fly = groups.add_parser("flywheel").add_subparsers(dest="subcommand",
                                                       required=True)
    p = fly.add_parser("run", help="grow the pools for N iterations")
    p.add_argument("--pool", required=True)
    p.add_argument("--iterations", type=int, default=1)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--mock", dest="live", action="store_false", default=False)
    mode.add_argument("--live", dest="live", action="store_true")
    p.add_argument("--queries-per-iteration", type=int, default=5)
    p.add_argument("--results-per-query", type=int, default=20)
    p.add_argument("--tasks-per-env", type=int, default=10)
    common(p)
    p.set_defaults(func=cmd_flywheel_run)

    mem = groups.add_parser("memory").add_subparsers(dest="subcommand",
                                                     required=True)
    p = mem.add_parser("build", help="encode pooled trajectories into a bank")
    p.add_argument("--pool", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--index", default=None)
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    common(p)
    p.set_defaults(func=cmd_memory_build)

    p = mem.add_parser("train", help="train the encoder on pooled steps")
    p.add_argument("--pool", required=True)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--dim", type=int, default=64)
    common(p)
    p.set_defaults(func=cmd_memory_train)

    ag = groups.add_parser("agent").add_subparsers(dest="subcommand",
                                                   required=True)
    p = ag.add_parser("run", help="run one episode in a sim world")
    p.add_argument("--world", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--mode", choices=[m.value for m in MemoryMode],
                   default="none")
    p.add_argument("--bank", default=None)
    p.add_argument("--pool", default=None)
    p.add_argument("--policy", choices=["oracle", "toy-lm"], default="oracle")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--t-max", type=int, default=15)
    common(p)
    p.set_defaults(func=cmd_agent_run)

    ev = groups.add_parser("eval").add_subparsers(dest="subcommand",
                                                  required=True)
    p = ev.add_parser("fit", help="scaling-law fit from a points file")
    p.add_argument("--kind", choices=["log_linear", "cubic_logk"],
                   required=True)
    p.add_argument("--points", required=True)
    common(p)
    p.set_defaults(func=cmd_eval_fit)

    p = ev.add_parser("sweep", help="success-rate grid over memory banks")
    p.add_argument("--world-family", required=True)
    p.add_argument("--bank-sizes", default="10,100,1000")
    p.add_argument("--k", default="3")
    p.add_argument("--episodes", type=int, default=100)
    common(p)
    p.set_defaults(func=cmd_eval_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args)
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except GuimemError as exc:
        return _fail(type(exc).__name__, str(exc), 3)
    except OSError as exc:
        return _fail("io", str(exc), 3)


if __name__ == "__main__":
    sys.exit(main())
