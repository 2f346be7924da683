"""Command-line interface: ``navlearn train|eval|replay|render-debug|gradcheck``.

Every failure prints one line ``E<code> <kind>: <message>`` on stderr and
exits with that code: 2 configuration, 3 checkpoint, 4 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, policy_config_for, resolve_env_path
from .env import BanditEnv, NavEnv
from .evaluation import evaluate, select_targets, write_records_csv, write_trajectory_csv
from .metrics import MetricWindows, average_reward, success_rate, terminal_breakdown
from .policy import PolicyParameters
from .ppo import LOG_FIELDS, DivergenceError, PPOConfig, TrainState, episode_rng, make_optimizer, train
from .render import RenderConfig, dump_raw, render_rgb, save_png
from .rollout import run_episode
from .world import EnvSpecError, RewardConfig, check_collision, load_env

log = logging.getLogger("navlearn")

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DIVERGENCE = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def _config_error(msg) -> CliError:
    return CliError(EXIT_CONFIG, "config", str(msg))


# -- construction helpers ------------------------------------------------------------

def build_env(cfg: RunConfig):
    if cfg.env_kind == "bandit":
        return BanditEnv(cfg.render)
    return NavEnv(load_env(cfg.env_path), cfg.reward, cfg.render, cfg.dt, cfg.odom_noise)


def build_policy(cfg: RunConfig, env) -> PolicyParameters:
    pcfg = policy_config_for(cfg, env.env_map.diagonal)
    init_seed = cfg.seed if cfg.init_seed is None else cfg.init_seed
    return PolicyParameters.initialize(pcfg, np.random.default_rng([init_seed, 4]))


def run_config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    d["reward"] = RewardConfig(**d["reward"])
    d["ppo"] = PPOConfig(**d["ppo"])
    render = dict(d["render"])
    render["ceiling"], render["floor"] = tuple(render["ceiling"]), tuple(render["floor"])
    d["render"] = RenderConfig(**render)
    d["windows"] = MetricWindows(**d["windows"])
    d["odom_noise"] = tuple(d["odom_noise"])
    pol = dict(d.get("policy", {}))
    if "conv" in pol:
        pol["conv"] = tuple(tuple(c) for c in pol["conv"])
    d["policy"] = pol
    return RunConfig(**d)


def _parse_floats(text: str, n: int, what: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise _config_error(f"{what} must be {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise _config_error(f"{what} must be {n} comma-separated numbers, got {text!r}")
    return vals


def _load_ckpt(path, expected=None):
    try:
        return load_checkpoint(path, expected)
    except CheckpointError as exc:
        raise CliError(EXIT_CHECKPOINT, "checkpoint", str(exc)) from None


def _env_for_checkpoint(ckpt, env_override: str | None):
    try:
        cfg = run_config_from_dict(ckpt.run_config) if ckpt.run_config else None
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CHECKPOINT, "checkpoint", f"stored run configuration unreadable: {exc}") from None
    if cfg is None:
        if env_override is None:
            raise _config_error("checkpoint carries no run configuration; pass --env")
        cfg = RunConfig(env_path="")
    if env_override is not None:
        cfg.env_path = resolve_env_path(env_override, Path.cwd())
        cfg.env_kind = "nav"
    try:
        return cfg, build_env(cfg)
    except EnvSpecError as exc:
        raise _config_error(exc) from None


# -- train -----------------------------------------------------------------------------

def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise _config_error(exc) from None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.max_episodes is not None:
        cfg.max_episodes = args.max_episodes
    if args.workers is not None:
        cfg.workers = args.workers
    try:
        env = build_env(cfg)
    except EnvSpecError as exc:
        raise _config_error(exc) from None

    out = Path(args.out or Path("runs") / Path(args.config).stem)
    ckpt_dir = out / cfg.checkpoint_dir
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    params = build_policy(cfg, env)
    optimizer = make_optimizer(params, cfg.ppo)
    state = TrainState()
    if args.resume:
        ckpt = _load_ckpt(args.resume, params.config)
        params = ckpt.params
        optimizer = make_optimizer(params, cfg.ppo)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        state.episode, state.updates = ckpt.episode, ckpt.updates
        if ckpt.rng_state is not None:
            state.target_rng = np.random.default_rng()
            state.target_rng.bit_generator.state = ckpt.rng_state
        state.train_records = [r for r in ckpt.records if not r.is_test]
        state.test_records = [r for r in ckpt.records if r.is_test]

    run_dict = cfg.to_dict()
    last_good = {"path": None}

    def save(path, st: TrainState):
        save_checkpoint(path, params, optimizer.state_dict(), run_config=run_dict, episode=st.episode,
                        updates=st.updates, rng_state=st.target_rng.bit_generator.state,
                        records=sorted(st.train_records + st.test_records, key=lambda r: r.episode))
        last_good["path"] = str(path)

    log_path = out / "train_log.csv"
    mode = "a" if args.resume and log_path.exists() else "w"
    fh = open(log_path, mode, newline="")
    writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
    if mode == "w":
        writer.writeheader()
    t0 = time.time()

    def on_episode(row):
        writer.writerow(row)
        if args.progress and row["episode"] % args.progress == 0:
            rates = [f"{float(row[k]):.3f}" if row[k] else "-" for k in ("train_success", "test_success")]
            print(f"episode {row['episode']}  train={rates[0]}  test={rates[1]}  {time.time() - t0:.0f}s",
                  flush=True)

    def on_update(st, stats):
        if cfg.checkpoint_every and st.updates % cfg.checkpoint_every == 0:
            save(ckpt_dir / f"update_{st.updates:06d}.nav", st)

    def on_early_stop(st, rate):
        save(ckpt_dir / "best.nav", st)

    try:
        result = train(env, params, cfg.ppo, cfg.seed, max_episodes=cfg.max_episodes, windows=cfg.windows,
                       optimizer=optimizer, state=state, early_stop=cfg.early_stop, workers=cfg.workers,
                       on_episode=on_episode, on_update=on_update, on_early_stop=on_early_stop)
    except DivergenceError as exc:
        fh.close()
        raise CliError(EXIT_DIVERGENCE, "divergence",
                       f"{exc}; last good checkpoint: {last_good['path'] or 'none'}") from None
    finally:
        if not fh.closed:
            fh.close()

    save(ckpt_dir / "final.nav", result.state)
    rows = _read_log(log_path)
    from .plotting import plot_training_curves

    plot_training_curves(rows, out / "curves.png", cfg.windows.train, cfg.windows.test)
    summary = {
        "episodes": result.state.episode,
        "updates": result.state.updates,
        "stopped_early": result.stopped_early,
        "early_stop_rate": result.early_stop_rate,
        "wall_seconds": round(time.time() - t0, 1),
    }
    if result.state.train_records:
        summary["train_success"] = success_rate(result.state.train_records, cfg.windows.train)[0]
    if result.state.test_records:
        summary["test_success"] = success_rate(result.state.test_records, cfg.windows.test)[0]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"trained {summary['episodes']} episodes, {summary['updates']} updates; "
          f"early stop: {result.stopped_early}")
    print(f"log: {log_path}\ncheckpoint: {ckpt_dir / 'final.nav'}\ncurves: {out / 'curves.png'}")
    return EXIT_OK


def _read_log(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- eval ------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    cfg, env = _env_for_checkpoint(ckpt, args.env)
    _check_architecture(ckpt, cfg, env)
    selectors = ["train", "test"] if args.selector == "both" else [args.selector]
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    before = ckpt.params.digest()
    all_records = []
    for sel in selectors:
        try:
            targets = select_targets(env.env_map, sel)
        except ValueError as exc:
            raise _config_error(exc) from None
        records = evaluate(ckpt.params, env, targets, args.n, args.seed, trajectories=bool(args.trajectories))
        rate, _ = success_rate(records, len(records))
        avg, _ = average_reward(records, len(records))
        breakdown = " ".join(f"{k}={v}" for k, v in terminal_breakdown(records).items())
        print(f"{sel}: episodes={len(records)} success_rate={rate:.4f} average_reward={avg:.4f} {breakdown}")
        if out:
            write_records_csv(records, out / f"eval_{sel}.csv")
            if args.trajectories:
                from .plotting import plot_trajectory

                for r in records[: args.trajectories]:
                    stem = out / f"trajectory_{sel}_{r.episode:04d}"
                    write_trajectory_csv(r, stem.with_suffix(".csv"))
                    plot_trajectory(env.env_map, r.trajectory, r.target, stem.with_suffix(".png"),
                                    title=f"{sel} target {r.target}: {r.terminal.value}")
        all_records += records
    assert ckpt.params.digest() == before
    return EXIT_OK


def _check_architecture(ckpt, cfg: RunConfig, env) -> None:
    shape = (ckpt.params.config.image_height, ckpt.params.config.image_width)
    if shape != (env.render_cfg.height, env.render_cfg.width):
        raise CliError(EXIT_CHECKPOINT, "checkpoint",
                       f"checkpoint expects {shape[1]}x{shape[0]} images, environment renders "
                       f"{env.render_cfg.width}x{env.render_cfg.height}")


# -- replay ----------------------------------------------------------------------------

def cmd_replay(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    cfg, env = _env_for_checkpoint(ckpt, args.env)
    _check_architecture(ckpt, cfg, env)
    seed = cfg.seed if args.seed is None else args.seed
    logged = None
    if args.log:
        rows = [r for r in _read_log(args.log) if int(r["episode"]) == args.episode]
        if not rows:
            raise _config_error(f"episode {args.episode} not found in {args.log}")
        logged = rows[0]
        target = (float(logged["target_x"]), float(logged["target_y"]))
        is_test = bool(int(logged["is_test"]))
    elif args.target:
        target = _parse_floats(args.target, 2, "--target")
        is_test = tuple(target) in {tuple(t) for t in env.env_map.test_targets}
    else:
        raise _config_error("replay needs --target or --log")
    greedy = args.greedy or (is_test and cfg.ppo.greedy_test_episodes)
    result = run_episode(env, ckpt.params, target, episode_rng(seed, args.episode), greedy=greedy,
                         trajectory=True, episode=args.episode, is_test=is_test)
    rec = result.record
    print(f"episode {rec.episode}: target={rec.target} terminal={rec.terminal.value} "
          f"steps={rec.steps} total_reward={rec.total_reward!r}")
    if logged is not None:
        same = (rec.steps == int(logged["steps"]) and repr(float(rec.total_reward)) == logged["total_reward"]
                and rec.terminal.value == logged["terminal"])
        print(f"matches log: {same}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = out / f"replay_{rec.episode:06d}"
        write_trajectory_csv(rec, stem.with_suffix(".csv"))
        from .plotting import plot_trajectory

        plot_trajectory(env.env_map, rec.trajectory, rec.target, stem.with_suffix(".png"),
                        title=f"episode {rec.episode}: {rec.terminal.value}")
    return EXIT_OK


# -- render-debug ------------------------------------------------------------------------

def cmd_render_debug(args) -> int:
    render_cfg = RenderConfig()
    if args.config:
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            raise _config_error(exc) from None
        render_cfg = cfg.render
        env_path = args.env or cfg.env_path
    elif args.env:
        env_path = args.env
    else:
        raise _config_error("render-debug needs --env or --config")
    try:
        env_map = load_env(resolve_env_path(env_path, Path.cwd()))
    except (EnvSpecError, ConfigError) as exc:
        raise _config_error(exc) from None
    pose = env_map.start_pose if args.pose is None else _parse_floats(args.pose, 3, "--pose")
    if not all(math.isfinite(v) for v in pose):
        raise _config_error(f"invalid pose {pose}")
    if check_collision(env_map, pose):
        print(f"warning: pose {pose} collides with the map; rendering anyway", file=sys.stderr)
    image = render_rgb(env_map, pose, render_cfg)
    save_png(image, args.out, scale=args.scale)
    if args.raw:
        dump_raw(image, args.raw)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    t0 = time.time()
    results = run_all(args.trials, args.seed)
    ok = True
    for name, err in results.items():
        passed = err < args.tolerance
        ok &= passed
        print(f"{name:28s} max_rel_error={err:.3e} {'PASS' if passed else 'FAIL'}")
    print(f"{args.trials} trials per layer in {time.time() - t0:.1f}s")
    return EXIT_OK if ok else 1


# -- entry point -----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors follow the one-line ``E<code>`` convention too."""

    def error(self, message):
        print(f"E{EXIT_CONFIG} usage: {self.prog}: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="navlearn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy with PPO")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-episodes", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--out", help="output directory (default runs/<config name>)")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--progress", type=int, default=0, metavar="N", help="print progress every N episodes")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with mean actions")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", help="override the environment stored in the checkpoint")
    e.add_argument("--selector", choices=("train", "test", "all", "both"), default="both")
    e.add_argument("-n", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--trajectories", type=int, default=0, metavar="K", help="save the first K trajectories")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="re-run one logged episode from its seed")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--episode", type=int, required=True)
    r.add_argument("--target", help="x,y")
    r.add_argument("--log", help="training log to read the target from")
    r.add_argument("--seed", type=int)
    r.add_argument("--env")
    r.add_argument("--greedy", action="store_true")
    r.add_argument("--out")
    r.set_defaults(func=cmd_replay)

    d = sub.add_parser("render-debug", help="write the camera image at a pose as PNG")
    d.add_argument("--env")
    d.add_argument("--config")
    d.add_argument("--pose", help="x,y,heading (default: start pose)")
    d.add_argument("--out", required=True)
    d.add_argument("--raw", help="also dump the raw observation bytes")
    d.add_argument("--scale", type=int, default=8)
    d.set_defaults(func=cmd_render_debug)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"E{exc.code} {exc.kind}: {exc}".replace("\n", " "), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
