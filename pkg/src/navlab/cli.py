"""Command-line entry point: train, eval, calibrate, compare, demo-expert,
and report. Exit codes: 0 ok, 1 runtime failure, 2 usage error.

The EALM_NAVLAB_THREADS environment variable caps the number of parallel
evaluation lanes (results are lane-count invariant by construction)."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .config import ConfigError, dump_config, load_config
from .evalstats import (
    aggregate,
    compare_runs,
    read_episodes_csv,
    write_episodes_csv,
    write_eval_report_csv,
)
from .expert import run_expert_episode
from .gridworld import Action, MapParams, NavEnv, map_to_ascii
from .policy import PolicyConfig, load_checkpoint
from .runner import EpisodeSampler, WorldConfig, cached_map, evaluate_policy
from .segnoise import CalibrationTable, calibrate, default_noise_model, write_sweep_csv
from .trainer import MODES, train

ARROWS = {0: "^", 1: ">", 2: "v", 3: "<"}


def _lane_cap(default):
    raw = os.environ.get("EALM_NAVLAB_THREADS", "")
    try:
        cap = int(raw)
    except ValueError:
        return default
    return max(1, min(default, cap)) if cap > 0 else default


def _prepare_out(path, force):
    if os.path.exists(path) and os.listdir(path):
        if not force:
            raise RuntimeError(f"output directory {path!r} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


def _write_manifest(out_dir, config_text, seed, extra=None):
    manifest = {
        "navlab_version": __version__,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "config": config_text,
        "seed": seed,
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": sorted(extra or []),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def _write_status(out_dir, status):
    with open(os.path.join(out_dir, "status.json"), "w") as f:
        json.dump({"status": status, "end_time": time.strftime("%Y-%m-%dT%H:%M:%S")}, f)


def cmd_train(args):
    world, policy_cfg, train_cfg = load_config(args.config)
    if args.mode is not None:
        if args.mode not in MODES:
            print(f"error: unknown mode {args.mode!r}; valid modes: {', '.join(MODES)}",
                  file=sys.stderr)
            return 2
        train_cfg = dataclasses.replace(train_cfg, mode=args.mode)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    train_cfg.validate()
    _prepare_out(args.out, args.force)
    config_text = dump_config(world, policy_cfg, train_cfg)
    _write_manifest(args.out, config_text, train_cfg.seed,
                    extra=["train_log.csv", "checkpoint_final.ckpt"])
    print(f"training mode={train_cfg.mode} seed={train_cfg.seed} -> {args.out}")
    params, _, rows, _ = train(train_cfg, policy_cfg, world, out_dir=args.out, quiet=False)
    _write_status(args.out, "completed")
    last = rows[-1] if rows else {}
    print(f"done: {train_cfg.total_env_steps} env steps, final sr={last.get('sr', float('nan')):.3f}")
    return 0


def _world_for_checkpoint(args, policy_cfg: PolicyConfig):
    if args.config:
        world, cfg_policy, _ = load_config(args.config)
        if (cfg_policy.view_size != policy_cfg.view_size
                or cfg_policy.category_count != policy_cfg.category_count):
            raise RuntimeError("config world does not match checkpoint dimensions")
        return world
    return WorldConfig(
        map_params=MapParams(category_count=policy_cfg.category_count),
        view_size=policy_cfg.view_size,
    )


def cmd_eval(args):
    params, _ = load_checkpoint(args.checkpoint)
    world = _world_for_checkpoint(args, params.cfg)
    _prepare_out(args.out, args.force)
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if args.episodes <= 0:
        raise RuntimeError("--episodes must be positive")
    calibration = None
    if args.calibration_table:
        calibration = CalibrationTable.load(args.calibration_table)
    noise_model = None
    if args.mask_source == "noisy":
        noise_model = default_noise_model(params.cfg.category_count, args.noise_seed)
    sampler = EpisodeSampler(world)
    batch = _lane_cap(args.lanes)
    results = []
    for split in splits:
        specs = sampler.eval_episodes(split, args.episodes)
        for seed in seeds:
            results.extend(evaluate_policy(
                params, specs, split=split, seed=seed,
                mask_source=args.mask_source, noise_model=noise_model,
                calibration=calibration, batch_size=batch))
    episodes_path = os.path.join(args.out, "episodes.csv")
    report_path = os.path.join(args.out, "eval_report.csv")
    write_episodes_csv(episodes_path, results)
    report = aggregate(results)
    write_eval_report_csv(report_path, report)
    for split in sorted(report.splits):
        sr, sr_std = report.splits[split]["sr"]
        spl_m, _ = report.splits[split]["spl"]
        col, _ = report.splits[split]["collisions"]
        std_s = f" +- {sr_std:.3f}" if sr_std is not None else ""
        print(f"{split}: sr={sr:.3f}{std_s} spl={spl_m:.3f} collisions={col:.2f}")
    print(f"wrote {episodes_path} and {report_path}")
    return 0


def cmd_calibrate(args):
    params, _ = load_checkpoint(args.checkpoint)
    world = _world_for_checkpoint(args, params.cfg)
    _prepare_out(args.out, args.force)
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    model = default_noise_model(params.cfg.category_count, args.noise_seed)
    sampler = EpisodeSampler(world)
    episodes = sampler.calibration_episodes_by_category(args.episodes_per_category)
    table, rows = calibrate(params, episodes, model, grid,
                            success_radius=world.success_radius)
    table_path = os.path.join(args.out, "calibration.tsv")
    sweep_path = os.path.join(args.out, "sweep.csv")
    table.save(table_path)
    write_sweep_csv(sweep_path, rows)
    for cat in sorted(table.thresholds):
        print(f"category {cat}: threshold {table.thresholds[cat]:.3g}")
    print(f"wrote {table_path} and {sweep_path}")
    return 0


def cmd_compare(args):
    a = read_episodes_csv(args.a)
    b = read_episodes_csv(args.b)
    text, _ = compare_runs(a, b, metric=args.metric,
                           alternative=args.alternative, alpha=args.alpha)
    print(text)
    return 0


def cmd_demo_expert(args):
    if args.config:
        world, _, _ = load_config(args.config)
    else:
        world = WorldConfig()
    sampler = EpisodeSampler(world)
    specs = sampler.eval_episodes("seen", args.episode + 1)
    spec = specs[args.episode]
    env = NavEnv(spec, cached_map(spec.map_seed, spec.map_params))
    print(f"map seed {spec.map_seed}, goal category {spec.goal_category}, "
          f"start {spec.start_pose}")
    success, steps, actions = run_expert_episode(env)
    ascii_map = map_to_ascii(env.grid).splitlines()[1:1 + env.grid.height]
    # Replay the recorded actions on a fresh env to reconstruct the poses.
    env2 = NavEnv(spec, cached_map(spec.map_seed, spec.map_params))
    pose_trace = [env2.pose]
    for a in actions:
        if env2.done:
            break
        env2.step(a)
        pose_trace.append(env2.pose)
    for i, (pose, action) in enumerate(zip(pose_trace, [None] + list(actions))):
        rows = [list(r) for r in ascii_map]
        rows[pose.y][pose.x] = ARROWS[pose.heading]
        label = Action(action).name if action is not None else "START"
        print(f"step {i}: {label}")
        print("\n".join("".join(r) for r in rows))
        print()
        if args.short and i >= 2:
            print("... (replay truncated)")
            break
    print(f"{'SUCCESS' if success else 'FAILURE'} steps={steps}")
    return 0


def cmd_report(args):
    from .report import render_curves

    log_path = os.path.join(args.run, "train_log.csv")
    if not os.path.exists(log_path):
        raise RuntimeError(f"no train_log.csv under {args.run!r}")
    out = args.out or os.path.join(args.run, "report")
    files = render_curves(log_path, out)
    for f in files:
        print(f"wrote {f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="navlab",
                                     description="grid-world object-goal navigation lab")
    parser.add_argument("--version", action="version", version=f"navlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", default=None,
                   help=f"override training mode ({', '.join(MODES)})")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default="seen,unseen")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--mask-source", choices=("gt", "none", "noisy"), default="gt")
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--calibration-table", default=None)
    p.add_argument("--lanes", type=int, default=8)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", help="sweep per-category confidence thresholds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes-per-category", type=int, default=30)
    p.add_argument("--grid", default="0.01,0.05,0.1,0.2,0.3,0.5")
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("compare", help="one-sided Welch test between two runs")
    p.add_argument("--a", required=True, help="episodes.csv of run A")
    p.add_argument("--b", required=True, help="episodes.csv of run B")
    p.add_argument("--metric", choices=("sr", "spl", "softspl", "collisions"), default="sr")
    p.add_argument("--alternative", choices=("a_greater", "a_less"), default="a_greater")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("demo-expert", help="print an expert episode replay")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--short", action="store_true", help="truncate the replay")
    p.set_defaults(func=cmd_demo_expert)

    p = sub.add_parser("report", help="render SVG training curves")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
