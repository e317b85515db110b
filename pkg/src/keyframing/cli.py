"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or input.
Log verbosity comes from ``KEYFRAMING_LOG`` (DEBUG, INFO, WARNING, ...; default INFO).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, RunConfig, desk_config, load_config, save_config

log = logging.getLogger("keyframing")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def _base_config(path) -> RunConfig:
    return load_config(path) if path else desk_config()


def cmd_train(args):
    from .checkpoint import read_arrays, restore_trainer
    from .trainer import Trainer
    cfg = _base_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    if cfg.dataset_path and not os.path.exists(cfg.dataset_path):
        raise InputError(f"dataset file not found: {cfg.dataset_path}")
    if args.resume and not os.path.exists(os.path.join(args.resume, "manifest.json")):
        raise InputError(f"checkpoint not found: {args.resume}")
    if args.resume:
        manifest, _ = read_arrays(args.resume)
        if manifest["config_hash"] != cfg.hash():
            raise InputError(f"checkpoint config hash {manifest['config_hash']} does not match "
                             f"this config ({cfg.hash()})")
    os.makedirs(args.out, exist_ok=True)
    save_config(cfg, os.path.join(args.out, "config.json"))
    trainer = Trainer(cfg)
    if args.resume:
        restore_trainer(trainer, args.resume)
        log.info("resumed at iteration %d", trainer.iteration)
    trainer.train(args.out, log_every=args.log_every)
    return EXIT_OK


def cmd_gen_dataset(args):
    from .planarenv import DatasetConfig, FPS, generate_reference_dataset, save_dataset
    from .keyframes import KeyframeConfig
    min_steps = KeyframeConfig().interval_range[1] + 1
    if args.seconds * FPS < min_steps:
        raise InputError(f"--seconds {args.seconds} is shorter than one keyframe interval "
                         f"({min_steps} frames at {FPS} fps)")
    if args.clips < 1:
        raise InputError("--clips must be at least 1")
    dcfg = DatasetConfig(clips=args.clips, seconds=args.seconds)
    ds = generate_reference_dataset(dcfg, args.joints, args.seed)
    save_dataset(ds, args.out, args.format)
    log.info("wrote %d clips (%d frames) to %s", len(ds.clips), ds.total_frames, args.out)
    return EXIT_OK


def cmd_eval(args):
    from .checkpoint import load_policy
    from .evaluation import ScenarioError, check_scenario, evaluate, format_report
    from .keyframes import load_scenario
    if not os.path.exists(os.path.join(args.ckpt, "manifest.json")):
        raise InputError(f"checkpoint not found: {args.ckpt}")
    if not os.path.exists(args.scenario):
        raise InputError(f"scenario file not found: {args.scenario}")
    cfg, policy = load_policy(args.ckpt)
    try:
        scenario = load_scenario(args.scenario, cfg.env.num_joints)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{args.scenario}: {exc}") from exc
    try:
        check_scenario(scenario, cfg)
    except ScenarioError as exc:
        raise InputError(f"{args.scenario}: {exc}") from exc
    rep = evaluate(policy, cfg, scenario, args.episodes, deterministic=args.deterministic, seed=args.seed,
                   start_yaw=args.start_yaw, export_dir=args.export)
    print(format_report(rep))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rep, fh, indent=2)
    return EXIT_OK


def cmd_experiment(args):
    from . import experiments as ex
    base = _base_config(args.config)
    if args.iterations is not None:
        base = base.replace(iterations=args.iterations)
    runner = {"sparsity": ex.sparsity_experiment, "anticipation": ex.anticipation_experiment,
              "matching": ex.matching_experiment}[args.name]
    summary = runner(args.out, base=base, seed=args.seed)
    if args.name == "anticipation":
        print(ex.format_anticipation_table(summary["table"]))
    else:
        print(json.dumps({k: v for k, v in summary.items() if k not in ("report",)}, indent=2, default=str))
    return EXIT_OK


def cmd_export_plots(args):
    from .plots import EmptyMetricsError, export_plots
    try:
        paths = export_plots(args.run, args.out)
    except (FileNotFoundError, EmptyMetricsError) as exc:
        raise InputError(str(exc)) from exc
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="keyframing", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", help="JSON run config (default: desk-scale defaults)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", metavar="CKPT", help="checkpoint directory to continue from")
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gen-dataset", help="write a synthetic reference motion dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--clips", type=int, default=24)
    g.add_argument("--seconds", type=float, default=6.0)
    g.add_argument("--joints", type=int, default=4)
    g.add_argument("--format", choices=("f32le", "csv"), default="f32le")
    g.set_defaults(func=cmd_gen_dataset)

    e = sub.add_parser("eval", help="keyframe-matching report for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scenario", required=True, help="JSON array of {t_step, x, y, yaw?, posture?}")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--deterministic", action="store_true", help="use the mean action instead of sampling")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--start-yaw", type=float, default=0.0)
    e.add_argument("--export", metavar="DIR", help="write one trajectory CSV per episode")
    e.add_argument("--json", metavar="PATH", help="also write the report as JSON")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="scripted experiment runs")
    x.add_argument("name", choices=("sparsity", "anticipation", "matching"))
    x.add_argument("--out", required=True)
    x.add_argument("--config", help="base run config (default: desk-scale defaults)")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--iterations", type=int)
    x.set_defaults(func=cmd_experiment)

    pl = sub.add_parser("export-plots", help="CSV and SVG learning curves and trajectories")
    pl.add_argument("--run", required=True)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_export_plots)
    return p


def main(argv=None):
    level = os.environ.get("KEYFRAMING_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(asctime)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
