"""Scripted experiment runners: keyframe matching, sparsity robustness and goal anticipation.

Training runs are cached under ``<runs_dir>/<config hash>``; a finished run with the
same hash is reused, an unfinished one is resumed from its last checkpoint.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time

import numpy as np

from .checkpoint import load_policy, restore_trainer
from .config import RunConfig, desk_config, save_config
from .evaluation import evaluate, heldout_scenarios, report, run_episodes
from .keyframes import Keyframe, KeyframeSet
from .planarenv import FPS
from .trainer import Trainer, build_dataset

log = logging.getLogger(__name__)

HORIZONS = ([25, 50], [50, 75], [75, 100])
METHODS = ("multi_critic", "single_critic")
FINAL_WINDOW = 20

# Two-keyframe scenarios; the robot starts at the origin facing +y.
ANTICIPATION_START_YAW = math.pi / 2
ANTICIPATION_SCENARIOS = {
    "straight": ((50, (0.0, 1.0)), (75, (0.0, 2.0))),
    "turn": ((50, (0.0, 1.0)), (75, (1.0, 1.5))),
    "turn_slow": ((50, (0.0, 1.0)), (100, (1.0, 1.5))),
}


def anticipation_scenario(name) -> KeyframeSet:
    return KeyframeSet([Keyframe(step, position=np.array(pos)) for step, pos in ANTICIPATION_SCENARIOS[name]])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_metrics(run_dir):
    with open(os.path.join(run_dir, "metrics.jsonl")) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _truncate_metrics(path, iteration):
    if not os.path.exists(path):
        return
    with open(path) as fh:
        keep = [line for line in fh if line.strip() and json.loads(line)["iteration"] <= iteration]
    with open(path, "w") as fh:
        fh.writelines(keep)


def run_training(cfg: RunConfig, runs_dir, label=None):
    """Train ``cfg`` (or reuse a cached run); returns the run directory."""
    run_dir = os.path.join(runs_dir, cfg.hash())
    done_path = os.path.join(run_dir, "done.json")
    if os.path.exists(done_path):
        log.info("reusing finished run %s (%s)", run_dir, label or "")
        return run_dir
    os.makedirs(run_dir, exist_ok=True)
    save_config(cfg, os.path.join(run_dir, "config.json"))
    trainer = Trainer(cfg)
    ckpt = os.path.join(run_dir, "checkpoint")
    metrics = os.path.join(run_dir, "metrics.jsonl")
    if os.path.exists(os.path.join(ckpt, "manifest.json")):
        restore_trainer(trainer, ckpt)
        log.info("resuming %s at iteration %d", run_dir, trainer.iteration)
    elif os.path.exists(metrics):
        os.remove(metrics)
    _truncate_metrics(metrics, trainer.iteration)
    log.info("training %s (%s): %d iterations", run_dir, label or "", cfg.iterations)
    t0 = time.time()
    trainer.train(run_dir)
    _write_json(done_path, {"config_hash": cfg.hash(), "iterations": trainer.iteration,
                            "label": label, "seconds": time.time() - t0})
    return run_dir


def final_value(records, key, window=FINAL_WINDOW):
    vals = [r[key] for r in records if r.get(key) is not None]
    if not vals:
        return None
    return float(np.mean(vals[-window:]))


def relative_spread(values):
    if any(x is None for x in values):
        return None
    v = np.asarray(values, dtype=np.float64)
    return float((v.max() - v.min()) / v.mean())


def rise_iteration(records, key, fraction=0.5, reference=None):
    """First iteration whose trailing-window mean reaches ``fraction`` of ``reference``."""
    vals = np.array([r[key] if r.get(key) is not None else np.nan for r in records])
    if reference is None or reference <= 0:
        return None
    for i in range(len(vals)):
        w = vals[max(0, i - FINAL_WINDOW + 1):i + 1]
        w = w[~np.isnan(w)]
        if w.size and w.mean() >= fraction * reference:
            return int(records[i]["iteration"])
    return None


# ------------------------------------------------------------------ matching

def matching_config(base=None, seed=0):
    cfg = base or desk_config()
    return cfg.replace(**{"seed": seed, "keyframes.components": ["position", "yaw"],
                          "keyframes.interval_range": list(HORIZONS[0]), "algo.method": "multi_critic"})


def matching_experiment(out_dir, base=None, seed=0, episodes=20, eval_seed=12345):
    """Train with position+yaw goals, then evaluate on held-out sampled scenarios."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = matching_config(base, seed)
    run_dir = run_training(cfg, os.path.join(out_dir, "runs"), "matching")
    _, policy = load_policy(os.path.join(run_dir, "checkpoint"))
    dataset = build_dataset(cfg)
    scenarios = heldout_scenarios(cfg, dataset, episodes, eval_seed)
    raw = run_episodes(policy, cfg, scenarios, deterministic=True, seed=eval_seed)
    rep = report(raw, scenarios)
    summary = {
        "protocol": {"experiment": "matching", "seed": seed, "eval_seed": eval_seed, "episodes": episodes,
                     "config_hash": cfg.hash(), "iterations": cfg.iterations, "num_envs": cfg.algo.num_envs,
                     "deterministic_actions": True},
        "run_dir": run_dir,
        "report": rep,
        "mean_position_error_m": rep["overall"]["distance_m"]["mean"],
        "mean_yaw_error_deg": rep["overall"]["yaw_deg"]["mean"],
    }
    _write_json(os.path.join(out_dir, "matching_summary.json"), summary)
    return summary


# ------------------------------------------------------------------ sparsity

def sparsity_configs(base=None, seed=0, horizons=HORIZONS, methods=METHODS):
    base = base or desk_config()
    out = {}
    for m in methods:
        for h in horizons:
            over = {"seed": seed, "algo.method": m, "keyframes.interval_range": list(h)}
            # long horizons need reference clips that cover every keyframe plus the trailing second
            span = base.keyframes.max_keyframes * h[1]
            if base.dataset.seconds * FPS < span + base.keyframes.mask_after_steps:
                over["dataset.seconds"] = 2.0 * span / FPS
            out[(m, tuple(h))] = base.replace(**over)
    return out


def sparsity_experiment(out_dir, base=None, seed=0, horizons=HORIZONS, methods=METHODS):
    """Single- vs multi-critic across keyframe horizon ranges with weights frozen from the first range."""
    os.makedirs(out_dir, exist_ok=True)
    cfgs = sparsity_configs(base, seed, horizons, methods)
    runs, curves = {}, {}
    for (m, h), cfg in cfgs.items():
        name = f"{m}_{h[0]}_{h[1]}"
        run_dir = run_training(cfg, os.path.join(out_dir, "runs"), name)
        recs = read_metrics(run_dir)
        curves[name] = recs
        runs[name] = {"method": m, "horizon": list(h), "run_dir": run_dir, "config_hash": cfg.hash(),
                      "final_goal_reward": final_value(recs, "reward_goal"),
                      "final_goal_position_error": final_value(recs, "goal_position_error")}
    per_method = {}
    for m in methods:
        names = [f"{m}_{h[0]}_{h[1]}" for h in horizons]
        finals = [runs[n]["final_goal_reward"] for n in names]
        ref = finals[0]
        per_method[m] = {
            "final_goal_reward": dict(zip(names, finals)),
            "relative_spread": relative_spread(finals),
            "ratio_to_first_horizon": {n: (f / ref if f is not None and ref else None) for n, f in zip(names, finals)},
            "rise_iteration_50pct": {n: rise_iteration(curves[n], "reward_goal", 0.5, runs[n]["final_goal_reward"])
                                     for n in names},
        }
    base_cfg = next(iter(cfgs.values()))
    summary = {
        "protocol": {"experiment": "sparsity", "seed": seed, "horizons": [list(h) for h in horizons],
                     "methods": list(methods), "iterations": base_cfg.iterations,
                     "num_envs": base_cfg.algo.num_envs, "metric": f"reward_goal mean of last {FINAL_WINDOW} iterations",
                     "advantage_weights": base_cfg.algo.advantage_weights,
                     "reward_weights": base_cfg.algo.reward_weights},
        "runs": runs,
        "methods": per_method,
    }
    _write_json(os.path.join(out_dir, "sparsity_summary.json"), summary)
    write_curves_csv(os.path.join(out_dir, "sparsity_curves.csv"), curves, "reward_goal")
    return summary


def write_curves_csv(path, curves, key):
    names = sorted(curves)
    n = max(len(c) for c in curves.values())
    with open(path, "w") as fh:
        fh.write(",".join(["iteration"] + names) + "\n")
        for i in range(n):
            row = [str(i + 1)]
            for name in names:
                c = curves[name]
                v = c[i].get(key) if i < len(c) else None
                row.append("" if v is None else f"{v:.6g}")
            fh.write(",".join(row) + "\n")


# -------------------------------------------------------------- anticipation

def anticipation_configs(base=None, seed=0):
    base = base or desk_config()
    common = {"seed": seed, "keyframes.components": ["position"], "algo.method": "multi_critic"}
    return {"all_goals": base.replace(**common, **{"keyframes.next_goal_only": False}),
            "next_goal": base.replace(**common, **{"keyframes.next_goal_only": True})}


def anticipation_experiment(out_dir, base=None, seed=0, episodes=20, eval_seed=2024):
    """Policies seeing all goals vs only the next goal, on two-keyframe scenarios."""
    os.makedirs(out_dir, exist_ok=True)
    table = {"first_goal": {}, "second_goal": {}}
    runs = {}
    for variant, cfg in anticipation_configs(base, seed).items():
        run_dir = run_training(cfg, os.path.join(out_dir, "runs"), f"anticipation_{variant}")
        runs[variant] = {"run_dir": run_dir, "config_hash": cfg.hash()}
        _, policy = load_policy(os.path.join(run_dir, "checkpoint"))
        for goal in table:
            table[goal].setdefault(variant, {})
        for name in ANTICIPATION_SCENARIOS:
            rep = evaluate(policy, cfg, anticipation_scenario(name), episodes, deterministic=False,
                           seed=eval_seed, start_yaw=ANTICIPATION_START_YAW)
            for j, goal in enumerate(table):
                table[goal][variant][name] = rep["per_keyframe"][j]["distance_m"]
    second = table["second_goal"]
    reduction = {name: 1 - second["all_goals"][name]["mean"] / second["next_goal"][name]["mean"]
                 for name in ANTICIPATION_SCENARIOS}
    summary = {
        "protocol": {"experiment": "anticipation", "seed": seed, "eval_seed": eval_seed, "episodes": episodes,
                     "start_yaw": ANTICIPATION_START_YAW, "deterministic_actions": False,
                     "scenarios": {k: [{"t_step": s, "x": p[0], "y": p[1]} for s, p in v]
                                   for k, v in ANTICIPATION_SCENARIOS.items()}},
        "runs": runs,
        "table": table,
        "second_goal_relative_reduction": reduction,
    }
    _write_json(os.path.join(out_dir, "anticipation_summary.json"), summary)
    with open(os.path.join(out_dir, "anticipation_table.txt"), "w") as fh:
        fh.write(format_anticipation_table(table) + "\n")
    return summary


def format_anticipation_table(table):
    lines = []
    names = list(ANTICIPATION_SCENARIOS)
    labels = {"all_goals": "Aware of all goals", "next_goal": "Aware of next goal"}
    for goal, rows in table.items():
        title = goal.replace("_", " ").title()
        lines.append(f"{title:<20}" + "".join(f"{n:>22}" for n in names))
        for variant, cells in rows.items():
            lines.append(f"{labels[variant]:<20}" + "".join(
                f"{cells[n]['mean']:>13.4f} ± {cells[n]['std']:<6.4f}" for n in names))
        lines.append("")
    return "\n".join(lines).rstrip()
