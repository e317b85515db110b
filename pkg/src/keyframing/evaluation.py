"""Keyframe-matching evaluation of a trained policy on fixed or sampled scenarios."""
from __future__ import annotations

import os

import numpy as np

from . import planarenv as pe
from .config import RunConfig
from .keyframes import KeyframeBatch, KeyframeSet, build_tokens, sample_random_keyframes


class ScenarioError(ValueError):
    """Scenario does not fit the policy's configuration."""


def check_scenario(scenario: KeyframeSet, cfg: RunConfig):
    if len(scenario) == 0:
        raise ScenarioError("scenario has no keyframes")
    if len(scenario) > cfg.keyframes.max_keyframes:
        raise ScenarioError(f"scenario has {len(scenario)} keyframes, policy supports {cfg.keyframes.max_keyframes}")
    allowed = set(cfg.keyframes.components)
    for i, k in enumerate(scenario):
        extra = set(k.components) - allowed
        if extra:
            raise ScenarioError(f"keyframe {i} sets {sorted(extra)} but the policy was trained on "
                                f"{sorted(allowed)}")
        if k.posture is not None and len(k.posture) != cfg.env.num_joints:
            raise ScenarioError(f"keyframe {i} posture has {len(k.posture)} joints, expected {cfg.env.num_joints}")


def heldout_scenarios(cfg: RunConfig, dataset, n, seed, num_keyframes=None):
    """Random-sampler scenarios from the origin, drawn from a seed unused in training."""
    rng = np.random.default_rng([seed, 7919])
    nk = num_keyframes or cfg.keyframes.max_keyframes
    return [sample_random_keyframes(dataset, cfg.keyframes, rng, nk, np.zeros(2), 0.0) for _ in range(n)]


def _summary(x):
    x = np.asarray(x, dtype=np.float64)
    return {"mean": float(x.mean()), "std": float(x.std())} if x.size else None


def run_episodes(policy, cfg: RunConfig, scenarios, start_yaw=0.0, deterministic=True, seed=0, act=None,
                 export_dir=None):
    """Roll one episode per scenario in parallel (no resets) and record errors at each keyframe time.

    ``act(state, tokens, kb)`` replaces the policy when given; it may modify ``state`` in place.
    Returns a dict with per-keyframe error arrays (episodes x keyframes) and failure flags.
    """
    env_cfg = cfg.env
    n = len(scenarios)
    for s in scenarios:
        check_scenario(s, cfg)
    nk = max(len(s) for s in scenarios)
    kb = KeyframeBatch.from_sets(scenarios, cfg.keyframes.max_keyframes, env_cfg.num_joints)
    state = pe.default_state(env_cfg, n)
    state.yaw[:] = start_yaw
    rng = np.random.default_rng([seed, 31337])
    dist = np.full((n, nk), np.nan)
    yaw = np.full((n, nk), np.nan)
    posture = np.full((n, nk), np.nan)
    failed = np.zeros(n, dtype=bool)
    traj_states = [[state.take([i])] for i in range(n)] if export_dir else None
    traj_actions = [[] for _ in range(n)] if export_dir else None
    horizon = int(kb.last_step().max())
    dtype = np.float32 if cfg.precision == 32 else np.float64
    for _ in range(horizon):
        obs = build_tokens(state, kb, cfg.keyframes, dtype)
        if act is not None:
            actions = np.asarray(act(state, obs, kb), dtype=np.float64)
        else:
            actions = policy.act(obs.tokens, obs.mask, rng, deterministic=deterministic)[0]
        state = pe.step(state, actions, env_cfg)
        term = pe.check_termination(state, kb.last_step(), env_cfg, cfg.keyframes.mask_after_steps)
        failed |= term.done & ~term.bootstrap
        tick = state.t[:, None] == kb.steps
        for i, j in zip(*np.nonzero(tick)):
            k = scenarios[i][j]
            if k.position is not None:
                dist[i, j] = float(np.linalg.norm(k.position - state.p[i]))
            if k.yaw is not None:
                yaw[i, j] = float(np.degrees(abs(pe.wrap_angle(k.yaw - state.yaw[i]))))
            if k.posture is not None:
                posture[i, j] = float(np.degrees(np.sqrt(np.mean(np.square(k.posture - state.theta[i])))))
        if export_dir:
            for i in range(n):
                traj_states[i].append(state.take([i]))
                traj_actions[i].append(actions[i])
    if export_dir:
        os.makedirs(export_dir, exist_ok=True)
        for i in range(n):
            acts = traj_actions[i] + [np.zeros(env_cfg.action_dim)]
            pe.export_trajectory(os.path.join(export_dir, f"episode_{i:03d}.csv"), traj_states[i], acts)
    return {"distance_m": dist, "yaw_deg": yaw, "posture_rmse_deg": posture, "failed": failed}


def report(raw, scenarios=None):
    """Per-keyframe mean and std over episodes, plus pooled means."""
    nk = raw["distance_m"].shape[1]
    rows = []
    metrics = ("distance_m", "yaw_deg", "posture_rmse_deg")
    for j in range(nk):
        row = {"keyframe": j + 1}
        if scenarios is not None and len({s[j].step for s in scenarios if len(s) > j}) == 1:
            row["t_step"] = scenarios[0][j].step
        for m in metrics:
            col = raw[m][:, j]
            row[m] = _summary(col[~np.isnan(col)])
        rows.append(row)
    pooled = {}
    for m in metrics:
        vals = raw[m][~np.isnan(raw[m])]
        pooled[m] = _summary(vals)
    return {"episodes": int(raw["distance_m"].shape[0]), "failures": int(raw["failed"].sum()),
            "per_keyframe": rows, "overall": pooled}


def evaluate(policy, cfg: RunConfig, scenario, episodes=20, deterministic=True, seed=0, start_yaw=0.0,
             act=None, export_dir=None):
    """Repeat a single scenario ``episodes`` times; returns the report dict."""
    scenarios = [scenario] * episodes
    raw = run_episodes(policy, cfg, scenarios, start_yaw, deterministic, seed, act, export_dir)
    out = report(raw, scenarios)
    out["deterministic"] = deterministic
    return out


def format_report(rep):
    lines = [f"episodes: {rep['episodes']}  failures: {rep['failures']}"]
    head = f"{'kf':>3} {'t_step':>6}  {'distance (m)':>17}  {'yaw (deg)':>17}  {'posture RMSE (deg)':>19}"
    lines.append(head)

    def cell(s, width):
        return f"{'-':>{width}}" if s is None else f"{s['mean']:>{width - 9}.4f} ± {s['std']:<6.4f}"

    for row in rep["per_keyframe"]:
        lines.append(f"{row['keyframe']:>3} {row.get('t_step', '-'):>6}  {cell(row['distance_m'], 17)}  "
                     f"{cell(row['yaw_deg'], 17)}  {cell(row['posture_rmse_deg'], 19)}")
    return "\n".join(lines)

