"""Batched keyframe-reaching task built on the planar env.

Each env has its own RNG stream seeded from (run seed, env index), so results
do not depend on how the batch is stepped.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import planarenv as pe
from .keyframes import (KeyframeBatch, KeyframeConfig, build_tokens, sample_count,
                        sample_dataset_keyframes, sample_random_keyframes)
from .rewards import finite_difference_rates, goal_reward, regularization_reward, state_style_features


@dataclass
class StepResult:
    rewards: dict            # group -> (B,); style is filled in by the trainer
    style_pairs: np.ndarray  # (B, 2F)
    done: np.ndarray
    bootstrap: np.ndarray
    reason: np.ndarray
    goal_hit: np.ndarray     # (B,) keyframe index reached this step or -1
    goal_pos_err: np.ndarray  # (B,) distance at hits
    goal_yaw_err: np.ndarray  # (B,) |yaw error| at hits
    terminal: object         # TokenSequence for the done envs (pre-reset), or None


class KeyframeEnvBatch:
    def __init__(self, env_cfg: pe.EnvConfig, kf_cfg: KeyframeConfig, dataset, num_envs, seed,
                 dtype=np.float64):
        env_cfg.validate()
        kf_cfg.validate()
        self.env_cfg, self.kf_cfg, self.dataset = env_cfg, kf_cfg, dataset
        self.num_envs, self.dtype = num_envs, dtype
        self.rngs = [np.random.default_rng([seed, i]) for i in range(num_envs)]
        self.state = pe.default_state(env_cfg, num_envs)
        self.kb = KeyframeBatch.empty(num_envs, kf_cfg.max_keyframes, env_cfg.num_joints)
        self.random_probability = 0.0
        self.push_step = np.full(num_envs, -1, dtype=np.int64)
        self.push_velocity = np.zeros((num_envs, 2))
        self.reset(np.arange(num_envs))

    def reset(self, idx):
        cfg, kcfg = self.env_cfg, self.kf_cfg
        for i in np.atleast_1d(idx):
            rng = self.rngs[i]
            s, anchor = pe.reset(rng, cfg, self.dataset)
            self.state.put(i, s.take(0))
            n = sample_count(kcfg, rng)
            p0, yaw0 = s.p[0].copy(), float(s.yaw[0])
            if rng.random() < self.random_probability:
                ks = sample_random_keyframes(self.dataset, kcfg, rng, n, p0, yaw0)
            else:
                ks = sample_dataset_keyframes(self.dataset, kcfg, rng, n, p0, yaw0, start=anchor)
            self.kb.assign(i, ks)
            self.push_step[i] = -1
            if cfg.push_enabled and rng.random() < cfg.push_probability:
                horizon = max(int(self.kb.last_step()[i]), 1)
                self.push_step[i] = int(rng.integers(1, horizon + 1))
                angle = rng.uniform(-np.pi, np.pi)
                mag = rng.uniform(*cfg.push_velocity_range)
                self.push_velocity[i] = mag * np.array([np.cos(angle), np.sin(angle)])

    def observe(self):
        return build_tokens(self.state, self.kb, self.kf_cfg, self.dtype)

    def step(self, actions) -> StepResult:
        cfg = self.env_cfg
        prev = self.state
        new = pe.step(prev, actions, cfg)
        pushed = new.t == self.push_step
        if pushed.any():
            new.v[pushed] += pe.rotate(self.push_velocity[pushed], -new.yaw[pushed])
        rates = finite_difference_rates(prev, new, actions, cfg.dt, prev.t == 0)
        reg = regularization_reward(*rates, new.theta, cfg.soft_limit)
        goal, hit, pos_err, yaw_err, _ = goal_reward(new, self.kb)
        pairs = np.concatenate([state_style_features(prev), state_style_features(new)], axis=1)
        term = pe.check_termination(new, self.kb.last_step(), cfg, self.kf_cfg.mask_after_steps)
        self.state = new
        terminal = None
        done_idx = np.flatnonzero(term.done)
        if done_idx.size:
            sub = KeyframeBatch(*(getattr(self.kb, f)[done_idx] for f in
                                  ("steps", "position", "yaw", "posture", "present", "count")))
            terminal = build_tokens(new.take(done_idx), sub, self.kf_cfg, self.dtype)
            self.reset(done_idx)
        return StepResult(
            rewards={"regularization": reg, "goal": goal}, style_pairs=pairs.astype(self.dtype),
            done=term.done, bootstrap=term.bootstrap, reason=term.reason, goal_hit=hit,
            goal_pos_err=np.linalg.norm(pos_err, axis=1), goal_yaw_err=np.abs(yaw_err),
            terminal=terminal)
