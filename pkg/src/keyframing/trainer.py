"""Training loop tying env, networks and the multi-critic PPO update together."""
from __future__ import annotations

import json
import logging
import os
import time
from collections import deque

import numpy as np

from .config import RunConfig
from .diffcore import Adam
from .keyframes import curriculum_mix, token_dim
from .models import CriticSet, Discriminator, PolicyNet
from .mucppo import collect_rollout, compute_advantages, ppo_update, train_discriminator
from .planarenv import generate_reference_dataset, load_dataset
from .rewards import GROUPS
from .vecenv import KeyframeEnvBatch

log = logging.getLogger(__name__)


def dtype_for(cfg: RunConfig):
    return np.float32 if cfg.precision == 32 else np.float64


def build_dataset(cfg: RunConfig):
    if cfg.dataset_path:
        if not os.path.exists(cfg.dataset_path):
            raise FileNotFoundError(cfg.dataset_path)
        ds = load_dataset(cfg.dataset_path)
        if ds.num_joints != cfg.env.num_joints:
            raise ValueError(f"dataset has {ds.num_joints} joints, config expects {cfg.env.num_joints}")
        return ds
    return generate_reference_dataset(cfg.dataset, cfg.env.num_joints, cfg.seed)


def build_networks(cfg: RunConfig, style_dim, dtype=None):
    """Policy, critic set and discriminator initialized from the run seed."""
    dtype = dtype or dtype_for(cfg)
    rng = np.random.default_rng([cfg.seed, 101])
    tdim = token_dim(cfg.env)
    policy = PolicyNet(cfg.model, tdim, cfg.env.action_dim, rng, dtype)
    critics = CriticSet(cfg.model, tdim, cfg.algo.critic_groups(), rng, dtype)
    disc = Discriminator(style_dim, cfg.model.discriminator_dims, rng, dtype)
    return policy, critics, disc


class Trainer:
    def __init__(self, cfg: RunConfig, dataset=None):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype_for(cfg)
        self.dataset = dataset if dataset is not None else build_dataset(cfg)
        self.expert_pairs = self.dataset.style_transitions().astype(self.dtype)
        self.policy, self.critics, self.disc = build_networks(cfg, self.expert_pairs.shape[1], self.dtype)
        self.disc.set_normalizer(self.expert_pairs)
        a = cfg.algo
        self.lr = a.learning_rate
        self.policy_opt = Adam(self.policy.parameters(), lr=a.learning_rate, max_grad_norm=a.max_grad_norm)
        self.critic_opts = [Adam(c.parameters(), lr=a.learning_rate, max_grad_norm=a.max_grad_norm)
                            for c in self.critics.critics]
        self.disc_opt = Adam(self.disc.parameters(), lr=a.disc_learning_rate)
        self.rng = np.random.default_rng([cfg.seed, 202])
        self.env = KeyframeEnvBatch(cfg.env, cfg.keyframes, self.dataset, a.num_envs, cfg.seed, self.dtype)
        self.iteration = 0
        self.episodes = deque(maxlen=max(a.num_envs, 64))
        self.goal_errors = deque(maxlen=4 * max(a.num_envs, 64))
        self._ep_sums = np.zeros((a.num_envs, len(GROUPS)))
        self._ep_len = np.zeros(a.num_envs, dtype=np.int64)
        self._t0 = time.time()

    @property
    def optimizers(self):
        out = {"policy": self.policy_opt, "discriminator": self.disc_opt}
        out.update({f"critic.{g}": o for g, o in zip(self.critics.group_names, self.critic_opts)})
        return out

    def named_modules(self):
        out = [("policy", self.policy)]
        out += [(f"critic.{g}", c) for g, c in zip(self.critics.group_names, self.critics.critics)]
        out.append(("discriminator", self.disc))
        return out

    def progress(self):
        return self.iteration / max(self.cfg.iterations, 1)

    def _track(self, raw, res):
        self._ep_sums += raw.T
        self._ep_len += 1
        hit = res.goal_hit >= 0
        for pe_, ye in zip(res.goal_pos_err[hit], res.goal_yaw_err[hit]):
            self.goal_errors.append((pe_, ye))
        for i in np.flatnonzero(res.done):
            self.episodes.append((self._ep_sums[i].copy(), int(self._ep_len[i]), int(res.reason[i])))
            self._ep_sums[i] = 0
            self._ep_len[i] = 0

    def run_iteration(self):
        cfg, a = self.cfg, self.cfg.algo
        kf = cfg.keyframes
        p_random = curriculum_mix(self.progress(), kf.curriculum_max, kf.curriculum_ramp_end)
        self.env.random_probability = p_random
        batch = collect_rollout(self.policy, self.critics, self.disc, self.env, a.horizon, self.rng,
                                a.reward_matrix(), on_step=self._track)
        bundle = compute_advantages(batch, a)
        stats, self.lr = ppo_update(self.policy, self.critics, self.policy_opt, self.critic_opts,
                                    batch, bundle, a, self.rng, self.lr)
        pairs = batch.style_pairs.reshape(-1, batch.style_pairs.shape[-1])
        dstats = [train_discriminator(self.disc, self.disc_opt, self.expert_pairs, pairs, a, self.rng)
                  for _ in range(a.num_epochs)] if a.disc_updates_per_epoch > 0 else []
        self.iteration += 1
        return self._metrics(batch, bundle, stats, dstats, p_random)

    def _metrics(self, batch, bundle, stats, dstats, p_random):
        m = {"iteration": self.iteration}
        if self.episodes:
            sums = np.array([e[0] for e in self.episodes])
            for j, g in enumerate(GROUPS):
                m[f"reward_{g}"] = float(sums[:, j].mean())
            m["episode_length"] = float(np.mean([e[1] for e in self.episodes]))
            m["failure_rate"] = float(np.mean([e[2] in (3, 4) for e in self.episodes]))
        else:
            for g in GROUPS:
                m[f"reward_{g}"] = None
            m["episode_length"] = m["failure_rate"] = None
        for j, g in enumerate(GROUPS):
            m[f"step_reward_{g}"] = float(batch.raw_rewards[j].mean())
        ticks = batch.goal_ticks
        m["goal_tick_reward"] = float(batch.raw_rewards[2][ticks].mean()) if ticks.any() else None
        if self.goal_errors:
            errs = np.array(self.goal_errors)
            m["goal_position_error"] = float(errs[:, 0].mean())
            m["goal_yaw_error_deg"] = float(np.degrees(errs[:, 1].mean()))
        else:
            m["goal_position_error"] = m["goal_yaw_error_deg"] = None
        m.update(stats)
        for g, sd in zip(self.critics.group_names, bundle.stds):
            m[f"advantage_std_{g}"] = float(sd)
        if dstats:
            for k in dstats[0]:
                m[k] = float(np.mean([d[k] for d in dstats]))
        m["learning_rate"] = self.lr
        m["action_std"] = float(np.exp(self.policy.log_std.data).mean())
        m["curriculum_random_probability"] = p_random
        m["progress"] = self.progress()
        m["wall_clock"] = time.time() - self._t0
        return m

    def train(self, out_dir=None, iterations=None, log_every=10):
        """Run until ``iterations`` (default: the configured total) have completed."""
        from .checkpoint import save_checkpoint
        total = self.cfg.iterations if iterations is None else iterations
        metrics_path = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            metrics_path = os.path.join(out_dir, "metrics.jsonl")
        history = []
        while self.iteration < total:
            m = self.run_iteration()
            history.append(m)
            if metrics_path:
                with open(metrics_path, "a") as fh:
                    fh.write(json.dumps(m) + "\n")
            if log_every and (self.iteration % log_every == 0 or self.iteration == total):
                log.info("iter %d  goal %.3f  style %.3f  reg %.3f  pos_err %s  kl %.4f  lr %.2e",
                         self.iteration, m["step_reward_goal"], m["step_reward_style"],
                         m["step_reward_regularization"], _fmt(m["goal_position_error"]), m["kl"],
                         m["learning_rate"])
            if out_dir and (self.iteration % self.cfg.checkpoint_every == 0 or self.iteration == total):
                save_checkpoint(self, os.path.join(out_dir, "checkpoint"))
        return history


def _fmt(x):
    return "n/a" if x is None else f"{x:.3f}"
