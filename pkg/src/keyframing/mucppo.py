"""Multi-critic PPO: per-group GAE, normalized advantage mixing, clipped update, AMP discriminator."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .models import gaussian_entropy, gaussian_log_prob
from .rewards import DEFAULT_ADVANTAGE_WEIGHTS, GROUPS, discriminator_losses, style_reward

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass
class AlgoConfig:
    method: str = "multi_critic"  # or "single_critic"
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.02
    desired_kl: float = 0.02
    learning_rate: float = 1e-4
    adaptive_lr: bool = True
    lr_bounds: list = field(default_factory=lambda: [1e-6, 1e-2])
    num_epochs: int = 5
    num_minibatches: int = 4
    horizon: int = 32
    num_envs: int = 256
    advantage_weights: dict = field(default_factory=lambda: dict(DEFAULT_ADVANTAGE_WEIGHTS))
    reward_weights: dict = field(default_factory=lambda: {"regularization": 0.1, "style": 0.5, "goal": 5.0})
    value_target: str = "gae_return"  # or "one_step_td"
    max_grad_norm: float = 1.0
    disc_learning_rate: float = 3e-4
    disc_updates_per_epoch: int = 20
    disc_batch_size: int = 768
    gp_weight: float = 5.0

    def validate(self):
        if self.method not in ("multi_critic", "single_critic"):
            raise ValueError(f"unknown method {self.method!r}")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lambda must lie in (0, 1]")
        for name, weights in (("advantage_weights", self.advantage_weights), ("reward_weights", self.reward_weights)):
            if set(weights) != set(GROUPS):
                raise ValueError(f"{name} must have exactly the keys {GROUPS}")
            if any(w < 0 for w in weights.values()):
                raise ValueError(f"{name} must be non-negative")
        if self.value_target not in ("gae_return", "one_step_td"):
            raise ValueError(f"unknown value_target {self.value_target!r}")

    def critic_groups(self):
        return list(GROUPS) if self.method == "multi_critic" else ["total"]

    def reward_matrix(self):
        """Maps the three raw reward channels to the critic reward channels."""
        if self.method == "multi_critic":
            return np.eye(len(GROUPS))
        return np.array([[self.reward_weights[g] for g in GROUPS]])

    def policy_weights(self):
        if self.method == "multi_critic":
            return np.array([self.advantage_weights[g] for g in GROUPS])
        return np.ones(1)


# --------------------------------------------------------------------- rollout

@dataclass
class RolloutBatch:
    tokens: np.ndarray          # (T, B, K, F)
    masks: np.ndarray           # (T, B, K)
    actions: np.ndarray         # (T, B, A)
    log_probs: np.ndarray       # (T, B)
    means: np.ndarray           # (T, B, A)
    log_std: np.ndarray         # (A,) at collection time
    raw_rewards: np.ndarray     # (3, T, B) regularization, style, goal
    rewards: np.ndarray         # (G, T, B) critic channels
    values: np.ndarray          # (G, T, B)
    dones: np.ndarray           # (T, B)
    bootstrap: np.ndarray       # (T, B)
    terminal_values: np.ndarray  # (G, T, B), zero where not done
    last_values: np.ndarray     # (G, B)
    style_pairs: np.ndarray     # (T, B, P)
    goal_ticks: np.ndarray      # (T, B) bool

    @property
    def size(self):
        return self.dones.size


def collect_rollout(policy, critics, disc, env, horizon, rng, reward_matrix, on_step=None) -> RolloutBatch:
    """Step ``env`` for ``horizon`` steps with the current policy; episodes reset inline."""
    b = env.num_envs
    g = len(critics)
    obs = env.observe()
    k, f = obs.tokens.shape[1:]
    dtype = obs.tokens.dtype
    a_dim = policy.action_dim
    out = RolloutBatch(
        tokens=np.zeros((horizon, b, k, f), dtype), masks=np.zeros((horizon, b, k), bool),
        actions=np.zeros((horizon, b, a_dim), dtype), log_probs=np.zeros((horizon, b), dtype),
        means=np.zeros((horizon, b, a_dim), dtype), log_std=policy.log_std.data.copy(),
        raw_rewards=np.zeros((len(GROUPS), horizon, b)), rewards=np.zeros((g, horizon, b)),
        values=np.zeros((g, horizon, b)), dones=np.zeros((horizon, b), bool),
        bootstrap=np.zeros((horizon, b), bool), terminal_values=np.zeros((g, horizon, b)),
        last_values=np.zeros((g, b)), style_pairs=None, goal_ticks=np.zeros((horizon, b), bool))
    pairs = []
    for t in range(horizon):
        out.tokens[t], out.masks[t] = obs.tokens, obs.mask
        actions, logp, mean = policy.act(obs.tokens, obs.mask, rng)
        out.actions[t], out.log_probs[t], out.means[t] = actions, logp, mean
        out.values[:, t] = critics.values(obs.tokens, obs.mask)
        res = env.step(actions)
        with dc.no_grad():
            d = disc(res.style_pairs).data
        raw = np.stack([res.rewards["regularization"], style_reward(d), res.rewards["goal"]])
        out.raw_rewards[:, t] = raw
        out.rewards[:, t] = reward_matrix @ raw
        out.dones[t], out.bootstrap[t] = res.done, res.bootstrap
        out.goal_ticks[t] = res.goal_hit >= 0
        if res.terminal is not None:
            idx = np.flatnonzero(res.done)
            out.terminal_values[:, t, idx] = critics.values(res.terminal.tokens, res.terminal.mask)
        pairs.append(res.style_pairs)
        if on_step is not None:
            on_step(raw, res)
        obs = env.observe()
    out.last_values = critics.values(obs.tokens, obs.mask)
    out.style_pairs = np.stack(pairs)
    return out


# ------------------------------------------------------------------------ GAE

def gae(rewards, values, dones, bootstrap, last_values, terminal_values, gamma, lam):
    """Generalized advantage estimation over a (T, B) rollout for one reward group.

    At a bootstrapped terminal the tail value is ``terminal_values[t]`` (the value
    of the pre-reset final state); at a failure terminal it is zero.  Returns
    (advantages, value targets = advantages + values).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    horizon = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in range(horizon - 1, -1, -1):
        next_v = last_values if t == horizon - 1 else values[t + 1]
        done = np.asarray(dones[t], dtype=bool)
        tail = np.where(done, np.where(bootstrap[t], terminal_values[t], 0.0), next_v)
        delta = rewards[t] + gamma * tail - values[t]
        running = delta + gamma * lam * np.where(done, 0.0, running)
        adv[t] = running
    return adv, adv + values


def one_step_td_targets(rewards, values, dones, bootstrap, last_values, terminal_values, gamma):
    """r_t + gamma * V(s_{t+1}) with the same terminal handling as ``gae``."""
    values = np.asarray(values, dtype=np.float64)
    nxt = np.concatenate([values[1:], np.asarray(last_values)[None]], axis=0)
    tail = np.where(dones, np.where(bootstrap, terminal_values, 0.0), nxt)
    return np.asarray(rewards, dtype=np.float64) + gamma * tail


@dataclass
class AdvantageBundle:
    advantages: np.ndarray   # (G, N) raw per-group advantages
    normalized: np.ndarray   # (G, N)
    means: np.ndarray        # (G,)
    stds: np.ndarray         # (G,)
    mixed: np.ndarray        # (N,)
    targets: np.ndarray      # (G, N)


def normalize_advantages(adv):
    """Batch-normalize each row with the population std plus a small floor."""
    adv = np.asarray(adv, dtype=np.float64)
    mu = adv.mean(axis=-1)
    sd = adv.std(axis=-1)
    for i in np.flatnonzero(sd < 1e-6):
        log.warning("advantage group %d has near-zero variance (std=%.3g); std floor applies", i, sd[i])
    return (adv - mu[..., None]) / (sd[..., None] + STD_FLOOR), mu, sd


def mix_advantages(advantages, weights, targets=None) -> AdvantageBundle:
    """Weighted sum of per-group normalized advantages."""
    advantages = np.atleast_2d(np.asarray(advantages, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (advantages.shape[0],):
        raise ValueError(f"{weights.shape[0] if weights.ndim else 1} weights for {advantages.shape[0]} groups")
    norm, mu, sd = normalize_advantages(advantages)
    mixed = np.zeros(advantages.shape[1])
    for w, a in zip(weights, norm):
        mixed = mixed + w * a
    return AdvantageBundle(advantages, norm, mu, sd, mixed, targets)


def single_critic_advantages(rewards, values, dones, bootstrap, last_values, terminal_values,
                             cfg: AlgoConfig):
    """Standard PPO: GAE on the total reward, then one batch normalization."""
    a, ret = gae(rewards, values, dones, bootstrap, last_values, terminal_values, cfg.gamma, cfg.lam)
    a = a.reshape(-1)
    mu, sd = a.mean(), a.std()
    mixed = (a - mu) / (sd + STD_FLOOR)
    return AdvantageBundle(a[None], mixed[None], np.array([mu]), np.array([sd]), mixed, ret.reshape(1, -1))


def compute_advantages(batch: RolloutBatch, cfg: AlgoConfig) -> AdvantageBundle:
    if cfg.method == "single_critic" and cfg.value_target == "gae_return":
        return single_critic_advantages(batch.rewards[0], batch.values[0], batch.dones, batch.bootstrap,
                                        batch.last_values[0], batch.terminal_values[0], cfg)
    advs, targets = [], []
    for i in range(batch.rewards.shape[0]):
        a, ret = gae(batch.rewards[i], batch.values[i], batch.dones, batch.bootstrap,
                     batch.last_values[i], batch.terminal_values[i], cfg.gamma, cfg.lam)
        if cfg.value_target == "one_step_td":
            ret = one_step_td_targets(batch.rewards[i], batch.values[i], batch.dones, batch.bootstrap,
                                      batch.last_values[i], batch.terminal_values[i], cfg.gamma)
        advs.append(a.reshape(-1))
        targets.append(ret.reshape(-1))
    return mix_advantages(np.stack(advs), cfg.policy_weights(), np.stack(targets))


# --------------------------------------------------------------------- update

def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new):
    """KL(old || new) for diagonal Gaussians, summed over the action axis."""
    var_old = np.exp(2 * log_std_old)
    var_new = np.exp(2 * log_std_new)
    return (log_std_new - log_std_old + (var_old + np.square(mean_old - mean_new)) / (2 * var_new) - 0.5).sum(-1)


def adapt_learning_rate(lr, kl, cfg: AlgoConfig):
    lo, hi = cfg.lr_bounds
    if kl > 2 * cfg.desired_kl:
        lr = lr / 2
    elif kl < cfg.desired_kl / 2:
        lr = lr * 1.5
    return min(max(lr, lo), hi)


def policy_loss(policy, tokens, mask, actions, old_log_probs, advantages, cfg: AlgoConfig):
    mean, log_std = policy.distribution(tokens, mask)
    logp = gaussian_log_prob(actions, mean, log_std)
    ratio = dc.exp(dc.sub(logp, old_log_probs))
    adv = advantages.astype(mean.dtype)
    surr = dc.minimum(dc.mul(ratio, adv), dc.mul(dc.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps), adv))
    surrogate = dc.mean(surr)
    loss = dc.sub(dc.scale(surrogate, -1.0), dc.scale(gaussian_entropy(log_std), cfg.entropy_coef))
    return loss, surrogate, ratio.data, mean.data, log_std.data


def ppo_update(policy, critics, policy_opt, critic_opts, batch: RolloutBatch, bundle: AdvantageBundle,
               cfg: AlgoConfig, rng, lr):
    """Clipped-surrogate policy update with the mixed advantage and independent critic regression.

    Returns (stats, new learning rate).  A non-finite loss raises ``NumericError``.
    """
    n = batch.size
    tokens = batch.tokens.reshape(n, *batch.tokens.shape[2:])
    masks = batch.masks.reshape(n, -1)
    actions = batch.actions.reshape(n, -1)
    old_logp = batch.log_probs.reshape(n)
    old_mean = batch.means.reshape(n, -1)
    dtype = tokens.dtype
    mb = n // cfg.num_minibatches
    stats = {"surrogate": [], "kl": [], "clip_fraction": [], "policy_loss": [],
             **{f"value_loss_{g}": [] for g in critics.group_names}}
    for _ in range(cfg.num_epochs):
        perm = rng.permutation(n)
        for k in range(cfg.num_minibatches):
            idx = perm[k * mb:(k + 1) * mb]
            tok, msk = tokens[idx], masks[idx]
            loss, surrogate, ratio, mean_new, log_std_new = policy_loss(
                policy, tok, msk, actions[idx], old_logp[idx], bundle.mixed[idx], cfg)
            if not np.isfinite(loss.data):
                raise dc.NumericError(f"non-finite policy loss {loss.data} (lr={lr})")
            kl = float(gaussian_kl(old_mean[idx], batch.log_std, mean_new, log_std_new).mean())
            if cfg.adaptive_lr:
                lr = adapt_learning_rate(lr, kl, cfg)
            policy_opt.lr = lr
            policy_opt.step(dc.grad(loss, policy.parameters()))
            stats["surrogate"].append(float(surrogate.data))
            stats["policy_loss"].append(float(loss.data))
            stats["kl"].append(kl)
            stats["clip_fraction"].append(float(np.mean(np.abs(ratio - 1) > cfg.clip_eps)))
            for i, (critic, opt) in enumerate(zip(critics.critics, critic_opts)):
                v = critic(tok, msk)
                vloss = dc.mean(dc.square(dc.sub(v, bundle.targets[i, idx].astype(dtype))))
                if not np.isfinite(vloss.data):
                    raise dc.NumericError(f"non-finite value loss for critic {critics.group_names[i]}")
                opt.lr = lr
                opt.step(dc.grad(vloss, critic.parameters()))
                stats[f"value_loss_{critics.group_names[i]}"].append(float(vloss.data))
    return {key: float(np.mean(v)) for key, v in stats.items()}, lr


# -------------------------------------------------------------- discriminator

def train_discriminator(disc, opt, expert_pairs, policy_pairs, cfg: AlgoConfig, rng, num_updates=None):
    """``disc_updates_per_epoch`` least-squares updates on half-expert, half-policy batches."""
    num_updates = cfg.disc_updates_per_epoch if num_updates is None else num_updates
    half = cfg.disc_batch_size // 2
    if len(policy_pairs) < half:
        log.warning("only %d policy transitions for a half batch of %d; shrinking batch", len(policy_pairs), half)
        half = len(policy_pairs)
    if half == 0 or len(expert_pairs) == 0:
        raise ValueError("discriminator training needs expert and policy transitions")
    opt.lr = cfg.disc_learning_rate
    history = []
    for _ in range(num_updates):
        e = expert_pairs[rng.integers(len(expert_pairs), size=half)]
        p = policy_pairs[rng.integers(len(policy_pairs), size=half)]
        loss, _, stats = discriminator_losses(disc, e, p, cfg.gp_weight)
        opt.step(dc.grad(loss, disc.parameters()))
        history.append(stats)
    return {k: float(np.mean([h[k] for h in history])) for k in history[0]}
