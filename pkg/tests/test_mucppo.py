import logging

import numpy as np
import pytest

from keyframing import diffcore as dc
from keyframing import mucppo as mp
from keyframing import planarenv as pe
from keyframing.keyframes import KeyframeConfig
from keyframing.models import CriticSet, Discriminator, EncoderConfig, ModelConfig, PolicyNet
from keyframing.vecenv import KeyframeEnvBatch


def episode_returns(r, gamma):
    out = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def test_gae_lambda_one_is_discounted_return_minus_value(rng):
    T, gamma = 10, 0.99
    r = rng.normal(size=(T, 1))
    v = rng.normal(size=(T, 1))
    dones = np.zeros((T, 1), bool)
    dones[-1] = True
    adv, ret = mp.gae(r, v, dones, np.zeros_like(dones), np.zeros(1), np.zeros((T, 1)), gamma, 1.0)
    np.testing.assert_allclose(ret[:, 0], episode_returns(r[:, 0], gamma), atol=1e-12)


def test_sparse_terminal_reward_decays_geometrically():
    T, gamma = 10, 0.99
    r = np.zeros((T, 1))
    r[-1] = 1.0
    dones = np.zeros((T, 1), bool)
    dones[-1] = True
    adv, _ = mp.gae(r, np.zeros((T, 1)), dones, np.zeros_like(dones), np.zeros(1), np.zeros((T, 1)), gamma, 1.0)
    np.testing.assert_allclose(adv[:, 0], gamma ** (T - 1 - np.arange(T)), atol=1e-15)


def test_gae_bootstrap_uses_terminal_value_and_does_not_leak():
    r = np.zeros((2, 1))
    v = np.array([[0.0], [5.0]])
    dones = np.array([[True], [False]])
    adv, _ = mp.gae(r, v, dones, np.array([[True], [False]]), np.zeros(1), np.array([[2.0], [0.0]]), 0.5, 1.0)
    assert adv[0, 0] == 1.0  # 0.5 * terminal value, nothing from v[1]
    adv, _ = mp.gae(r, v, dones, np.zeros((2, 1), bool), np.zeros(1), np.array([[2.0], [0.0]]), 0.5, 1.0)
    assert adv[0, 0] == 0.0


def test_normalize_example():
    norm, mu, sd = mp.normalize_advantages(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(norm[0], [-1.2247448, 0.0, 1.2247448], atol=1e-6)


def test_normalize_warns_on_constant_group(caplog):
    with caplog.at_level(logging.WARNING):
        norm, _, _ = mp.normalize_advantages(np.ones((1, 5)))
    assert np.all(norm == 0) and "near-zero variance" in caplog.text


def test_mix_weights_must_match_groups():
    with pytest.raises(ValueError):
        mp.mix_advantages(np.zeros((3, 4)), [1.0, 1.0])


def test_mix_is_weighted_sum_of_normalized(rng):
    a = rng.normal(size=(3, 50)) * [[1], [100], [0.01]]
    w = np.array([0.1, 0.5, 0.5])
    b = mp.mix_advantages(a, w)
    ref = sum(w[i] * (a[i] - a[i].mean()) / (a[i].std() + 1e-8) for i in range(3))
    np.testing.assert_allclose(b.mixed, ref, atol=1e-12)


def test_single_critic_reward_matrix():
    cfg = mp.AlgoConfig(method="single_critic")
    np.testing.assert_array_equal(cfg.reward_matrix(), [[0.1, 0.5, 5.0]])
    assert cfg.critic_groups() == ["total"]
    assert mp.AlgoConfig().critic_groups() == ["regularization", "style", "goal"]


def test_algo_config_validation():
    with pytest.raises(ValueError):
        mp.AlgoConfig(method="x").validate()
    with pytest.raises(ValueError):
        mp.AlgoConfig(advantage_weights={"goal": 1.0}).validate()


def test_gaussian_kl_closed_form():
    assert mp.gaussian_kl(np.zeros((1, 2)), np.zeros(2), np.zeros((1, 2)), np.zeros(2))[0] == 0.0
    # KL(N(0,1) || N(1,1)) = 0.5 per dim
    assert mp.gaussian_kl(np.zeros((1, 2)), np.zeros(2), np.ones((1, 2)), np.zeros(2))[0] == pytest.approx(1.0)


def test_adaptive_learning_rate():
    cfg = mp.AlgoConfig(desired_kl=0.02, lr_bounds=[1e-5, 1e-2])
    assert mp.adapt_learning_rate(1e-3, 0.05, cfg) == pytest.approx(5e-4)
    assert mp.adapt_learning_rate(1e-3, 0.005, cfg) == pytest.approx(1.5e-3)
    assert mp.adapt_learning_rate(1e-3, 0.02, cfg) == 1e-3
    assert mp.adapt_learning_rate(1e-2, 0.0, cfg) == 1e-2
    assert mp.adapt_learning_rate(1e-5, 1.0, cfg) == 1e-5


def test_train_discriminator_shrinks_batch_with_warning(rng, caplog):
    disc = Discriminator(3, [4], rng)
    opt = dc.Adam(disc.parameters(), lr=1e-3)
    cfg = mp.AlgoConfig(disc_batch_size=64)
    with caplog.at_level(logging.WARNING):
        stats = mp.train_discriminator(disc, opt, rng.normal(size=(100, 3)), rng.normal(size=(10, 3)), cfg, rng, 2)
    assert "shrinking" in caplog.text and np.isfinite(stats["disc_loss"])
    with pytest.raises(ValueError):
        mp.train_discriminator(disc, opt, np.zeros((0, 3)), rng.normal(size=(10, 3)), cfg, rng, 1)


def _small_model():
    return ModelConfig(encoder=EncoderConfig(1, 1, 8, 16), mlp_dims=[16], discriminator_dims=[8])


def test_vecenv_step_and_rollout_shapes():
    env_cfg = pe.EnvConfig()
    kcfg = KeyframeConfig(max_keyframes=2)
    ds = pe.generate_reference_dataset(pe.DatasetConfig(clips=4, seconds=3.0), 4, seed=0)
    env = KeyframeEnvBatch(env_cfg, kcfg, ds, 3, seed=1)
    obs = env.observe()
    assert obs.tokens.shape[:2] == (3, 3) and not obs.mask[:, 0].any()
    rng = np.random.default_rng(0)
    pol = PolicyNet(_small_model(), obs.tokens.shape[-1], env_cfg.action_dim, rng)
    critics = CriticSet(_small_model(), obs.tokens.shape[-1], ["regularization", "style", "goal"], rng)
    res = env.step(np.zeros((3, env_cfg.action_dim)))
    disc = Discriminator(res.style_pairs.shape[1], [8], rng)
    batch = mp.collect_rollout(pol, critics, disc, env, 6, rng, np.eye(3))
    assert batch.tokens.shape[:2] == (6, 3) and batch.values.shape == (3, 6, 3)
    assert np.all((batch.raw_rewards >= 0) & (batch.raw_rewards <= 1))
    bundle = mp.compute_advantages(batch, mp.AlgoConfig())
    assert bundle.mixed.shape == (18,) and bundle.targets.shape == (3, 18)


def test_vecenv_resets_done_envs_in_place():
    env_cfg = pe.EnvConfig(max_episode_steps=3)
    ds = pe.generate_reference_dataset(pe.DatasetConfig(clips=2, seconds=6.0), 4, seed=0)
    env = KeyframeEnvBatch(env_cfg, KeyframeConfig(), ds, 2, seed=1)
    for _ in range(3):
        res = env.step(np.zeros((2, env_cfg.action_dim)))
    assert res.done.all() and res.terminal is not None
    assert np.all(env.state.t == 0)
