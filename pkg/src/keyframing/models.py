"""Networks: transformer keyframe encoder, Gaussian policy, per-group critics, AMP discriminator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

MASK_FILL = -1e9


@dataclass
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 1
    model_dim: int = 64
    feedforward_dim: int = 512
    token_dim: int = 0  # filled from the token layout at build time

    def validate(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 0 or self.feedforward_dim < 1 or self.token_dim < 1:
            raise ValueError(f"invalid encoder config {self}")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mlp_dims: list = field(default_factory=lambda: [512, 256])
    width_multiplier: float = 1.0
    discriminator_dims: list = field(default_factory=lambda: [256, 128])
    init_std: float = 1.0
    critic_input: str = "sequence"  # "sequence" | "pooled"

    def scaled(self, widths):
        return [max(1, int(round(w * self.width_multiplier))) for w in widths]

    def encoder_config(self, token_dim) -> EncoderConfig:
        e = self.encoder
        cfg = EncoderConfig(e.num_layers, e.num_heads, e.model_dim,
                            max(1, int(round(e.feedforward_dim * self.width_multiplier))), token_dim)
        cfg.validate()
        return cfg


class Module:
    """Parameter container; ``parameters()`` order is the checkpoint manifest order."""

    def named_parameters(self, prefix=""):
        out = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(name + "."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float64, gain=1.0):
        bound = gain / math.sqrt(n_in)
        self.weight = dc.parameter(rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype))
        self.bias = dc.parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x):
        return dc.add(dc.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float64):
        self.gamma = dc.parameter(np.ones(dim, dtype=dtype))
        self.beta = dc.parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x):
        return dc.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """ELU hidden layers followed by a linear output layer."""

    def __init__(self, n_in, hidden, n_out, rng, dtype=np.float64, out_gain=1.0):
        dims = [n_in, *hidden]
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], n_out, rng, dtype, gain=out_gain)

    def __call__(self, x):
        for layer in self.layers:
            x = dc.elu(layer(x))
        return self.out(x)


class SelfAttention(Module):
    def __init__(self, dim, heads, rng, dtype=np.float64):
        self.heads = heads
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)

    def __call__(self, x, mask):
        b, t, d = x.shape
        h, dh = self.heads, d // self.heads
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        if h > 1:
            q, k, v = (dc.transpose(dc.reshape(z, (b, t, h, dh)), (0, 2, 1, 3)) for z in (q, k, v))
            key_mask = mask[:, None, None, :]
        else:
            key_mask = mask[:, None, :]
        scores = dc.scale(dc.matmul(q, dc.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))),
                          1.0 / math.sqrt(dh))
        attn = dc.softmax(dc.masked_fill(scores, key_mask, MASK_FILL), axis=-1)
        out = dc.matmul(attn, v)
        if h > 1:
            out = dc.reshape(dc.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm residual block: LN -> attention -> residual, LN -> ELU feedforward -> residual."""

    def __init__(self, dim, heads, ff_dim, rng, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = SelfAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ff1 = Linear(dim, ff_dim, rng, dtype)
        self.ff2 = Linear(ff_dim, dim, rng, dtype)

    def __call__(self, x, mask):
        x = dc.add(x, self.attn(self.norm1(x), mask))
        return dc.add(x, self.ff2(dc.elu(self.ff1(self.norm2(x)))))


class KeyframeEncoder(Module):
    """Sequence-to-token encoder: token embedding, transformer blocks, masked max-pool.

    No positional encoding; tokens carry their own time-to-goal, so the output
    is invariant to the order of the goal tokens.
    """

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.embed = Linear(cfg.token_dim, cfg.model_dim, rng, dtype)
        self.blocks = [TransformerBlock(cfg.model_dim, cfg.num_heads, cfg.feedforward_dim, rng, dtype)
                       for _ in range(cfg.num_layers)]

    def __call__(self, tokens, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2 or mask.shape != tuple(tokens.shape[:2]):
            raise dc.ShapeError(f"mask shape {mask.shape} does not match tokens {tokens.shape}")
        if mask.all(axis=1).any():
            raise ValueError("every token is masked; the self-goal token must stay visible")
        h = self.embed(dc.as_tensor(tokens))
        for block in self.blocks:
            h = block(h, mask)
        h = dc.masked_fill(h, mask[:, :, None], MASK_FILL)
        return dc.max_over_axis(h, axis=1)


LOG_2PI = math.log(2 * math.pi)


class PolicyNet(Module):
    """Diagonal Gaussian policy with a state-independent learnable log-std."""

    def __init__(self, cfg: ModelConfig, token_dim, action_dim, rng, dtype=np.float64):
        self.encoder = KeyframeEncoder(cfg.encoder_config(token_dim), rng, dtype)
        self.trunk = MLP(self.encoder.cfg.model_dim, cfg.scaled(cfg.mlp_dims), action_dim, rng, dtype,
                         out_gain=0.01)
        self.log_std = dc.parameter(np.full(action_dim, math.log(cfg.init_std), dtype=dtype))
        self.action_dim = action_dim

    def __call__(self, tokens, mask):
        mean = self.trunk(self.encoder(tokens, mask))
        return mean, dc.exp(self.log_std)

    def distribution(self, tokens, mask):
        """Mean tensor and log-std tensor."""
        return self.trunk(self.encoder(tokens, mask)), self.log_std

    def act(self, tokens, mask, rng=None, deterministic=False):
        """Sample actions without building a graph; returns (actions, log_probs, mean)."""
        with dc.no_grad():
            mean = self.trunk(self.encoder(tokens, mask)).data
        if deterministic or rng is None:
            actions = mean.copy()
        else:
            std = np.exp(self.log_std.data)
            actions = mean + std * rng.standard_normal(mean.shape).astype(mean.dtype)
        return actions, gaussian_log_prob_np(actions, mean, self.log_std.data), mean


def gaussian_log_prob(actions, mean: Tensor, log_std: Tensor) -> Tensor:
    """Log-density of a diagonal Gaussian, summed over the action axis."""
    z = dc.div(dc.sub(actions, mean), dc.exp(log_std))
    per_dim = dc.add(dc.scale(dc.square(z), -0.5), dc.scale(log_std, -1.0))
    return dc.add(dc.sum_(per_dim, axis=-1), mean.dtype.type(-0.5 * LOG_2PI * mean.shape[-1]))


def gaussian_log_prob_np(actions, mean, log_std):
    z = (actions - mean) / np.exp(log_std)
    return (-0.5 * z * z - log_std).sum(-1) - 0.5 * LOG_2PI * mean.shape[-1]


def gaussian_entropy(log_std: Tensor) -> Tensor:
    return dc.add(dc.sum_(log_std), log_std.dtype.type(0.5 * (1 + LOG_2PI) * log_std.shape[-1]))


class Critic(Module):
    def __init__(self, cfg: ModelConfig, token_dim, rng, dtype=np.float64):
        enc_cfg = cfg.encoder_config(token_dim)
        if cfg.critic_input == "pooled":
            enc_cfg.num_layers = 0
        elif cfg.critic_input != "sequence":
            raise ValueError(f"unknown critic_input {cfg.critic_input!r}")
        self.encoder = KeyframeEncoder(enc_cfg, rng, dtype)
        self.head = MLP(enc_cfg.model_dim, cfg.scaled(cfg.mlp_dims), 1, rng, dtype)

    def __call__(self, tokens, mask):
        v = self.head(self.encoder(tokens, mask))
        return dc.reshape(v, v.shape[:-1])


class CriticSet(Module):
    """One independent value network per reward group."""

    def __init__(self, cfg: ModelConfig, token_dim, group_names, rng, dtype=np.float64):
        self.group_names = list(group_names)
        self.critics = [Critic(cfg, token_dim, rng, dtype) for _ in self.group_names]

    def __len__(self):
        return len(self.critics)

    def __call__(self, tokens, mask, group_index):
        if not 0 <= group_index < len(self.critics):
            raise IndexError(f"group index {group_index} out of range for {len(self.critics)} critics")
        return self.critics[group_index](tokens, mask)

    def values(self, tokens, mask):
        """All critics' values without a graph, shape (n_groups, batch)."""
        with dc.no_grad():
            return np.stack([c(tokens, mask).data for c in self.critics])


class Discriminator(Module):
    """ELU MLP on a style-transition feature vector; raw scalar output.

    Inputs are standardized with fixed statistics (set from the expert data).
    """

    def __init__(self, n_in, hidden, rng, dtype=np.float64):
        dims = [n_in, *hidden]
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], 1, rng, dtype)
        self.feature_mean = np.zeros(n_in, dtype=dtype)
        self.feature_std = np.ones(n_in, dtype=dtype)

    def set_normalizer(self, features):
        f = np.asarray(features, dtype=np.float64)
        dtype = self.feature_mean.dtype
        self.feature_mean = f.mean(0).astype(dtype)
        self.feature_std = np.maximum(f.std(0), 1e-2).astype(dtype)

    def normalize(self, x):
        return ((np.asarray(x) - self.feature_mean) / self.feature_std).astype(self.feature_mean.dtype)

    def __call__(self, x):
        """D on raw (un-normalized) features; returns shape (batch,)."""
        h = dc.as_tensor(self.normalize(x))
        for layer in self.layers:
            h = dc.elu(layer(h))
        d = self.out(h)
        return dc.reshape(d, d.shape[:-1])

    def input_gradient(self, x):
        """dD/dx (w.r.t. normalized features) built from differentiable ops, so a
        penalty on it can be backpropagated into the weights."""
        h = dc.as_tensor(self.normalize(x))
        pre = []
        for layer in self.layers:
            z = layer(h)
            pre.append(z)
            h = dc.elu(z)
        g = dc.reshape(self.out.weight, (self.out.weight.shape[0],))
        g = dc.mul(dc.elu_grad(pre[-1]), g)
        for i in range(len(self.layers) - 1, -1, -1):
            g = dc.matmul(g, dc.transpose(self.layers[i].weight))
            if i > 0:
                g = dc.mul(dc.elu_grad(pre[i - 1]), g)
        return g
