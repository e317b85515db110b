"""Exponential-kernel rewards, sparse goal gating and the adversarial style reward."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .planarenv import wrap_angle

GROUPS = ("regularization", "style", "goal")
DEFAULT_ADVANTAGE_WEIGHTS = {"regularization": 0.1, "style": 0.5, "goal": 0.5}


@dataclass(frozen=True)
class KernelSpec:
    sigma: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"kernel sensitivity must be positive, got {self.sigma}")
        if self.delta < 0:
            raise ValueError(f"kernel tolerance must be non-negative, got {self.delta}")


def kernel(x, spec: KernelSpec):
    """exp(-(max(0, |x| - delta) / sigma)^2) with the Euclidean norm over the last axis.

    Scalars and 0-d arrays are treated as 1-vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    norm = np.abs(x) if x.ndim == 0 else np.linalg.norm(x, axis=-1)
    return np.exp(-np.square(np.maximum(0.0, norm - spec.delta) / spec.sigma))


ACTION_RATE = KernelSpec(8.0, 0.0)
BASE_ACCELERATION = KernelSpec(8.0, 0.0)
JOINT_ACCELERATION = KernelSpec(150.0, 10.0)
JOINT_SOFT_LIMITS = KernelSpec(0.1, 0.0)

GOAL_POSITION = KernelSpec(0.2)
GOAL_ROLL = KernelSpec(0.1)
GOAL_PITCH = KernelSpec(0.1)
GOAL_YAW = KernelSpec(0.3)


def angle_kernel(angle, spec: KernelSpec):
    """Elementwise kernel of wrapped scalar angles (any shape)."""
    a = wrap_angle(np.asarray(angle, dtype=np.float64))
    return kernel(a[..., None], spec)


def goal_posture_spec(num_joints):
    return KernelSpec(0.2 * math.sqrt(num_joints))


def soft_limit_violation(theta, lower, upper):
    return np.maximum(np.maximum(theta - upper, lower - theta), 0.0)


def regularization_terms(action_rate, base_acc, joint_acc, theta, soft_limit):
    """Individual regularization kernels; inputs carry a leading batch axis."""
    return {
        "action_rate": kernel(action_rate, ACTION_RATE),
        "base_acceleration": kernel(base_acc, BASE_ACCELERATION),
        "joint_acceleration": kernel(joint_acc, JOINT_ACCELERATION),
        "joint_soft_limits": kernel(soft_limit_violation(theta, -soft_limit, soft_limit), JOINT_SOFT_LIMITS),
    }


def regularization_reward(action_rate, base_acc, joint_acc, theta, soft_limit):
    terms = regularization_terms(action_rate, base_acc, joint_acc, theta, soft_limit)
    return np.prod(np.stack(list(terms.values())), axis=0)


def finite_difference_rates(prev, new, action, dt, first_step):
    """Backward differences for action rate, horizontal base acceleration and joint acceleration.

    ``prev``/``new`` are EnvStates around one step; envs on their first step get zeros.
    """
    action_rate = (np.asarray(action) - prev.a_prev) / dt
    base_acc = (new.world_velocity() - prev.world_velocity()) / dt
    joint_acc = (new.theta_dot - prev.theta_dot) / dt
    z = np.asarray(first_step, dtype=bool)
    for arr in (action_rate, base_acc, joint_acc):
        arr[z] = 0.0
    return action_rate, base_acc, joint_acc


def sparse_gate(x, t, t_hat):
    """Pass ``x`` only where the clock equals the keyframe time."""
    return np.where(np.asarray(t) == np.asarray(t_hat), x, 0.0)


def goal_kernel_product(num_joints, position=None, yaw=None, posture=None, roll=None, pitch=None):
    """Product of goal kernels over the components given (None = absent)."""
    out = 1.0
    if position is not None:
        out = out * kernel(position, GOAL_POSITION)
    if roll is not None:
        out = out * angle_kernel(roll, GOAL_ROLL)
    if pitch is not None:
        out = out * angle_kernel(pitch, GOAL_PITCH)
    if yaw is not None:
        out = out * angle_kernel(yaw, GOAL_YAW)
    if posture is not None:
        out = out * kernel(posture, goal_posture_spec(num_joints))
    return out


def goal_reward(state, kb):
    """Sparse goal reward for every env at its current clock.

    Returns (reward (B,), hit index (B,) or -1, position error (B,), yaw error (B,),
    posture error (B, Nj)) where errors are world-frame target minus state.
    """
    b, nk = kb.steps.shape
    valid = np.arange(nk)[None, :] < kb.count[:, None]
    hits = valid & (kb.steps == state.t[:, None])
    hit_any = hits.any(1)
    idx = np.where(hit_any, np.argmax(hits, axis=1), -1)
    j = np.maximum(idx, 0)
    rows = np.arange(b)
    present = kb.present[rows, j]
    pos_err = kb.position[rows, j] - state.p
    yaw_err = wrap_angle(kb.yaw[rows, j] - state.yaw)
    post_err = kb.posture[rows, j] - state.theta
    nj = state.theta.shape[1]
    k = np.ones(b)
    k = np.where(present[:, 0], k * kernel(pos_err, GOAL_POSITION), k)
    k = np.where(present[:, 1], k * angle_kernel(yaw_err, GOAL_YAW), k)
    k = np.where(present[:, 2], k * kernel(post_err, goal_posture_spec(nj)), k)
    reward = np.where(hit_any, k, 0.0)
    return reward, idx, pos_err, yaw_err, post_err


# ---------------------------------------------------------------------- style

def style_features(v_body, omega, theta, theta_dot):
    """Per-state style features: body velocity, yaw rate, joint angles and velocities (no global pose)."""
    return np.concatenate([v_body, np.asarray(omega)[:, None], theta, theta_dot], axis=1)


def state_style_features(state):
    return style_features(state.v, state.omega, state.theta, state.theta_dot)


def style_reward(d):
    return np.maximum(1.0 - 0.25 * np.square(np.asarray(d, dtype=np.float64) - 1.0), 0.0)


def discriminator_losses(disc, expert, policy, gp_weight=5.0):
    """Least-squares discriminator loss with a gradient penalty on expert samples.

    Returns (total loss, penalty term, stats) where the penalty is the mean squared
    norm of dD/dx at expert inputs (before weighting).
    """
    if len(expert) == 0 or len(policy) == 0:
        raise ValueError("discriminator batches must be non-empty")
    d_exp = disc(expert)
    d_pol = disc(policy)
    ls = dc.add(dc.mean(dc.square(dc.sub(d_exp, 1.0))), dc.mean(dc.square(dc.add(d_pol, 1.0))))
    g = disc.input_gradient(expert)
    gp = dc.mean(dc.sum_(dc.square(g), axis=-1))
    total = dc.add(ls, dc.scale(gp, gp_weight))
    stats = {"disc_loss": float(ls.data), "disc_gp": float(gp.data),
             "disc_expert_mean": float(d_exp.data.mean()), "disc_policy_mean": float(d_pol.data.mean())}
    return total, gp, stats
