"""Keyframes, robot-centric goal errors, token sequences and keyframe sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .planarenv import DT, EnvConfig, EnvState, ReferenceDataset, rotate, wrap_angle

COMPONENTS = ("position", "yaw", "posture")
NO_GOAL = np.iinfo(np.int64).max // 4


@dataclass
class Keyframe:
    step: int
    position: np.ndarray | None = None
    yaw: float | None = None
    posture: np.ndarray | None = None

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError(f"keyframe time must be positive, got step {self.step}")
        if self.position is None and self.yaw is None and self.posture is None:
            raise ValueError("a keyframe needs at least one goal component")
        if self.position is not None:
            self.position = np.asarray(self.position, dtype=np.float64)

    @property
    def time(self):
        return self.step * DT

    @property
    def components(self):
        return tuple(c for c in COMPONENTS if getattr(self, c) is not None)


@dataclass
class KeyframeSet:
    keyframes: list = field(default_factory=list)

    def __post_init__(self):
        steps = [k.step for k in self.keyframes]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"keyframe times must strictly increase, got steps {steps}")

    def __len__(self):
        return len(self.keyframes)

    def __iter__(self):
        return iter(self.keyframes)

    def __getitem__(self, i):
        return self.keyframes[i]

    @property
    def last_step(self):
        return self.keyframes[-1].step if self.keyframes else 0


@dataclass
class KeyframeConfig:
    max_keyframes: int = 5
    variable_count: bool = True
    components: list = field(default_factory=lambda: ["position", "yaw"])
    interval_range: list = field(default_factory=lambda: [25, 50])
    radius_range: list = field(default_factory=lambda: [0.5, 1.0])
    direction_range: list = field(default_factory=lambda: [-math.pi / 3, math.pi / 3])
    delta_yaw_range: list = field(default_factory=lambda: [-math.pi / 3, math.pi / 3])
    mask_after_steps: int = 50
    time_scale: float = 2.0
    next_goal_only: bool = False
    curriculum_max: float = 0.8
    curriculum_ramp_end: float = 0.5

    def validate(self):
        bad = set(self.components) - set(COMPONENTS)
        if bad or not self.components:
            raise ValueError(f"components must be a non-empty subset of {COMPONENTS}, got {self.components}")
        lo, hi = self.interval_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid interval range {self.interval_range}")
        if self.max_keyframes < 0:
            raise ValueError("max_keyframes must be non-negative")


# ---------------------------------------------------------------- goal errors

@dataclass
class GoalError:
    position: np.ndarray   # (..., 2) base frame
    yaw: np.ndarray        # (...)
    posture: np.ndarray    # (..., Nj)
    time_to_goal: np.ndarray  # (...) seconds


def goal_error(state: EnvState, keyframe: Keyframe, t=None) -> GoalError:
    """Errors of a single keyframe from every env in ``state``; absent components are zero."""
    b, nj = state.batch, state.theta.shape[1]
    t = state.t if t is None else np.broadcast_to(t, (b,))
    pos = np.zeros((b, 2))
    yaw = np.zeros(b)
    posture = np.zeros((b, nj))
    if keyframe.position is not None:
        pos = rotate(keyframe.position - state.p, -state.yaw)
    if keyframe.yaw is not None:
        yaw = wrap_angle(keyframe.yaw - state.yaw)
    if keyframe.posture is not None:
        posture = np.asarray(keyframe.posture) - state.theta
    return GoalError(pos, yaw, posture, (keyframe.step - np.asarray(t)) * DT)


@dataclass
class KeyframeBatch:
    """Padded keyframes for a batch of envs."""

    steps: np.ndarray      # (B, Nk) int, NO_GOAL beyond count
    position: np.ndarray   # (B, Nk, 2)
    yaw: np.ndarray        # (B, Nk)
    posture: np.ndarray    # (B, Nk, Nj)
    present: np.ndarray    # (B, Nk, 3) bool
    count: np.ndarray      # (B,)

    @classmethod
    def empty(cls, batch, max_keyframes, num_joints):
        nk = max_keyframes
        return cls(np.full((batch, nk), NO_GOAL, dtype=np.int64), np.zeros((batch, nk, 2)),
                   np.zeros((batch, nk)), np.zeros((batch, nk, num_joints)),
                   np.zeros((batch, nk, 3), dtype=bool), np.zeros(batch, dtype=np.int64))

    @classmethod
    def from_sets(cls, sets, max_keyframes, num_joints):
        kb = cls.empty(len(sets), max_keyframes, num_joints)
        for i, ks in enumerate(sets):
            kb.assign(i, ks)
        return kb

    def assign(self, i, ks: KeyframeSet):
        nk = self.steps.shape[1]
        if len(ks) > nk:
            raise ValueError(f"{len(ks)} keyframes exceed the maximum of {nk}")
        self.steps[i] = NO_GOAL
        self.position[i] = 0
        self.yaw[i] = 0
        self.posture[i] = 0
        self.present[i] = False
        self.count[i] = len(ks)
        for j, k in enumerate(ks):
            self.steps[i, j] = k.step
            if k.position is not None:
                self.position[i, j] = k.position
                self.present[i, j, 0] = True
            if k.yaw is not None:
                self.yaw[i, j] = k.yaw
                self.present[i, j, 1] = True
            if k.posture is not None:
                self.posture[i, j] = k.posture
                self.present[i, j, 2] = True

    def last_step(self):
        valid = np.arange(self.steps.shape[1])[None, :] < self.count[:, None]
        return np.where(valid, self.steps, 0).max(axis=1, initial=0)


def batch_goal_errors(state: EnvState, kb: KeyframeBatch):
    """Per-keyframe errors for every env, absent components zeroed: (dp (B,Nk,2), dyaw, dtheta)."""
    rel = kb.position - state.p[:, None, :]
    dp = rotate(rel, -state.yaw[:, None]) * kb.present[..., 0:1]
    dyaw = wrap_angle(kb.yaw - state.yaw[:, None]) * kb.present[..., 1]
    dtheta = (kb.posture - state.theta[:, None, :]) * kb.present[..., 2:3]
    return dp, dyaw, dtheta


# --------------------------------------------------------------------- tokens

OBS_JOINT_VEL_SCALE = 0.1


def state_observation(state: EnvState):
    """Robot state part of every token: v, omega, joint angles, joint velocities, previous action."""
    return np.concatenate([state.v, state.omega[:, None], state.theta,
                           OBS_JOINT_VEL_SCALE * state.theta_dot, state.a_prev], axis=1)


def token_dim(env_cfg: EnvConfig):
    nj = env_cfg.num_joints
    state_dim = 3 + 2 * nj + env_cfg.action_dim
    return state_dim + 2 + 1 + nj + len(COMPONENTS) + 1


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (B, Nk+1, F)
    mask: np.ndarray    # (B, Nk+1) bool, True = ignore


def token_mask(kb: KeyframeBatch, t, mask_after_steps=50, next_goal_only=False):
    b, nk = kb.steps.shape
    t = np.asarray(t)[:, None]
    idx = np.arange(nk)[None, :]
    unused = idx >= kb.count[:, None]
    past = t > kb.steps + mask_after_steps
    goal_mask = unused | past
    if next_goal_only:
        upcoming = (~unused) & (kb.steps > t)
        first = np.where(upcoming.any(1), np.argmax(upcoming, axis=1), -1)
        goal_mask = idx != first[:, None]
    return np.concatenate([np.zeros((b, 1), dtype=bool), goal_mask], axis=1)


def build_tokens(state: EnvState, kb: KeyframeBatch, cfg: KeyframeConfig, dtype=np.float64) -> TokenSequence:
    """Row 0 is the self-goal [s_t, 0, 0]; row i is [s_t, goal error i, presence bits, time to goal]."""
    b, nk = kb.steps.shape
    s = state_observation(state)
    dp, dyaw, dtheta = batch_goal_errors(state, kb)
    ttg = np.where(kb.steps == NO_GOAL, 0, kb.steps - state.t[:, None]) * DT / cfg.time_scale
    goal = np.concatenate([dp, dyaw[..., None], dtheta, kb.present.astype(np.float64), ttg[..., None]], axis=2)
    goal = np.concatenate([np.zeros((b, 1, goal.shape[2])), goal], axis=1)
    tokens = np.concatenate([np.broadcast_to(s[:, None, :], (b, nk + 1, s.shape[1])), goal], axis=2)
    mask = token_mask(kb, state.t, cfg.mask_after_steps, cfg.next_goal_only)
    return TokenSequence(tokens.astype(dtype), mask)


def build_tokens_single(state: EnvState, keyframes: KeyframeSet, cfg: KeyframeConfig,
                        num_joints: int, dtype=np.float64) -> TokenSequence:
    kb = KeyframeBatch.from_sets([keyframes] * state.batch, cfg.max_keyframes, num_joints)
    return build_tokens(state, kb, cfg, dtype)


# ------------------------------------------------------------------- sampling

def sample_count(cfg: KeyframeConfig, rng):
    if cfg.max_keyframes == 0:
        return 0
    return int(rng.integers(1, cfg.max_keyframes + 1)) if cfg.variable_count else cfg.max_keyframes


def sample_intervals(cfg: KeyframeConfig, rng, n):
    lo, hi = cfg.interval_range
    return rng.integers(lo, hi + 1, size=n)


def sample_dataset_keyframes(dataset: ReferenceDataset, cfg: KeyframeConfig, rng, n,
                             start_pos, start_yaw, start=None, max_tries=100) -> KeyframeSet:
    """Keyframes read from a reference clip, re-anchored to the robot's initial pose.

    ``start`` optionally fixes (clip, frame); if that clip is too short for the
    drawn intervals a new start is drawn.
    """
    if len(dataset) == 0:
        raise ValueError("reference dataset is empty")
    if n == 0:
        return KeyframeSet([])
    offsets = np.cumsum(sample_intervals(cfg, rng, n))
    for _ in range(max_tries):
        clip, frame = start if start is not None else dataset.sample_frame(rng)
        if frame + offsets[-1] < len(dataset.clips[clip]):
            break
        start = None
    else:
        # rejection kept failing: draw uniformly over the start frames that fit
        room = [max(0, len(c) - int(offsets[-1])) for c in dataset.clips]
        if sum(room) == 0:
            raise ValueError("no reference clip is long enough for the sampled keyframe horizon")
        i = int(rng.integers(sum(room)))
        clip = int(np.searchsorted(np.cumsum(room), i, side="right"))
        frame = i - int(sum(room[:clip]))
    c = dataset.clips[clip]
    p0, yaw0 = c.pos[frame], c.yaw[frame]
    kfs = []
    for off in offsets:
        k = frame + int(off)
        local = rotate(c.pos[k] - p0, -yaw0)
        kfs.append(_keyframe(cfg, int(off), np.asarray(start_pos) + rotate(local, start_yaw),
                             float(wrap_angle(start_yaw + wrap_angle(c.yaw[k] - yaw0))), c.joints[k].copy()))
    return KeyframeSet(kfs)


def sample_random_keyframes(dataset: ReferenceDataset, cfg: KeyframeConfig, rng, n,
                            start_pos, start_yaw) -> KeyframeSet:
    """Each keyframe at a random radius and direction from the previous one; posture from a random frame."""
    if len(dataset) == 0:
        raise ValueError("reference dataset is empty")
    offsets = np.cumsum(sample_intervals(cfg, rng, n))
    pos, yaw = np.asarray(start_pos, dtype=np.float64), float(start_yaw)
    kfs = []
    for off in offsets:
        r = rng.uniform(*cfg.radius_range)
        d = rng.uniform(*cfg.direction_range)
        pos = pos + r * np.array([math.cos(yaw + d), math.sin(yaw + d)])
        yaw = float(wrap_angle(yaw + rng.uniform(*cfg.delta_yaw_range)))
        clip, frame = dataset.sample_frame(rng)
        kfs.append(_keyframe(cfg, int(off), pos, yaw, dataset.clips[clip].joints[frame].copy()))
    return KeyframeSet(kfs)


def _keyframe(cfg, step, pos, yaw, posture):
    comps = set(cfg.components)
    return Keyframe(step, pos if "position" in comps else None, yaw if "yaw" in comps else None,
                    posture if "posture" in comps else None)


def curriculum_mix(progress, p_max=0.8, ramp_end=0.5):
    """Probability of random (vs dataset) keyframe sampling at training ``progress`` in [0, 1]."""
    progress = min(max(float(progress), 0.0), 1.0)
    if ramp_end <= 0:
        return p_max
    return p_max * min(progress / ramp_end, 1.0)


# ------------------------------------------------------------- scenario files

def load_scenario(path, num_joints=None) -> KeyframeSet:
    """JSON array of {t_step, x, y, yaw?, posture?}."""
    with open(path) as fh:
        items = json.load(fh)
    return scenario_from_list(items, num_joints)


def scenario_from_list(items, num_joints=None) -> KeyframeSet:
    if not isinstance(items, list):
        raise ValueError("scenario must be a JSON array")
    kfs = []
    for i, it in enumerate(items):
        unknown = set(it) - {"t_step", "x", "y", "yaw", "posture"}
        if unknown:
            raise ValueError(f"scenario entry {i}: unknown keys {sorted(unknown)}")
        if "t_step" not in it:
            raise ValueError(f"scenario entry {i}: missing t_step")
        pos = None
        if "x" in it or "y" in it:
            if not ("x" in it and "y" in it):
                raise ValueError(f"scenario entry {i}: x and y must be given together")
            pos = np.array([it["x"], it["y"]], dtype=np.float64)
        posture = it.get("posture")
        if posture is not None and num_joints is not None and len(posture) != num_joints:
            raise ValueError(f"scenario entry {i}: posture has {len(posture)} joints, expected {num_joints}")
        kfs.append(Keyframe(int(it["t_step"]), pos, it.get("yaw"),
                            None if posture is None else np.asarray(posture, dtype=np.float64)))
    steps = [k.step for k in kfs]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"scenario t_step values must strictly increase, got {steps}")
    return KeyframeSet(kfs)


def scenario_to_list(ks: KeyframeSet):
    out = []
    for k in ks:
        d = {"t_step": k.step}
        if k.position is not None:
            d["x"], d["y"] = float(k.position[0]), float(k.position[1])
        if k.yaw is not None:
            d["yaw"] = float(k.yaw)
        if k.posture is not None:
            d["posture"] = [float(x) for x in k.posture]
        out.append(d)
    return out
