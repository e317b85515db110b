"""Planar rigid base with PD-tracked joints, synthetic reference motions, RSI and termination.

All state arrays carry a leading environment axis so one ``EnvState`` holds a
whole batch; a single environment is a batch of one.
"""
from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

DT = 0.02
FPS = 50
TWO_PI = 2 * math.pi

REASONS = ("none", "after_last_goal", "timeout", "joint_limit", "diverged")
NONE, AFTER_LAST_GOAL, TIMEOUT, JOINT_LIMIT, DIVERGED = range(len(REASONS))


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64) if np.isscalar(a) else a
    return a - TWO_PI * np.ceil((a - math.pi) / TWO_PI)


def rotate(vec, angle):
    """Rotate 2-vectors (..., 2) by ``angle`` (...)."""
    c, s = np.cos(angle), np.sin(angle)
    x, y = vec[..., 0], vec[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


@dataclass
class EnvConfig:
    num_joints: int = 4
    dt: float = DT
    lin_acc_max: float = 8.0
    yaw_acc_max: float = 20.0
    lin_damping: float = 0.5
    yaw_damping: float = 2.0
    kp: float = 40.0
    kd: float = 2.0
    joint_acc_max: float = 500.0
    soft_limit: float = 1.6
    hard_limit: float = 2.0
    lin_action_scale: float = 2.0
    yaw_action_scale: float = 4.0
    joint_action_scale: float = 0.25
    max_episode_steps: int = 500
    position_bound: float = 50.0
    rsi_probability: float = 0.8
    push_enabled: bool = False
    push_probability: float = 0.2
    push_velocity_range: list = field(default_factory=lambda: [0.0, 1.0])

    @property
    def action_dim(self):
        return 3 + self.num_joints

    @property
    def default_posture(self):
        return np.zeros(self.num_joints)

    def validate(self):
        if not 0 < self.soft_limit < self.hard_limit:
            raise ValueError("soft joint limits must lie strictly inside the hard limits")
        if self.num_joints < 1 or self.dt <= 0:
            raise ValueError(f"invalid env config {self}")
        if not 0 <= self.rsi_probability <= 1:
            raise ValueError("rsi_probability must be in [0, 1]")


@dataclass
class EnvState:
    p: np.ndarray           # (B, 2) world position, m
    yaw: np.ndarray         # (B,) rad in (-pi, pi]
    v: np.ndarray           # (B, 2) body-frame linear velocity, m/s
    omega: np.ndarray       # (B,) yaw rate, rad/s
    theta: np.ndarray       # (B, Nj) joint angles, rad
    theta_dot: np.ndarray   # (B, Nj)
    a_prev: np.ndarray      # (B, A) previous raw action
    t: np.ndarray           # (B,) integer step count since reset

    @property
    def batch(self):
        return self.p.shape[0]

    @property
    def clock(self):
        return self.t * DT

    def copy(self):
        return copy.deepcopy(self)

    def take(self, idx):
        return EnvState(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def put(self, idx, other: "EnvState"):
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def world_velocity(self):
        return rotate(self.v, self.yaw)


def default_state(cfg: EnvConfig, batch=1) -> EnvState:
    nj, a = cfg.num_joints, cfg.action_dim
    return EnvState(
        p=np.zeros((batch, 2)), yaw=np.zeros(batch), v=np.zeros((batch, 2)), omega=np.zeros(batch),
        theta=np.tile(cfg.default_posture, (batch, 1)), theta_dot=np.zeros((batch, nj)),
        a_prev=np.zeros((batch, a)), t=np.zeros(batch, dtype=np.int64))


def physical_action(raw, cfg: EnvConfig):
    """Map raw policy outputs to clamped (a_lin, a_yaw, joint targets)."""
    raw = np.asarray(raw, dtype=np.float64)
    a_lin = np.clip(cfg.lin_action_scale * raw[:, :2], -cfg.lin_acc_max, cfg.lin_acc_max)
    a_yaw = np.clip(cfg.yaw_action_scale * raw[:, 2], -cfg.yaw_acc_max, cfg.yaw_acc_max)
    target = np.clip(cfg.default_posture + cfg.joint_action_scale * raw[:, 3:],
                     -cfg.hard_limit, cfg.hard_limit)
    return a_lin, a_yaw, target


def step(state: EnvState, action, cfg: EnvConfig) -> EnvState:
    """Semi-implicit Euler at ``cfg.dt``; ``action`` is the raw (B, A) policy output."""
    dt = cfg.dt
    a_lin, a_yaw, target = physical_action(action, cfg)
    v = state.v + dt * (a_lin - cfg.lin_damping * state.v)
    p = state.p + dt * rotate(v, state.yaw)
    omega = state.omega + dt * (a_yaw - cfg.yaw_damping * state.omega)
    yaw = wrap_angle(state.yaw + dt * omega)
    acc = np.clip(cfg.kp * (target - state.theta) - cfg.kd * state.theta_dot,
                  -cfg.joint_acc_max, cfg.joint_acc_max)
    theta_dot = state.theta_dot + dt * acc
    theta = state.theta + dt * theta_dot
    return EnvState(p=p, yaw=yaw, v=v, omega=omega, theta=theta, theta_dot=theta_dot,
                    a_prev=np.array(action, dtype=np.float64), t=state.t + 1)


@dataclass
class TerminationRecord:
    done: np.ndarray        # (B,) bool
    bootstrap: np.ndarray   # (B,) bool; true for time-outs and after-last-goal
    reason: np.ndarray      # (B,) int index into REASONS

    def reason_names(self):
        return [REASONS[r] for r in self.reason]


def check_termination(state: EnvState, last_goal_step, cfg: EnvConfig,
                      mask_after_steps: int = 50) -> TerminationRecord:
    """Failures win over after-last-goal, which wins over time-out."""
    last_goal_step = np.broadcast_to(np.asarray(last_goal_step), state.t.shape)
    reason = np.full(state.batch, NONE, dtype=np.int64)
    reason[state.t >= cfg.max_episode_steps] = TIMEOUT
    reason[state.t > last_goal_step + mask_after_steps] = AFTER_LAST_GOAL
    bad = ~(np.isfinite(state.p).all(1) & np.isfinite(state.v).all(1) & np.isfinite(state.theta).all(1))
    far = np.zeros(state.batch, dtype=bool)
    far[~bad] = np.linalg.norm(state.p[~bad], axis=1) > cfg.position_bound
    reason[np.abs(np.nan_to_num(state.theta, nan=np.inf)).max(1) > cfg.hard_limit] = JOINT_LIMIT
    reason[bad | far] = DIVERGED
    done = reason != NONE
    bootstrap = (reason == AFTER_LAST_GOAL) | (reason == TIMEOUT)
    return TerminationRecord(done, bootstrap, reason)


# ------------------------------------------------------------------ dataset

@dataclass
class MotionClip:
    pos: np.ndarray         # (T, 2) world
    yaw: np.ndarray         # (T,)
    joints: np.ndarray      # (T, Nj)
    vel: np.ndarray         # (T, 2) world-frame finite differences
    yaw_rate: np.ndarray    # (T,)
    joint_vel: np.ndarray   # (T, Nj)

    def __len__(self):
        return len(self.pos)

    def body_velocity(self):
        return rotate(self.vel, -self.yaw)

    @classmethod
    def from_poses(cls, pos, yaw, joints, dt=DT):
        return cls(pos, yaw, joints, _forward_diff(pos, dt), _forward_diff(yaw, dt, wrap=True),
                   _forward_diff(joints, dt))


def _forward_diff(x, dt, wrap=False):
    d = np.diff(x, axis=0)
    if wrap:
        d = wrap_angle(d)
    d = d / dt
    return np.concatenate([d, d[-1:]], axis=0)


@dataclass
class ReferenceDataset:
    clips: list
    num_joints: int
    fps: int = FPS

    def __post_init__(self):
        self._offsets = np.cumsum([0] + [len(c) for c in self.clips])

    @property
    def total_frames(self):
        return int(self._offsets[-1])

    def __len__(self):
        return len(self.clips)

    def locate(self, flat_index):
        clip = int(np.searchsorted(self._offsets, flat_index, side="right") - 1)
        return clip, int(flat_index - self._offsets[clip])

    def sample_frame(self, rng):
        """Uniform over all frames; returns (clip index, frame index)."""
        if self.total_frames == 0:
            raise ValueError("reference dataset is empty")
        return self.locate(int(rng.integers(self.total_frames)))

    def style_transitions(self):
        """All consecutive-frame style-feature pairs, shape (N, 2 * feature_dim)."""
        from .rewards import style_features
        out = []
        for c in self.clips:
            f = style_features(c.body_velocity(), c.yaw_rate, c.joints, c.joint_vel)
            out.append(np.concatenate([f[:-1], f[1:]], axis=1))
        return np.concatenate(out, axis=0)


@dataclass
class DatasetConfig:
    clips: int = 24
    seconds: float = 6.0
    max_speed: float = 1.2
    zero_speed_fraction: float = 0.15
    max_turn_rate: float = 0.8
    base_frequency: float = 1.0
    frequency_per_speed: float = 1.0
    amplitude_range: list = field(default_factory=lambda: [0.15, 0.35])


GAIT_PHASES = (0.0, math.pi, math.pi, 0.0)


def generate_reference_dataset(cfg: DatasetConfig, num_joints: int, seed: int) -> ReferenceDataset:
    """Synthetic gait clips: smooth arcs at a per-clip speed, sinusoidal joints whose
    frequency grows with speed."""
    if cfg.seconds * FPS < 2 or cfg.clips < 1:
        raise ValueError("need at least one clip of two frames")
    rng = np.random.default_rng(seed)
    n = int(round(cfg.seconds * FPS)) + 1
    t = np.arange(n) * DT
    clips = []
    for _ in range(cfg.clips):
        speed = 0.0 if rng.random() < cfg.zero_speed_fraction else rng.uniform(0.1, cfg.max_speed)
        yaw0 = rng.uniform(-math.pi, math.pi)
        if speed > 0:
            amps = rng.uniform(-cfg.max_turn_rate, cfg.max_turn_rate, 2) / 2
            freqs = rng.uniform(0.05, 0.3, 2)
            phases = rng.uniform(0, TWO_PI, 2)
            turn = sum(a * np.sin(TWO_PI * f * t + ph) for a, f, ph in zip(amps, freqs, phases))
        else:
            turn = np.zeros(n)
        heading = yaw0 + np.concatenate([[0.0], np.cumsum(turn[:-1]) * DT])
        step_vec = speed * DT * np.stack([np.cos(heading), np.sin(heading)], axis=1)
        start = rng.uniform(-1.0, 1.0, 2)
        pos = start + np.concatenate([[[0.0, 0.0]], np.cumsum(step_vec[:-1], axis=0)])
        freq = cfg.base_frequency + cfg.frequency_per_speed * speed
        amp = rng.uniform(*cfg.amplitude_range, num_joints)
        phase = np.array([GAIT_PHASES[k % 4] for k in range(num_joints)]) + rng.uniform(-0.2, 0.2, num_joints)
        phase0 = rng.uniform(0, TWO_PI)
        offset = rng.uniform(-0.05, 0.05, num_joints)
        joints = amp * np.sin(TWO_PI * freq * t[:, None] + phase + phase0) + offset
        clips.append(MotionClip.from_poses(pos, wrap_angle(heading), joints))
    return ReferenceDataset(clips, num_joints)


def rsi_state(dataset: ReferenceDataset, clip: int, frame: int, cfg: EnvConfig) -> EnvState:
    c = dataset.clips[clip]
    s = default_state(cfg, 1)
    s.p[0] = c.pos[frame]
    s.yaw[0] = c.yaw[frame]
    s.v[0] = rotate(c.vel[frame], -c.yaw[frame])
    s.omega[0] = c.yaw_rate[frame]
    s.theta[0] = c.joints[frame]
    s.theta_dot[0] = c.joint_vel[frame]
    return s


def reset(rng, cfg: EnvConfig, dataset: ReferenceDataset | None):
    """Draw an initial state: default with probability 1 - rsi_probability, otherwise a
    uniformly drawn reference frame.  Returns (state, (clip, frame) or None)."""
    if rng.random() < cfg.rsi_probability:
        if dataset is None or dataset.total_frames == 0:
            raise ValueError("RSI requested but the reference dataset is empty")
        clip, frame = dataset.sample_frame(rng)
        return rsi_state(dataset, clip, frame, cfg), (clip, frame)
    return default_state(cfg, 1), None


# ----------------------------------------------------------------- file I/O

def _dataset_columns(nj):
    return (["px", "py", "yaw", "vx", "vy", "yaw_rate"] + [f"theta{k}" for k in range(nj)]
            + [f"dtheta{k}" for k in range(nj)])


def _clip_rows(c: MotionClip):
    return np.column_stack([c.pos, c.yaw, c.vel, c.yaw_rate, c.joints, c.joint_vel])


def save_dataset(ds: ReferenceDataset, path, fmt="f32le"):
    """One file: a JSON header line, then either little-endian float32 rows or CSV blocks."""
    if fmt not in ("f32le", "csv"):
        raise ValueError(f"unknown dataset format {fmt!r}")
    header = {"version": 1, "format": fmt, "fps": ds.fps, "num_joints": ds.num_joints,
              "clip_count": len(ds.clips), "clip_frames": [len(c) for c in ds.clips],
              "columns": _dataset_columns(ds.num_joints)}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for i, c in enumerate(ds.clips):
            rows = _clip_rows(c)
            if fmt == "f32le":
                fh.write(rows.astype("<f4").tobytes())
            else:
                buf = io.StringIO()
                buf.write(f"#clip,{i},{len(c)}\n")
                buf.write(",".join(header["columns"]) + "\n")
                for row in rows:
                    buf.write(",".join(repr(float(x)) for x in row) + "\n")
                fh.write(buf.getvalue().encode())


def load_dataset(path) -> ReferenceDataset:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        body = fh.read()
    nj = header["num_joints"]
    ncol = len(header["columns"])
    if header.get("fps") != FPS:
        raise ValueError(f"dataset frame rate {header.get('fps')} != {FPS}")
    if header["format"] == "f32le":
        flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
        blocks = np.split(flat.reshape(-1, ncol), np.cumsum(header["clip_frames"])[:-1])
    elif header["format"] == "csv":
        blocks, current = [], None
        for line in body.decode().splitlines():
            if line.startswith("#clip"):
                current = []
                blocks.append(current)
            elif line and not line[0].isalpha():
                current.append([float(x) for x in line.split(",")])
        blocks = [np.array(b) for b in blocks]
    else:
        raise ValueError(f"unknown dataset format {header['format']!r}")
    clips = [MotionClip(b[:, 0:2], b[:, 2], b[:, 6:6 + nj], b[:, 3:5], b[:, 5], b[:, 6 + nj:6 + 2 * nj])
             for b in blocks]
    if len(clips) != header["clip_count"]:
        raise ValueError("dataset clip count does not match header")
    return ReferenceDataset(clips, nj, header["fps"])


def trajectory_columns(num_joints, action_dim):
    return (["t", "px", "py", "yaw", "vx", "vy", "omega"] + [f"theta{k}" for k in range(num_joints)]
            + [f"action{k}" for k in range(action_dim)])


def export_trajectory(path, states, actions):
    """Write a CSV trajectory; ``states`` is a list of single-env EnvState, ``actions`` (T, A)."""
    nj = states[0].theta.shape[1]
    cols = trajectory_columns(nj, len(actions[0]))
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for s, a in zip(states, actions):
            row = [float(s.clock[0]), *s.p[0], float(s.yaw[0]), *s.v[0], float(s.omega[0]), *s.theta[0], *a]
            fh.write(",".join(f"{x:.6g}" for x in row) + "\n")
