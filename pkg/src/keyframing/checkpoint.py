"""Checkpoints: ``manifest.json`` plus ``params.bin`` of little-endian float32 arrays in manifest order."""
from __future__ import annotations

import json
import os

import numpy as np

from .config import RunConfig, config_from_dict

FORMAT = "f32le"
ROLLOUT_FILE = "rollout_state.npz"
KB_FIELDS = ("steps", "position", "yaw", "posture", "present", "count")


def _entries(trainer):
    out = []
    for prefix, module in trainer.named_modules():
        for name, p in module.named_parameters():
            out.append((f"{prefix}.{name}", p.data))
    out.append(("discriminator.feature_mean", trainer.disc.feature_mean))
    out.append(("discriminator.feature_std", trainer.disc.feature_std))
    for opt_name, opt in trainer.optimizers.items():
        for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
            out.append((f"optimizer.{opt_name}.m.{i}", m))
            out.append((f"optimizer.{opt_name}.v.{i}", v))
    return out


def write_arrays(directory, arrays, meta):
    """Write named arrays and a manifest carrying ``meta``; returns the manifest."""
    os.makedirs(directory, exist_ok=True)
    entries, offset = [], 0
    tmp_bin = os.path.join(directory, "params.bin.tmp")
    with open(tmp_bin, "wb") as fh:
        for name, arr in arrays:
            flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
            fh.write(flat.tobytes())
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                            "count": int(flat.size), "dtype": "float32"})
            offset += int(flat.size)
    manifest = {"format": FORMAT, "version": 1, **meta, "entries": entries}
    tmp_manifest = os.path.join(directory, "manifest.json.tmp")
    with open(tmp_manifest, "w") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp_bin, os.path.join(directory, "params.bin"))
    os.replace(tmp_manifest, os.path.join(directory, "manifest.json"))
    return manifest


def read_arrays(directory):
    """Returns (manifest, {name: float32 array})."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    flat = np.fromfile(os.path.join(directory, "params.bin"), dtype="<f4")
    arrays = {}
    for e in manifest["entries"]:
        chunk = flat[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise ValueError(f"params.bin is truncated at entry {e['name']}")
        arrays[e["name"]] = chunk.reshape(e["shape"])
    return manifest, arrays


def save_checkpoint(trainer, directory):
    meta = {
        "iteration": trainer.iteration,
        "config_hash": trainer.cfg.hash(),
        "config": trainer.cfg.to_dict(),
        "learning_rate": trainer.lr,
        "optimizers": {k: {"step": o.state.step, "lr": o.lr} for k, o in trainer.optimizers.items()},
        "rng": trainer.rng.bit_generator.state,
        "env_rngs": [r.bit_generator.state for r in trainer.env.rngs],
        "style_dim": int(trainer.expert_pairs.shape[1]),
    }
    manifest = write_arrays(directory, _entries(trainer), meta)
    _save_rollout_state(trainer, directory)
    return manifest


def _save_rollout_state(trainer, directory):
    """In-flight env and episode bookkeeping at full precision, so a resumed run continues exactly."""
    env = trainer.env
    arrays = {f"state.{k}": v for k, v in vars(env.state).items()}
    arrays.update({f"kb.{k}": getattr(env.kb, k) for k in KB_FIELDS})
    arrays.update(push_step=env.push_step, push_velocity=env.push_velocity,
                  random_probability=np.array(env.random_probability),
                  ep_sums=trainer._ep_sums, ep_len=trainer._ep_len,
                  episode_sums=np.array([e[0] for e in trainer.episodes]).reshape(-1, trainer._ep_sums.shape[1]),
                  episode_len=np.array([e[1] for e in trainer.episodes], dtype=np.int64),
                  episode_reason=np.array([e[2] for e in trainer.episodes], dtype=np.int64),
                  goal_errors=np.array(trainer.goal_errors, dtype=np.float64).reshape(-1, 2))
    tmp = os.path.join(directory, ROLLOUT_FILE + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, os.path.join(directory, ROLLOUT_FILE))


def _restore_rollout_state(trainer, directory):
    path = os.path.join(directory, ROLLOUT_FILE)
    if not os.path.exists(path):
        return False
    env = trainer.env
    with np.load(path) as z:
        for k in vars(env.state):
            setattr(env.state, k, z[f"state.{k}"].copy())
        for k in KB_FIELDS:
            setattr(env.kb, k, z[f"kb.{k}"].copy())
        env.push_step, env.push_velocity = z["push_step"].copy(), z["push_velocity"].copy()
        env.random_probability = float(z["random_probability"])
        trainer._ep_sums, trainer._ep_len = z["ep_sums"].copy(), z["ep_len"].copy()
        trainer.episodes.clear()
        for s, n, r in zip(z["episode_sums"], z["episode_len"], z["episode_reason"]):
            trainer.episodes.append((s.copy(), int(n), int(r)))
        trainer.goal_errors.clear()
        trainer.goal_errors.extend((float(a), float(b)) for a, b in z["goal_errors"])
    return True


def _assign(module_params, arrays, prefix):
    for name, p in module_params:
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint lacks parameter {key}")
        a = arrays[key]
        if tuple(a.shape) != p.data.shape:
            raise ValueError(f"shape mismatch for {key}: {a.shape} vs {p.data.shape}")
        p.data = a.astype(p.data.dtype)


def restore_trainer(trainer, directory):
    """Load parameters, optimizer moments, RNG streams, the iteration counter and in-flight episodes."""
    manifest, arrays = read_arrays(directory)
    for prefix, module in trainer.named_modules():
        _assign(module.named_parameters(), arrays, prefix)
    dt = trainer.disc.feature_mean.dtype
    trainer.disc.feature_mean = arrays["discriminator.feature_mean"].astype(dt)
    trainer.disc.feature_std = arrays["discriminator.feature_std"].astype(dt)
    for name, opt in trainer.optimizers.items():
        info = manifest["optimizers"][name]
        opt.state.step = info["step"]
        opt.lr = info["lr"]
        for i in range(len(opt.state.m)):
            opt.state.m[i] = arrays[f"optimizer.{name}.m.{i}"].astype(opt.state.m[i].dtype)
            opt.state.v[i] = arrays[f"optimizer.{name}.v.{i}"].astype(opt.state.v[i].dtype)
    trainer.lr = manifest["learning_rate"]
    trainer.iteration = manifest["iteration"]
    trainer.rng.bit_generator.state = manifest["rng"]
    for r, st in zip(trainer.env.rngs, manifest["env_rngs"]):
        r.bit_generator.state = st
    _restore_rollout_state(trainer, directory)
    return manifest


def load_policy(directory, dtype=np.float32):
    """Rebuild (RunConfig, PolicyNet) from a checkpoint."""
    from .trainer import build_networks
    manifest, arrays = read_arrays(directory)
    cfg: RunConfig = config_from_dict(manifest["config"])
    policy, _, _ = build_networks(cfg, manifest["style_dim"], dtype)
    _assign(policy.named_parameters(), arrays, "policy")
    return cfg, policy
