"""Keyframe-conditioned locomotion policies trained with multi-critic PPO on a planar robot."""
from .config import RunConfig, desk_config, load_config, save_config
from .trainer import Trainer

__version__ = "0.1.0"
