"""Data-driven actor-critic training (PPO and TD3) against the PDE environment."""

from pdepolicy.rl.common import ObsNormalizer, RlConfig, TransitionBatch, collect_episodes
from pdepolicy.rl.nets import ActorNet, QCriticNet, ValueCriticNet
from pdepolicy.rl.ppo import PpoTrainer
from pdepolicy.rl.td3 import Td3Trainer

__all__ = [
    "RlConfig",
    "ObsNormalizer",
    "TransitionBatch",
    "collect_episodes",
    "ActorNet",
    "ValueCriticNet",
    "QCriticNet",
    "PpoTrainer",
    "Td3Trainer",
]
