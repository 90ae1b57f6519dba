"""Twin-delayed deterministic actor-critic against the PDE environment.

The environment emits costs; internally the trainer maximizes negated
rewards so the published form of the algorithm applies verbatim: twin
critics with clipped target-policy smoothing take the minimum target,
the actor updates every ``policy_delay`` critic steps, and targets blend
softly.  Raw observations live in the replay buffer and are normalized
with the current (collection-frozen) statistics when sampled.
"""

from __future__ import annotations

import copy

import numpy as np
import torch

from pdepolicy.rl.common import ObsNormalizer, RlConfig, TransitionBatch, collect_episodes
from pdepolicy.rl.nets import ActorNet, QCriticNet


class ReplayBuffer:
    """Uniform-sampling ring buffer of raw transitions."""

    def __init__(self, capacity: int, obs_shape, action_dim: int = 2):
        self.capacity = capacity
        self.raw_obs = np.zeros((capacity, *obs_shape))
        self.next_raw_obs = np.zeros((capacity, *obs_shape))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.size = 0
        self._head = 0

    def add_batch(self, batch: TransitionBatch) -> None:
        for i in range(len(batch)):
            j = self._head
            self.raw_obs[j] = batch.raw_obs[i]
            self.next_raw_obs[j] = batch.next_raw_obs[i]
            self.actions[j] = batch.actions[i]
            self.rewards[j] = batch.rewards[i]
            self.dones[j] = batch.dones[i]
            self._head = (self._head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, k: int):
        idx = rng.integers(0, self.size, size=k)
        return (self.raw_obs[idx], self.next_raw_obs[idx], self.actions[idx],
                self.rewards[idx], self.dones[idx])


def soft_update(target: torch.nn.Module, source: torch.nn.Module, tau: float) -> None:
    """target <- (1 - tau) target + tau source; tau=1 copies exactly."""
    with torch.no_grad():
        for tp, sp in zip(target.parameters(), source.parameters()):
            if tau >= 1.0:
                tp.copy_(sp)
            else:
                tp.mul_(1.0 - tau).add_(sp, alpha=tau)


def twin_min_target(q1_target: torch.Tensor, q2_target: torch.Tensor) -> torch.Tensor:
    return torch.minimum(q1_target, q2_target)


class Td3Trainer:
    """Collection rounds feed a replay buffer; updates run per transition."""

    def __init__(self, env_factory, num_channels: int, grid_n: int, config: RlConfig):
        self.config = config
        self.env_factory = env_factory
        torch.manual_seed(config.seed)
        dtype = config.torch_dtype
        kw = dict(channels=config.channels, hidden=config.hidden)
        self.actor = ActorNet(num_channels, grid_n, seed=config.seed,
                              init_log_std=config.init_log_std, **kw).to(dtype)
        self.q1 = QCriticNet(num_channels, grid_n, seed=config.seed + 1, **kw).to(dtype)
        self.q2 = QCriticNet(num_channels, grid_n, seed=config.seed + 2, **kw).to(dtype)
        self.actor_target = copy.deepcopy(self.actor)
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=config.lr0)
        self.critic_opt = torch.optim.Adam(
            list(self.q1.parameters()) + list(self.q2.parameters()), lr=config.lr0
        )
        self.normalizer = ObsNormalizer(num_channels, config.ema_rate)
        self.buffer: ReplayBuffer | None = None
        seq = np.random.SeedSequence(config.seed)
        children = seq.spawn(config.env_parallelism + 2)
        self.env_rngs = [np.random.default_rng(s) for s in children[:-2]]
        self.sample_rng = np.random.default_rng(children[-2])
        self.noise_rng = np.random.default_rng(children[-1])
        self.round_index = 0
        self.update_count = 0

    def _set_lr(self):
        lr = self.config.lr0 * self.config.lr_decay**self.round_index
        for opt in (self.actor_opt, self.critic_opt):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def update(self) -> dict:
        """One critic step (actor/targets every ``policy_delay`` steps)."""
        cfg = self.config
        dtype = cfg.torch_dtype
        raw, next_raw, actions, costs, dones = self.buffer.sample(
            self.sample_rng, cfg.td3_batch
        )
        obs = torch.as_tensor(
            np.stack([self.normalizer.normalize(o) for o in raw]), dtype=dtype
        )
        next_obs = torch.as_tensor(
            np.stack([self.normalizer.normalize(o) for o in next_raw]), dtype=dtype
        )
        act_t = torch.as_tensor(actions, dtype=dtype)
        # maximize negated costs so the published update rules apply unchanged
        reward = torch.as_tensor(-costs, dtype=dtype)
        not_done = torch.as_tensor(1.0 - dones, dtype=dtype)

        with torch.no_grad():
            noise = torch.as_tensor(
                self.noise_rng.standard_normal(act_t.shape), dtype=dtype
            ) * cfg.target_noise
            noise = torch.clamp(noise, -cfg.noise_clip, cfg.noise_clip)
            next_action = self.actor_target(next_obs)[0] + noise
            target_q = twin_min_target(
                self.q1_target(next_obs, next_action),
                self.q2_target(next_obs, next_action),
            )
            y = reward + cfg.gamma * not_done * target_q

        q1 = self.q1(obs, act_t)
        q2 = self.q2(obs, act_t)
        critic_loss = ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()
        self.critic_opt.zero_grad()
        critic_loss.backward()
        self.critic_opt.step()

        stats = {"critic_loss": float(critic_loss.detach()), "actor_loss": float("nan")}
        self.update_count += 1
        if self.update_count % cfg.policy_delay == 0:
            actor_loss = -self.q1(obs, self.actor(obs)[0]).mean()
            self.actor_opt.zero_grad()
            actor_loss.backward()
            self.actor_opt.step()
            soft_update(self.actor_target, self.actor, cfg.soft_update)
            soft_update(self.q1_target, self.q1, cfg.soft_update)
            soft_update(self.q2_target, self.q2, cfg.soft_update)
            stats["actor_loss"] = float(actor_loss.detach())
        return stats

    def run_round(self) -> dict:
        """Collect E exploratory episodes, then train on replayed batches."""
        cfg = self.config
        lr = self._set_lr()
        envs = [self.env_factory(rng) for rng in self.env_rngs]
        batch = collect_episodes(
            self.actor, envs, self.env_rngs, self.normalizer, gamma=cfg.gamma,
            noise_scale=cfg.explore_noise, workers=cfg.workers,
        )
        if self.buffer is None:
            self.buffer = ReplayBuffer(cfg.buffer_size, batch.raw_obs.shape[1:])
        self.buffer.add_batch(batch)

        stats = {"critic_loss": float("nan"), "actor_loss": float("nan")}
        if self.buffer.size >= cfg.warmup_transitions:
            num_updates = int(round(cfg.updates_per_transition * len(batch)))
            for _ in range(max(num_updates, 1)):
                stats = self.update()
        self.round_index += 1
        stats.update(
            round=self.round_index,
            lr=lr,
            mean_episode_objective=float(batch.episode_objectives.mean()),
            episodes=len(batch.episode_objectives),
        )
        return stats
