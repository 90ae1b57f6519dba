"""Proximal policy optimization against the PDE environment.

Cost convention: the environment emits costs, and the trainer minimizes
them, so the clipped surrogate takes the pessimistic maximum of the
clipped/unclipped terms (the mirror image of the reward-maximizing form).
Old-policy log-probabilities are recomputed per minibatch from a frozen
snapshot of the behavior weights, which makes the probability ratio
exactly one before the first optimizer step of each round.
"""

from __future__ import annotations

import copy

import numpy as np
import torch

from pdepolicy.rl.common import ObsNormalizer, RlConfig, TransitionBatch, collect_episodes
from pdepolicy.rl.nets import ActorNet, ValueCriticNet


def gae_advantages(batch: TransitionBatch, values: np.ndarray, gamma: float,
                   lam: float) -> np.ndarray:
    """Generalized advantage estimates; lam=1 gives returns minus baseline."""
    adv = np.zeros_like(batch.rewards)
    for ep in np.unique(batch.episode_ids):
        mask = batch.episode_ids == ep
        r = batch.rewards[mask]
        v = values[mask]
        nxt = np.append(v[1:], 0.0)  # terminal value is zero beyond the horizon
        delta = r + gamma * nxt - v
        acc = 0.0
        out = np.zeros_like(delta)
        for i in range(len(delta) - 1, -1, -1):
            acc = delta[i] + gamma * lam * acc
            out[i] = acc
        adv[mask] = out
    return adv


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(actor: ActorNet, critic: ValueCriticNet, old_actor: ActorNet,
               batch: TransitionBatch, config: RlConfig,
               actor_opt: torch.optim.Optimizer, critic_opt: torch.optim.Optimizer,
               rng: np.random.Generator) -> dict:
    """Several epochs of clipped-surrogate minibatch steps on one batch."""
    if len(batch) == 0:
        raise ValueError("empty transition batch")
    dtype = config.torch_dtype
    obs = torch.as_tensor(batch.obs, dtype=dtype)
    actions = torch.as_tensor(batch.actions, dtype=dtype)
    returns = torch.as_tensor(batch.value_targets, dtype=dtype)
    advantages = torch.as_tensor(batch.advantages, dtype=dtype)

    stats = {"actor_loss": 0.0, "critic_loss": 0.0, "kl": 0.0, "epochs_run": 0}
    n = len(batch)
    steps = 0
    for epoch in range(config.update_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = torch.as_tensor(perm[start : start + config.minibatch_size])
            with torch.no_grad():
                logp_old = old_actor.log_prob(obs[idx], actions[idx])
            logp_new = actor.log_prob(obs[idx], actions[idx])
            ratio = torch.exp(logp_new - logp_old)
            adv = advantages[idx]
            clipped = torch.clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)
            # costs are minimized: pessimistic max replaces the usual min
            actor_loss = torch.max(ratio * adv, clipped * adv).mean()
            if config.entropy_coef:
                entropy = (actor.log_std + 0.5 * (1.0 + np.log(2.0 * np.pi))).sum()
                actor_loss = actor_loss - config.entropy_coef * entropy
            value_loss = ((critic(obs[idx]) - returns[idx]) ** 2).mean()
            loss = actor_loss + config.critic_weight * value_loss

            actor_opt.zero_grad()
            critic_opt.zero_grad()
            loss.backward()
            if config.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(actor.parameters(), config.max_grad_norm)
                torch.nn.utils.clip_grad_norm_(critic.parameters(), config.max_grad_norm)
            actor_opt.step()
            critic_opt.step()
            stats["actor_loss"] += float(actor_loss.detach())
            stats["critic_loss"] += float(value_loss.detach())
            steps += 1
        with torch.no_grad():
            kl = (old_actor.log_prob(obs, actions) - actor.log_prob(obs, actions)).mean()
        stats["kl"] = float(kl)
        stats["epochs_run"] = epoch + 1
        if config.kl_stop and abs(float(kl)) > config.kl_stop:
            break
    stats["actor_loss"] /= max(steps, 1)
    stats["critic_loss"] /= max(steps, 1)
    return stats


class PpoTrainer:
    """Collect-update loop: E parallel episodes per round, then PPO epochs."""

    def __init__(self, env_factory, num_channels: int, grid_n: int, config: RlConfig):
        self.config = config
        self.env_factory = env_factory
        torch.manual_seed(config.seed)
        self.actor = ActorNet(num_channels, grid_n, channels=config.channels,
                              hidden=config.hidden, init_log_std=config.init_log_std,
                              seed=config.seed).to(config.torch_dtype)
        self.critic = ValueCriticNet(num_channels, grid_n, channels=config.channels,
                                     hidden=config.hidden, seed=config.seed + 1
                                     ).to(config.torch_dtype)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=config.lr0)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=config.lr0)
        self.normalizer = ObsNormalizer(num_channels, config.ema_rate)
        seq = np.random.SeedSequence(config.seed)
        children = seq.spawn(config.env_parallelism + 1)
        self.env_rngs = [np.random.default_rng(s) for s in children[:-1]]
        self.rng = np.random.default_rng(children[-1])
        self.round_index = 0

    def _set_lr(self):
        lr = self.config.lr0 * self.config.lr_decay**self.round_index
        for opt in (self.actor_opt, self.critic_opt):
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    def run_round(self) -> dict:
        """One collection round plus its PPO update; returns metrics."""
        cfg = self.config
        lr = self._set_lr()
        envs = [self.env_factory(rng) for rng in self.env_rngs]
        batch = collect_episodes(
            self.actor, envs, self.env_rngs, self.normalizer, gamma=cfg.gamma,
            workers=cfg.workers,
        )
        with torch.no_grad():
            values = self.critic(
                torch.as_tensor(batch.obs, dtype=cfg.torch_dtype)
            ).numpy().astype(np.float64)
        batch.advantages = normalize_advantages(
            gae_advantages(batch, values, cfg.gamma, cfg.gae_lambda)
        )
        batch.value_targets = batch.returns
        old_actor = copy.deepcopy(self.actor)
        stats = ppo_update(self.actor, self.critic, old_actor, batch, cfg,
                           self.actor_opt, self.critic_opt, self.rng)
        self.round_index += 1
        stats.update(
            round=self.round_index,
            lr=lr,
            mean_episode_objective=float(batch.episode_objectives.mean()),
            episodes=len(batch.episode_objectives),
        )
        return stats
