"""Shared RL machinery: observations, normalization, episode collection.

Observations stack the concentration image with scalar broadcast channels
for the sink position, the time, and each problem parameter (5 channels
for the horizontal setup, 6 for sinusoidal).  Collection steps E
environment instances in lockstep with one batched policy evaluation per
step and frozen behavior weights; per-environment random streams make the
result independent of how env stepping is parallelized.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from pdepolicy.env import ControlEpisode, State
from pdepolicy.rl.nets import LOG_2PI


@dataclass
class RlConfig:
    """Hyperparameters shared by the PPO and TD3 trainers."""

    lr0: float = 1e-4
    lr_decay: float = 0.999          # per update round
    env_parallelism: int = 8
    minibatch_size: int = 64
    update_epochs: int = 4
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 1.0
    critic_weight: float = 0.5       # relative contribution of the critic loss
    entropy_coef: float = 0.0
    kl_stop: float = 0.05            # early epoch stop when KL estimate blows up
    max_grad_norm: float = 0.5
    ema_rate: float = 0.01           # observation-normalizer update rate
    # TD3 specifics
    target_noise: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    soft_update: float = 0.005
    explore_noise: float = 0.1
    buffer_size: int = 60_000
    warmup_transitions: int = 400
    td3_batch: int = 128
    updates_per_transition: float = 1.0
    # architecture
    channels: tuple = (8, 16, 16)
    hidden: int = 64
    init_log_std: float = -0.5
    dtype: str = "float32"
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.critic_weight < 0:
            raise ValueError("critic weight must be nonnegative")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


def obs_channels(q: int) -> int:
    """Concentration + sink position + time + one channel per parameter."""
    return 3 + q


def observation(grid, state: State, s: float, y: np.ndarray) -> np.ndarray:
    """(C, n, n) channel stack for one environment state."""
    n = grid.n
    chans = [grid.to_image(state.a)]
    chans.append(np.full((n, n), state.alpha))
    chans.append(np.full((n, n), s))
    for comp in np.asarray(y, dtype=np.float64):
        chans.append(np.full((n, n), comp))
    out = np.stack(chans)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite observation")
    return out


class ObsNormalizer:
    """Per-channel EMA estimates of mean and variance.

    Stats move only while unfrozen (collection); evaluation freezes them so
    measured objectives are not coupled to measurement itself.
    """

    def __init__(self, num_channels: int, rate: float, eps: float = 1e-8):
        self.rate = float(rate)
        self.eps = float(eps)
        self.mean = np.zeros(num_channels)
        self.var = np.ones(num_channels)
        self.frozen = False

    def update(self, batch: np.ndarray) -> None:
        if self.frozen:
            return
        batch_mean = batch.mean(axis=(0, 2, 3))
        batch_var = batch.var(axis=(0, 2, 3))
        self.mean = (1.0 - self.rate) * self.mean + self.rate * batch_mean
        self.var = (1.0 - self.rate) * self.var + self.rate * batch_var

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        mean = self.mean[:, None, None]
        std = np.sqrt(self.var + self.eps)[:, None, None]
        return (obs - mean) / std

    def state_dict(self) -> dict:
        return {"mean": self.mean.copy(), "var": self.var.copy(), "rate": self.rate}

    def load_state_dict(self, state: dict) -> None:
        self.mean = np.array(state["mean"], dtype=np.float64)
        self.var = np.array(state["var"], dtype=np.float64)
        self.rate = float(state["rate"])


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray):
    inv_var = np.exp(-2.0 * log_std)
    return np.sum(
        -0.5 * (actions - mean) ** 2 * inv_var - log_std - 0.5 * LOG_2PI, axis=-1
    )


def act(actor, obs: np.ndarray, rngs, deterministic: bool = False,
        noise_scale: float | None = None):
    """Batched policy evaluation; exploration noise comes from per-env rngs.

    Returns (actions, log_probs).  ``noise_scale`` overrides the Gaussian
    policy scale (TD3-style additive exploration around the mean).
    """
    dtype = next(actor.parameters()).dtype
    with torch.no_grad():
        mean_t, log_std_t = actor(torch.as_tensor(obs, dtype=dtype))
    mean = mean_t.detach().numpy().astype(np.float64)
    log_std = log_std_t.detach().numpy().astype(np.float64)
    if deterministic:
        return mean, gaussian_log_prob(mean, mean, log_std)
    eps = np.stack([rng.standard_normal(mean.shape[1]) for rng in rngs])
    if noise_scale is not None:
        actions = mean + noise_scale * eps
    else:
        actions = mean + np.exp(log_std) * eps
    return actions, gaussian_log_prob(actions, mean, log_std)


@dataclass
class TransitionBatch:
    """Flattened transitions of one collection round (E full episodes)."""

    obs: np.ndarray            # (T, C, n, n), normalized at collection time
    raw_obs: np.ndarray        # (T, C, n, n), unnormalized
    next_raw_obs: np.ndarray   # (T, C, n, n)
    actions: np.ndarray        # (T, action_dim)
    log_probs: np.ndarray      # (T,), at collection weights
    rewards: np.ndarray        # (T,), terminal cost folded into final steps
    dones: np.ndarray          # (T,)
    returns: np.ndarray        # (T,), discounted returns-to-go
    episode_ids: np.ndarray    # (T,)
    episode_objectives: np.ndarray  # (E,)
    advantages: np.ndarray | None = None
    value_targets: np.ndarray | None = None

    def __len__(self):
        return len(self.actions)


def returns_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros_like(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def collect_episodes(actor, envs: list[ControlEpisode], rngs, normalizer: ObsNormalizer,
                     gamma: float = 1.0, deterministic: bool = False,
                     noise_scale: float | None = None, workers: int = 1) -> TransitionBatch:
    """Run every environment one full episode under frozen behavior weights.

    All environments advance in lockstep; observations are batched into a
    single policy call per step.  ``rngs`` supplies one random stream per
    environment so the episode set is invariant to stepping parallelism.
    """
    if len(envs) != len(rngs):
        raise ValueError("need one rng per environment")
    num_steps = envs[0].num_steps
    if any(e.num_steps != num_steps for e in envs):
        raise ValueError("environments must share the horizon")

    states = [e.reset() for e in envs]
    alive = np.ones(len(envs), dtype=bool)
    buffers = [
        {"obs": [], "raw": [], "next_raw": [], "actions": [], "logp": [], "r": [],
         "done": []}
        for _ in envs
    ]

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for _ in range(num_steps):
            raw = np.stack(
                [
                    observation(e.sys.grid, st, e.time, e.sys.params.vector)
                    for e, st in zip(envs, states)
                ]
            )
            normalizer.update(raw[alive])
            norm = np.stack([normalizer.normalize(r) for r in raw])
            actions, log_probs = act(actor, norm, rngs, deterministic, noise_scale)

            def advance(i):
                if not alive[i]:
                    return None
                try:
                    return envs[i].step(actions[i])
                except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
                    return exc

            if pool is not None:
                results = list(pool.map(advance, range(len(envs))))
            else:
                results = [advance(i) for i in range(len(envs))]

            for i, result in enumerate(results):
                if result is None:
                    continue
                if isinstance(result, Exception):
                    alive[i] = False  # invalid episode: all its rows are dropped
                    continue
                state, reward, done = result
                buf = buffers[i]
                buf["obs"].append(norm[i])
                buf["raw"].append(raw[i])
                buf["next_raw"].append(
                    observation(envs[i].sys.grid, state, envs[i].time,
                                envs[i].sys.params.vector)
                )
                buf["actions"].append(actions[i])
                buf["logp"].append(log_probs[i])
                buf["r"].append(reward)
                buf["done"].append(done)
                states[i] = state
    finally:
        if pool is not None:
            pool.shutdown()

    kept = [i for i in range(len(envs)) if alive[i]]
    if not kept:
        raise RuntimeError("every episode in the collection round failed")
    obs, raw_obs, next_raw, actions_all = [], [], [], []
    logp_all, rewards_all, dones_all, returns_all, ids_all = [], [], [], [], []
    objectives = np.zeros(len(kept))
    for new_id, i in enumerate(kept):
        buf = buffers[i]
        r = np.array(buf["r"])
        obs += buf["obs"]
        raw_obs += buf["raw"]
        next_raw += buf["next_raw"]
        actions_all += buf["actions"]
        logp_all += buf["logp"]
        rewards_all.append(r)
        dones_all += buf["done"]
        returns_all.append(returns_to_go(r, gamma))
        ids_all += [new_id] * len(r)
        objectives[new_id] = r.sum()

    return TransitionBatch(
        obs=np.stack(obs),
        raw_obs=np.stack(raw_obs),
        next_raw_obs=np.stack(next_raw),
        actions=np.stack(actions_all),
        log_probs=np.array(logp_all),
        rewards=np.concatenate(rewards_all),
        dones=np.array(dones_all, dtype=np.float64),
        returns=np.concatenate(returns_all),
        episode_ids=np.array(ids_all),
        episode_objectives=objectives,
    )
