"""Convolutional actor and critic networks.

Both share the same trunk: three 3x3 convolutions each followed by 2x2
max-pooling, then two dense layers; tanh activations everywhere and
orthogonal weight initialization.  Only the heads differ: the actor emits
an action mean (log standard deviations are state-independent trainable
parameters), the value critic a scalar state value, and the Q critic a
scalar rating of an observation with the action broadcast as extra
channels.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

LOG_2PI = float(np.log(2.0 * np.pi))


def orthogonal_init(module: nn.Module, gain: float = 1.0, seed: int | None = None) -> None:
    generator = None
    if seed is not None:
        generator = torch.Generator()
        generator.manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.orthogonal_(m.weight, gain=gain, generator=generator)
            nn.init.zeros_(m.bias)


class ConvTrunk(nn.Module):
    """conv3x3 + tanh + maxpool2x2 (x3), flatten, two dense tanh layers."""

    def __init__(self, in_channels: int, grid_n: int, channels=(8, 16, 16),
                 hidden: int = 64):
        super().__init__()
        layers = []
        prev = in_channels
        side = grid_n
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, kernel_size=3, padding=1), nn.Tanh(),
                       nn.MaxPool2d(2)]
            prev = ch
            side = side // 2
            if side < 1:
                raise ValueError(f"grid {grid_n} too small for three pooling stages")
        self.conv = nn.Sequential(*layers)
        flat = prev * side * side
        self.dense = nn.Sequential(
            nn.Linear(flat, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh()
        )
        self.out_dim = hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.conv(x)
        return self.dense(z.flatten(1))


class ActorNet(nn.Module):
    """Diagonal-Gaussian policy: state-dependent mean, global log-std."""

    def __init__(self, in_channels: int, grid_n: int, action_dim: int = 2,
                 channels=(8, 16, 16), hidden: int = 64, init_log_std: float = -0.5,
                 seed: int | None = None):
        super().__init__()
        self.trunk = ConvTrunk(in_channels, grid_n, channels, hidden)
        self.mean_head = nn.Linear(hidden, action_dim)
        self.log_std = nn.Parameter(torch.full((action_dim,), float(init_log_std)))
        orthogonal_init(self, seed=seed)
        nn.init.orthogonal_(
            self.mean_head.weight, gain=0.01,
            generator=None if seed is None else torch.Generator().manual_seed(seed + 1),
        )

    def forward(self, obs: torch.Tensor):
        mean = self.mean_head(self.trunk(obs))
        if not torch.isfinite(mean).all():
            raise FloatingPointError("non-finite actor output")
        return mean, self.log_std.expand_as(mean)

    def log_prob(self, obs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        mean, log_std = self.forward(obs)
        inv_var = torch.exp(-2.0 * log_std)
        return (
            -0.5 * ((actions - mean) ** 2 * inv_var) - log_std - 0.5 * LOG_2PI
        ).sum(dim=-1)


class ValueCriticNet(nn.Module):
    """Scalar state-value baseline (PPO critic)."""

    def __init__(self, in_channels: int, grid_n: int, channels=(8, 16, 16),
                 hidden: int = 64, seed: int | None = None):
        super().__init__()
        self.trunk = ConvTrunk(in_channels, grid_n, channels, hidden)
        self.head = nn.Linear(hidden, 1)
        orthogonal_init(self, seed=seed)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        v = self.head(self.trunk(obs)).squeeze(-1)
        if not torch.isfinite(v).all():
            raise FloatingPointError("non-finite critic output")
        return v


class QCriticNet(nn.Module):
    """Scalar action-value critic; the action enters as broadcast channels."""

    def __init__(self, in_channels: int, grid_n: int, action_dim: int = 2,
                 channels=(8, 16, 16), hidden: int = 64, seed: int | None = None):
        super().__init__()
        self.grid_n = grid_n
        self.trunk = ConvTrunk(in_channels + action_dim, grid_n, channels, hidden)
        self.head = nn.Linear(hidden, 1)
        orthogonal_init(self, seed=seed)

    def forward(self, obs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        b, _, h, w = obs.shape
        action_maps = actions[:, :, None, None].expand(b, actions.shape[1], h, w)
        v = self.head(self.trunk(torch.cat([obs, action_maps], dim=1))).squeeze(-1)
        if not torch.isfinite(v).all():
            raise FloatingPointError("non-finite critic output")
        return v
