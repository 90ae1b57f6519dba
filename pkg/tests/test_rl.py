"""RL checks: sampling correctness, collection bookkeeping, PPO/TD3 identities."""

import copy

import numpy as np
import pytest
import torch
from scipy import stats as scipy_stats

from pdepolicy import env, fem
from pdepolicy.env import ControlEpisode, SolveCounter, sample_params
from pdepolicy.rl.common import (
    ObsNormalizer,
    RlConfig,
    act,
    collect_episodes,
    obs_channels,
    observation,
    returns_to_go,
)
from pdepolicy.rl.nets import ActorNet, QCriticNet, ValueCriticNet
from pdepolicy.rl.ppo import PpoTrainer, gae_advantages, normalize_advantages, ppo_update
from pdepolicy.rl.td3 import ReplayBuffer, Td3Trainer, soft_update, twin_min_target

GRID_N = 8
N_STEPS = 5


def make_factory(counter, seed_offset=0, num_steps=N_STEPS):
    grid = fem.GridSpec(GRID_N)

    def factory(rng):
        p = sample_params("horizontal", rng)
        sys = env.FemSystem(p, grid, ds=0.02, counter=counter)
        return ControlEpisode(sys, num_steps=num_steps)

    return factory


def make_actor(seed=0, dtype=torch.float32):
    return ActorNet(5, GRID_N, seed=seed).to(dtype)


class TestAct:
    def test_degenerate_variance_returns_mean(self):
        actor = make_actor()
        actor.log_std.data.fill_(-40.0)
        obs = np.random.default_rng(0).standard_normal((3, 5, GRID_N, GRID_N))
        rngs = [np.random.default_rng(i) for i in range(3)]
        u, _ = act(actor, obs, rngs)
        with torch.no_grad():
            mean = actor(torch.as_tensor(obs, dtype=torch.float32))[0].numpy()
        assert np.allclose(u, mean, atol=1e-14)

    def test_log_prob_matches_density_oracle(self):
        actor = make_actor(seed=3)
        obs = np.random.default_rng(1).standard_normal((4, 5, GRID_N, GRID_N))
        rngs = [np.random.default_rng(10 + i) for i in range(4)]
        u, logp = act(actor, obs, rngs)
        with torch.no_grad():
            mean, log_std = actor(torch.as_tensor(obs, dtype=torch.float32))
        mean = mean.numpy().astype(np.float64)
        std = np.exp(log_std.detach().numpy().astype(np.float64))
        expected = scipy_stats.norm.logpdf(u, loc=mean, scale=std).sum(axis=1)
        assert np.allclose(logp, expected, rtol=1e-10)

    def test_seeded_sampling_reproducible(self):
        actor = make_actor(seed=4)
        obs = np.random.default_rng(2).standard_normal((2, 5, GRID_N, GRID_N))
        u1, lp1 = act(actor, obs, [np.random.default_rng(5), np.random.default_rng(6)])
        u2, lp2 = act(actor, obs, [np.random.default_rng(5), np.random.default_rng(6)])
        assert np.array_equal(u1, u2) and np.array_equal(lp1, lp2)

    def test_nonfinite_output_raises(self):
        actor = make_actor()
        actor.mean_head.bias.data.fill_(float("inf"))
        obs = np.zeros((1, 5, GRID_N, GRID_N))
        with pytest.raises(FloatingPointError):
            act(actor, obs, [np.random.default_rng(0)])


class TestObservation:
    def test_channel_layout(self):
        counter = SolveCounter()
        factory = make_factory(counter)
        e = factory(np.random.default_rng(0))
        state = e.reset()
        obs = observation(e.sys.grid, state, 0.12, e.sys.params.vector)
        assert obs.shape == (5, GRID_N, GRID_N)
        assert obs_channels(2) == 5
        assert obs_channels(3) == 6
        assert np.allclose(obs[1], state.alpha)
        assert np.allclose(obs[2], 0.12)
        assert np.allclose(obs[3], e.sys.params.y_x1)

    def test_normalizer_constant_stream_converges_to_zero(self):
        norm = ObsNormalizer(2, rate=0.2)
        batch = np.full((4, 2, 3, 3), 5.0)
        for _ in range(200):
            norm.update(batch)
        out = norm.normalize(batch[0])
        assert np.max(np.abs(out)) < 1e-4

    def test_normalizer_matches_direct_recurrence(self):
        rng = np.random.default_rng(3)
        norm = ObsNormalizer(3, rate=0.05)
        mean, var = np.zeros(3), np.ones(3)
        for _ in range(7):
            batch = rng.standard_normal((5, 3, 4, 4))
            norm.update(batch)
            mean = 0.95 * mean + 0.05 * batch.mean(axis=(0, 2, 3))
            var = 0.95 * var + 0.05 * batch.var(axis=(0, 2, 3))
        assert np.allclose(norm.mean, mean)
        assert np.allclose(norm.var, var)

    def test_frozen_stats_unchanged(self):
        norm = ObsNormalizer(2, rate=0.1)
        norm.update(np.random.default_rng(0).standard_normal((3, 2, 4, 4)))
        before = norm.state_dict()
        norm.frozen = True
        norm.update(np.random.default_rng(1).standard_normal((3, 2, 4, 4)))
        after = norm.state_dict()
        assert np.array_equal(before["mean"], after["mean"])
        assert np.array_equal(before["var"], after["var"])


class TestCollection:
    def test_reward_bookkeeping(self):
        counter = SolveCounter()
        factory = make_factory(counter)
        actor = make_actor(seed=7)
        rngs = [np.random.default_rng(s) for s in (1, 2, 3)]
        envs = [factory(rng) for rng in rngs]
        norm = ObsNormalizer(5, rate=0.01)
        batch = collect_episodes(actor, envs, rngs, norm)
        for ep in range(3):
            mask = batch.episode_ids == ep
            assert abs(batch.rewards[mask].sum() - batch.episode_objectives[ep]) < 1e-12

    def test_solve_counter_increases_by_e_times_n(self):
        counter = SolveCounter()
        factory = make_factory(counter)
        actor = make_actor(seed=8)
        rngs = [np.random.default_rng(s) for s in (1, 2, 3, 4)]
        envs = [factory(rng) for rng in rngs]
        before = counter.value
        collect_episodes(actor, envs, rngs, ObsNormalizer(5, 0.01))
        assert counter.value - before == 4 * N_STEPS

    def test_single_env_matches_hand_loop(self):
        counter = SolveCounter()
        factory = make_factory(counter)
        actor = make_actor(seed=9)

        rng_a = np.random.default_rng(42)
        env_a = factory(rng_a)
        norm_a = ObsNormalizer(5, rate=0.01)
        batch = collect_episodes(actor, [env_a], [rng_a], norm_a)

        rng_b = np.random.default_rng(42)
        env_b = factory(rng_b)
        norm_b = ObsNormalizer(5, rate=0.01)
        state = env_b.reset()
        actions, rewards = [], []
        for _ in range(N_STEPS):
            raw = observation(env_b.sys.grid, state, env_b.time, env_b.sys.params.vector)
            norm_b.update(raw[None])
            u, _ = act(actor, norm_b.normalize(raw)[None], [rng_b])
            state, r, _ = env_b.step(u[0])
            actions.append(u[0])
            rewards.append(r)
        assert np.array_equal(batch.actions, np.stack(actions))
        assert np.array_equal(batch.rewards, np.array(rewards))

    def test_parallel_stepping_matches_sequential(self):
        def run(workers):
            counter = SolveCounter()
            factory = make_factory(counter)
            actor = make_actor(seed=10)
            rngs = [np.random.default_rng(s) for s in (1, 2, 3, 4)]
            envs = [factory(rng) for rng in rngs]
            return collect_episodes(actor, envs, rngs, ObsNormalizer(5, 0.01),
                                    workers=workers)

        a = run(1)
        b = run(4)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.rewards, b.rewards)
        assert np.array_equal(a.obs, b.obs)

    def test_return_recursion_exact(self):
        counter = SolveCounter()
        factory = make_factory(counter)
        e = factory(np.random.default_rng(0))
        rec = env.rollout(e.sys, lambda s, st, y: np.array([0.2, -0.1]), N_STEPS)
        R = returns_to_go(rec.rewards, gamma=1.0)
        for i in range(len(rec.rewards) - 1):
            assert R[i] == rec.rewards[i] + R[i + 1]
        assert R[-1] == rec.rewards[-1]


class TestPpo:
    def make_batch(self, actor, seed=0):
        counter = SolveCounter()
        factory = make_factory(counter)
        rngs = [np.random.default_rng(seed + i) for i in range(3)]
        envs = [factory(rng) for rng in rngs]
        batch = collect_episodes(actor, envs, rngs, ObsNormalizer(5, 0.01))
        batch.value_targets = batch.returns
        return batch

    def test_ratio_is_exactly_one_at_collection_weights(self):
        actor = make_actor(seed=11)
        batch = self.make_batch(actor)
        frozen = copy.deepcopy(actor)
        obs = torch.as_tensor(batch.obs, dtype=torch.float32)
        actions = torch.as_tensor(batch.actions, dtype=torch.float32)
        with torch.no_grad():
            ratio = torch.exp(actor.log_prob(obs, actions) - frozen.log_prob(obs, actions))
        assert torch.equal(ratio, torch.ones_like(ratio))

    def test_zero_advantage_batch_leaves_actor_unchanged(self):
        actor = make_actor(seed=12)
        critic = ValueCriticNet(5, GRID_N, seed=13)
        batch = self.make_batch(actor)
        batch.advantages = np.zeros(len(batch))
        cfg = RlConfig(critic_weight=0.0, update_epochs=2, minibatch_size=8,
                       max_grad_norm=0.0, kl_stop=0.0)
        before = copy.deepcopy(actor.state_dict())
        ppo_update(actor, critic, copy.deepcopy(actor), batch, cfg,
                   torch.optim.Adam(actor.parameters(), lr=1e-3),
                   torch.optim.Adam(critic.parameters(), lr=1e-3),
                   np.random.default_rng(0))
        for k, v in actor.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_clipped_surrogate_equals_reinforce_at_ratio_one(self):
        actor = make_actor(seed=14, dtype=torch.float64)
        batch = self.make_batch(actor)
        values = np.zeros(len(batch))
        adv = normalize_advantages(gae_advantages(batch, values, 1.0, 1.0))
        obs = torch.as_tensor(batch.obs, dtype=torch.float64)
        actions = torch.as_tensor(batch.actions, dtype=torch.float64)
        adv_t = torch.as_tensor(adv, dtype=torch.float64)
        frozen = copy.deepcopy(actor)

        with torch.no_grad():
            logp_old = frozen.log_prob(obs, actions)
        ratio = torch.exp(actor.log_prob(obs, actions) - logp_old)
        clipped = torch.clamp(ratio, 0.8, 1.2)
        surrogate = torch.max(ratio * adv_t, clipped * adv_t).mean()
        surrogate_grads = torch.autograd.grad(surrogate, list(actor.parameters()))

        reinforce = (actor.log_prob(obs, actions) * adv_t).mean()
        reinforce_grads = torch.autograd.grad(reinforce, list(actor.parameters()))

        for g1, g2 in zip(surrogate_grads, reinforce_grads):
            denom = g2.norm().item() or 1.0
            assert (g1 - g2).norm().item() / denom < 1e-6

    def test_gae_lambda_one_is_return_minus_baseline(self):
        actor = make_actor(seed=15)
        batch = self.make_batch(actor)
        rng = np.random.default_rng(1)
        values = rng.standard_normal(len(batch))
        adv = gae_advantages(batch, values, gamma=1.0, lam=1.0)
        assert np.allclose(adv, batch.returns - values, atol=1e-12)

    def test_critic_overfits_tiny_batch(self):
        torch.manual_seed(0)
        critic = ValueCriticNet(5, GRID_N, seed=16)
        actor = make_actor(seed=17)
        batch = self.make_batch(actor)
        obs = torch.as_tensor(batch.obs[:8], dtype=torch.float32)
        targets = torch.as_tensor(batch.returns[:8], dtype=torch.float32)
        opt = torch.optim.Adam(critic.parameters(), lr=5e-3)
        for _ in range(200):
            loss = ((critic(obs) - targets) ** 2).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert float(loss) < 1e-3


class TestTd3:
    def test_soft_update_tau_one_copies(self):
        a = QCriticNet(5, GRID_N, seed=20)
        b = QCriticNet(5, GRID_N, seed=21)
        soft_update(a, b, tau=1.0)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_twin_min_bounds_both(self):
        q1 = torch.tensor([1.0, -2.0, 0.5])
        q2 = torch.tensor([0.5, -1.0, 0.7])
        m = twin_min_target(q1, q2)
        assert torch.all(m <= q1) and torch.all(m <= q2)

    def test_replay_buffer_wraps(self):
        buf = ReplayBuffer(4, (5, GRID_N, GRID_N))
        counter = SolveCounter()
        factory = make_factory(counter, num_steps=3)
        actor = make_actor(seed=22)
        rngs = [np.random.default_rng(0), np.random.default_rng(1)]
        envs = [factory(rng) for rng in rngs]
        batch = collect_episodes(actor, envs, rngs, ObsNormalizer(5, 0.01))
        buf.add_batch(batch)  # 6 transitions into capacity 4
        assert buf.size == 4

    def test_one_step_critic_converges_to_reward(self):
        """N=1 episodes: the target is the cost itself (tabular oracle)."""
        counter = SolveCounter()
        factory = make_factory(counter, num_steps=1)
        cfg = RlConfig(seed=23, env_parallelism=4, warmup_transitions=4,
                       td3_batch=16, lr0=3e-3, lr_decay=1.0, explore_noise=0.5,
                       updates_per_transition=0.0, policy_delay=10**9)
        trainer = Td3Trainer(factory, num_channels=5, grid_n=GRID_N, config=cfg)
        trainer.run_round()  # fills the buffer, no updates
        for _ in range(400):
            trainer.update()
        for group in trainer.critic_opt.param_groups:  # anneal out Adam jitter
            group["lr"] = 2e-4
        for _ in range(200):
            trainer.update()
        raw, _, actions, costs, _ = (
            trainer.buffer.raw_obs[: trainer.buffer.size],
            None,
            trainer.buffer.actions[: trainer.buffer.size],
            trainer.buffer.rewards[: trainer.buffer.size],
            None,
        )
        obs = torch.as_tensor(
            np.stack([trainer.normalizer.normalize(o) for o in raw]),
            dtype=torch.float32,
        )
        with torch.no_grad():
            q = trainer.q1(obs, torch.as_tensor(actions, dtype=torch.float32))
        assert np.max(np.abs(q.numpy() - (-costs))) < 1e-2


class TestTrainerDeterminism:
    def test_ppo_rounds_reproducible(self):
        def run():
            counter = SolveCounter()
            factory = make_factory(counter)
            cfg = RlConfig(seed=31, env_parallelism=2, minibatch_size=8)
            trainer = PpoTrainer(factory, 5, GRID_N, cfg)
            out = [trainer.run_round()["mean_episode_objective"] for _ in range(2)]
            return out, counter.value

        a = run()
        b = run()
        assert a == b

    def test_td3_rounds_reproducible(self):
        def run():
            counter = SolveCounter()
            factory = make_factory(counter)
            cfg = RlConfig(seed=32, env_parallelism=2, warmup_transitions=5,
                           td3_batch=8)
            trainer = Td3Trainer(factory, 5, GRID_N, cfg)
            return [trainer.run_round()["mean_episode_objective"] for _ in range(2)]

        assert run() == run()
