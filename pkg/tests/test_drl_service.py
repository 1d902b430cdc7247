# tests/test_drl_service.py
import math

import numpy as np
import numpy.testing as npt
import pytest

from models.exceptions import BufferUnderflowError, ContractError
from models.schemas import (
    CriticConfig,
    CriticSpec,
    EnvConfig,
    MlpCriticConfig,
    PointMassConfig,
    ReaCriticSettings,
    TrainerConfig,
)
from services import tensor_service as ts
from services.critic_service import MlpCriticService, ReaCriticService
from services.drl_service import (
    ActorNet,
    ReplayBuffer,
    Transition,
    TransitionBatch,
    actor_update,
    bellman_target,
    critic_update,
    polyak_update,
    q_learning_target,
    train,
)
from services.hetnet_env_service import HetNetEnvService
from services.network_service import rng_stream
from services.pointmass_env_service import PointMassEnvService
from services.tensor_service import AdamOptimizer
from services.verification_service import gradient_check


def transition(i, d_s=3, d_a=2, done=False):
    return Transition(np.full(d_s, float(i)), np.full(d_a, 0.5), float(i), np.full(d_s, i + 1.0), done)


def random_batch(rng, B=4, d_s=6, d_a=2):
    return TransitionBatch(
        states=rng.standard_normal((B, d_s)),
        actions=rng.uniform(0, 1, (B, d_a)),
        rewards=rng.standard_normal(B),
        next_states=rng.standard_normal((B, d_s)),
        dones=np.zeros(B),
    )


def small_critic(seed=0, noise=0.0):
    config = CriticConfig(d_s=6, d_a=2, d_h=8, H=2, V=1, n_heads=2, noise_sigma=noise)
    return ReaCriticService(config, rng_stream(seed, "critic_init"))


class TestReplayBuffer:
    def test_ring_evicts_oldest(self):
        buffer = ReplayBuffer(2, np.random.default_rng(0))
        for i in range(3):
            buffer.push(transition(i))
        assert len(buffer) == 2
        assert [buffer.transition(k).reward for k in range(2)] == [1.0, 2.0]

    def test_underflow(self):
        buffer = ReplayBuffer(10, np.random.default_rng(0))
        buffer.push(transition(0))
        with pytest.raises(BufferUnderflowError):
            buffer.sample(2)

    def test_sampling_is_reproducible(self):
        batches = []
        for _ in range(2):
            buffer = ReplayBuffer(10, np.random.default_rng(5))
            for i in range(10):
                buffer.push(transition(i))
            batches.append(buffer.sample(4))
        for a, b in zip(*batches):
            npt.assert_array_equal(a, b)

    def test_sampling_is_uniform(self):
        buffer = ReplayBuffer(10, np.random.default_rng(11))
        for i in range(10):
            buffer.push(transition(i))
        counts = np.zeros(10)
        for _ in range(10_000):
            np.add.at(counts, buffer.sample_indices(10), 1)
        n, p = 100_000, 0.1
        sigma = math.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 3 * sigma + 1)


class TestTargets:
    def test_terminal_transitions_use_reward_only(self, rng):
        config = TrainerConfig(algo="ddpg", twin_critic=False)
        batch = random_batch(rng)._replace(dones=np.ones(4))
        actor = ActorNet(6, 2, [8], stochastic=False, rng=rng_stream(0, "actor_init"))
        y = bellman_target(batch, [small_critic()], actor, config, 0.0, rng)
        npt.assert_array_equal(y, batch.rewards)

    def test_zero_discount_uses_reward_only(self, rng):
        config = TrainerConfig(algo="sac", gamma=0.0)
        batch = random_batch(rng)
        actor = ActorNet(6, 2, [8], stochastic=True, rng=rng_stream(0, "actor_init"))
        y = bellman_target(batch, [small_critic(0), small_critic(1)], actor, config, 0.2, rng)
        npt.assert_array_equal(y, batch.rewards)

    def test_target_matches_hand_composition(self, rng):
        config = TrainerConfig(algo="sac", gamma=0.9)
        batch = random_batch(rng)
        actor = ActorNet(6, 2, [8], stochastic=True, rng=rng_stream(0, "actor_init"))
        critics = [small_critic(0), small_critic(1)]
        y = bellman_target(batch, critics, actor, config, 0.3, np.random.default_rng(42))

        next_actions, log_prob = actor.sample(batch.next_states, np.random.default_rng(42))
        q = np.minimum(critics[0].q_value(batch.next_states, next_actions.data).data,
                       critics[1].q_value(batch.next_states, next_actions.data).data)
        expected = batch.rewards + 0.9 * (q - 0.3 * log_prob.data)
        npt.assert_allclose(y, expected, rtol=1e-12)

    def test_q_learning_target_takes_best_candidate(self, rng):
        critic = small_critic()
        batch = random_batch(rng, B=3)
        candidates = rng.uniform(0, 1, (5, 2))
        y = q_learning_target(batch, critic, candidates, gamma=0.5)
        for i in range(3):
            q = critic.q_value(np.repeat(batch.next_states[i:i + 1], 5, axis=0), candidates).data
            assert y[i] == pytest.approx(batch.rewards[i] + 0.5 * q.max(), rel=1e-12)


class TestUpdates:
    def test_critic_loss_zero_when_prediction_matches_target(self, rng):
        critic = small_critic()
        batch = random_batch(rng)
        y = critic.q_value(batch.states, batch.actions).data
        optimizer = AdamOptimizer(critic.parameter_list(), lr=1e-3)
        before = critic.state_dict()
        loss, _ = critic_update(batch, [critic], y, optimizer, rng)
        assert loss == 0.0
        for name, param in critic.parameters().items():
            assert not np.any(param.grad)
            npt.assert_array_equal(param.data, before[name])

    def test_single_transition_loss_by_hand(self, rng):
        critic = small_critic()
        batch = random_batch(rng, B=1)
        q = critic.q_value(batch.states, batch.actions).data[0]
        loss, q_mean = critic_update(batch, [critic], np.array([q + 0.7]),
                                     AdamOptimizer(critic.parameter_list(), lr=1e-3), rng)
        assert loss == pytest.approx(0.49, rel=1e-9)
        assert q_mean == pytest.approx(q, rel=1e-12)
        assert loss >= 0.0

    def test_critic_update_reduces_loss(self, rng):
        critic = small_critic()
        batch = random_batch(rng, B=16)
        optimizer = AdamOptimizer(critic.parameter_list(), lr=1e-2)
        y = np.ones(16)
        losses = [critic_update(batch, [critic], y, optimizer, rng)[0] for _ in range(30)]
        assert losses[-1] < losses[0]

    def test_actor_gradient_vanishes_for_action_blind_critic(self, rng):
        critic = MlpCriticService(MlpCriticConfig(d_s=6, d_a=2, widths=[8]), rng_stream(0, "critic_init"))
        critic.parameters()["mlp_critic.0.weight"].data[6:, :] = 0.0
        actor = ActorNet(6, 2, [8], stochastic=False, rng=rng_stream(0, "actor_init"))
        config = TrainerConfig(algo="ddpg")
        actor_update(random_batch(rng), actor, [critic], config, 0.0,
                     AdamOptimizer(actor.parameter_list(), lr=1e-3))
        for param in actor.parameter_list():
            assert param.grad is None or not np.any(param.grad)
        assert all(p.grad is None for p in critic.parameter_list())

    def test_actor_update_leaves_critic_trainable(self, rng):
        critic = small_critic()
        actor = ActorNet(6, 2, [8], stochastic=True, rng=rng_stream(0, "actor_init"))
        actor_update(random_batch(rng), actor, [critic], TrainerConfig(), 0.2,
                     AdamOptimizer(actor.parameter_list(), lr=1e-3), rng)
        assert all(p.requires_grad for p in critic.parameter_list())

    def test_actor_gradient_through_critic(self, rng):
        critic = small_critic()
        actor = ActorNet(6, 2, [8], stochastic=False, rng=rng_stream(0, "actor_init"))
        states = rng.standard_normal((3, 6))
        with critic.frozen():
            errors = gradient_check(lambda: ts.mean(critic.q_value(states, actor.deterministic(states))),
                                    actor.parameter_list())
        assert max(errors.values()) < 1e-4

    def test_actions_stay_in_unit_box(self, rng):
        actor = ActorNet(6, 2, [8], stochastic=True, rng=rng_stream(0, "actor_init"))
        actions, log_prob = actor.sample(rng.standard_normal((50, 6)) * 10, rng)
        assert actions.data.min() >= 0.0 and actions.data.max() <= 1.0
        assert np.all(np.isfinite(log_prob.data))

    def test_polyak_examples(self):
        online, target = small_critic(0), small_critic(1)
        original = target.state_dict()
        polyak_update(target, online, 0.0)
        for name, values in original.items():
            npt.assert_array_equal(target.parameters()[name].data, values)
        polyak_update(target, online, 1.0)
        for name, param in online.parameters().items():
            npt.assert_array_equal(target.parameters()[name].data, param.data)

    def test_polyak_converges_geometrically(self):
        online, target = small_critic(0), small_critic(1)
        tau = 0.1

        def gap():
            return math.sqrt(sum(float(np.sum((target.parameters()[n].data - p.data) ** 2))
                                 for n, p in online.parameters().items()))

        previous = gap()
        for _ in range(5):
            polyak_update(target, online, tau)
            current = gap()
            assert current == pytest.approx((1 - tau) * previous, rel=1e-9)
            previous = current

    def test_polyak_rejects_mismatched_architectures(self):
        other = ReaCriticService(CriticConfig(d_s=6, d_a=2, d_h=8, H=3, V=1, n_heads=2), rng_stream(0, "x"))
        with pytest.raises(ContractError):
            polyak_update(other, small_critic(), 0.5)


class TestTraining:
    def test_zero_updates_reports_rollout_only(self, tiny_critic_spec):
        config = TrainerConfig(warmup_steps=0, max_updates=0, batch_size=4, actor_hidden=[8])
        rows = []
        report = train(PointMassEnvService(PointMassConfig(episode_len=5, goal_radius=1e-9)), config,
                       tiny_critic_spec, episodes=3, seed=0, callbacks=[lambda s, e, m: rows.append(m)])
        assert report.total_updates == 0
        assert report.final_critic_loss is None
        assert report.total_steps == 15
        assert all(math.isnan(m["critic_loss_mean"]) for m in rows)

    def test_identical_seeds_give_identical_histories(self, tiny_trainer_config, tiny_critic_spec):
        histories = []
        for _ in range(2):
            rows = []
            env = PointMassEnvService(PointMassConfig(episode_len=12))
            train(env, tiny_trainer_config, tiny_critic_spec, episodes=3, seed=9,
                  callbacks=[lambda s, e, m: rows.append(repr((m["episode_return"], m["critic_loss_mean"], m["q_mean"])))])
            histories.append(rows)
        assert histories[0] == histories[1]

    def test_ddpg_on_hetnet_runs_updates(self, tiny_critic_spec):
        config = TrainerConfig(algo="ddpg", warmup_steps=8, batch_size=8, actor_hidden=[16])
        report = train(HetNetEnvService(EnvConfig(num_users=2, episode_len=10)), config,
                       tiny_critic_spec, episodes=2, seed=1)
        assert report.total_updates > 0
        assert math.isfinite(report.final_critic_loss)

    @pytest.mark.slow
    def test_sac_reacritic_learns_point_mass(self):
        config = TrainerConfig(warmup_steps=1000, batch_size=64, actor_hidden=[64, 64])
        spec = CriticSpec(reacritic=ReaCriticSettings(d_h=32, H=4, V=2, n_heads=4))
        improved = 0
        for seed in range(5):
            report = train(PointMassEnvService(PointMassConfig()), config, spec, episodes=150, seed=seed)
            improved += report.final_window_mean_return > report.first_window_mean_return
        assert improved >= 4

    @pytest.mark.slow
    @pytest.mark.parametrize("critic_spec", [
        CriticSpec(reacritic=ReaCriticSettings(H=4, V=2)),
        CriticSpec(reacritic=ReaCriticSettings(H=1, V=1)),
        CriticSpec(kind="mlp", reacritic=ReaCriticSettings(H=4, V=2)),
    ], ids=["reacritic", "transformer_baseline", "matched_mlp"])
    def test_hetnet_schedule_completes(self, critic_spec):
        improved = 0
        for seed in range(5):
            report = train(HetNetEnvService(EnvConfig(num_users=5)), TrainerConfig(), critic_spec,
                           episodes=200, seed=seed)
            assert report.final_critic_loss is not None and math.isfinite(report.final_critic_loss)
            improved += report.final_window_mean_return > report.first_window_mean_return
        if critic_spec.kind == "reacritic" and critic_spec.reacritic.H == 4:
            assert improved >= 4
