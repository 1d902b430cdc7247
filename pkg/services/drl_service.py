# services/drl_service.py
"""
Actor-Critic 学習の中核

- リプレイバッファ、actor ネットワーク、ターゲットネットワーク
- Bellman ターゲット（actor-critic 分岐と、有限候補集合での Q 学習分岐）
- critic 更新（Bellman 残差の最小化）、actor 更新（Q の最大化）、Polyak 更新
- SAC / DDPG の学習ループ
"""
import logging
import math
import time
from typing import Callable, Dict, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np

from config.settings import settings
from models.exceptions import (
    BufferUnderflowError,
    ContractError,
    NonFiniteValueError,
    TrainingDivergenceError,
)
from models.schemas import CriticSpec, EpisodeMetrics, StepResult, TrainerConfig, TrainingReport
from services import tensor_service as ts
from services.critic_service import Critic, build_critic
from services.network_service import ParameterModule, rng_stream, scaled_gaussian
from services.tensor_service import AdamOptimizer, GradTape, Tensor

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
_SQUASH_EPS = 1e-6


class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


class TransitionBatch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class Environment(Protocol):
    """学習器が前提とする環境の契約（HetNet と質点タスクで共通）"""

    observation_dim: int
    action_dim: int

    @property
    def action_low(self) -> np.ndarray: ...

    @property
    def action_high(self) -> np.ndarray: ...

    def reset(self, seed: Optional[int] = None) -> StepResult: ...

    def step(self, action: np.ndarray) -> StepResult: ...


TrainingCallback = Callable[[int, int, Dict[str, float]], None]


class ReplayBuffer:
    """固定容量のリングバッファ（古いものから上書き、復元抽出）"""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ContractError(f"replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.rng = rng
        self._cursor = 0
        self._size = 0
        self._storage: Optional[Dict[str, np.ndarray]] = None

    def __len__(self) -> int:
        return self._size

    def _allocate(self, transition: Transition):
        n = self.capacity
        self._storage = {
            "states": np.zeros((n, np.size(transition.state))),
            "actions": np.zeros((n, np.size(transition.action))),
            "rewards": np.zeros(n),
            "next_states": np.zeros((n, np.size(transition.next_state))),
            "dones": np.zeros(n),
        }

    def push(self, transition: Transition):
        if not math.isfinite(transition.reward):
            raise ContractError(f"transition reward must be finite, got {transition.reward}")
        if self._storage is None:
            self._allocate(transition)
        i = self._cursor
        self._storage["states"][i] = np.ravel(transition.state)
        self._storage["actions"][i] = np.ravel(transition.action)
        self._storage["rewards"][i] = transition.reward
        self._storage["next_states"][i] = np.ravel(transition.next_state)
        self._storage["dones"][i] = float(transition.done)
        self._cursor = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def transition(self, index: int) -> Transition:
        """保持中の index 番目（古い順）の遷移"""
        if not 0 <= index < self._size:
            raise IndexError(index)
        slot = (self._cursor - self._size + index) % self.capacity
        s = self._storage
        return Transition(s["states"][slot].copy(), s["actions"][slot].copy(), float(s["rewards"][slot]),
                          s["next_states"][slot].copy(), bool(s["dones"][slot]))

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if self._size < batch_size:
            raise BufferUnderflowError(f"buffer holds {self._size} transitions, batch needs {batch_size}")
        return self.rng.integers(0, self._size, size=batch_size)

    def sample(self, batch_size: int) -> TransitionBatch:
        idx = self.sample_indices(batch_size)
        s = self._storage
        return TransitionBatch(s["states"][idx], s["actions"][idx], s["rewards"][idx],
                               s["next_states"][idx], s["dones"][idx])


class ActorNet(ParameterModule):
    """状態 → [0,1]^{d_a} の行動。SAC は平均と log 標準偏差、DDPG は決定的出力"""

    def __init__(self, d_s: int, d_a: int, hidden: Sequence[int], stochastic: bool,
                 rng: np.random.Generator, log_std_bounds: Tuple[float, float] = (-5.0, 2.0)):
        super().__init__()
        self.d_s, self.d_a = d_s, d_a
        self.stochastic = stochastic
        self.log_std_bounds = log_std_bounds
        self.trunk: List[Tuple[str, str]] = []
        fan_in = d_s
        for i, width in enumerate(hidden):
            self.add_parameter(f"actor.trunk.{i}.weight", scaled_gaussian(rng, (fan_in, width), fan_in))
            self.add_parameter(f"actor.trunk.{i}.bias", np.zeros(width))
            self.trunk.append((f"actor.trunk.{i}.weight", f"actor.trunk.{i}.bias"))
            fan_in = width
        self.add_parameter("actor.mean.weight", scaled_gaussian(rng, (fan_in, d_a), fan_in))
        self.add_parameter("actor.mean.bias", np.zeros(d_a))
        if stochastic:
            self.add_parameter("actor.log_std.weight", scaled_gaussian(rng, (fan_in, d_a), fan_in))
            self.add_parameter("actor.log_std.bias", np.zeros(d_a))

    def _features(self, states) -> Tensor:
        p = self.parameters()
        x = states if isinstance(states, Tensor) else Tensor(np.atleast_2d(states))
        for w_name, b_name in self.trunk:
            x = ts.gelu(ts.add(ts.matmul(x, p[w_name], tag="actor"), p[b_name]))
        return x

    @staticmethod
    def _squash(u: Tensor) -> Tensor:
        # (tanh(u) + 1) / 2 ∈ [0, 1]
        return ts.add_scalar(ts.mul_scalar(ts.tanh(u), 0.5), 0.5)

    def _head(self, features: Tensor, name: str) -> Tensor:
        p = self.parameters()
        return ts.add(ts.matmul(features, p[f"actor.{name}.weight"], tag="actor"), p[f"actor.{name}.bias"])

    def deterministic(self, states) -> Tensor:
        return self._squash(self._head(self._features(states), "mean"))

    def sample(self, states, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
        """再パラメータ化サンプル ã と log π(ã|s)"""
        if not self.stochastic:
            raise ContractError("sample() needs a stochastic (SAC) actor")
        features = self._features(states)
        mean = self._head(features, "mean")
        low, high = self.log_std_bounds
        log_std = ts.add_scalar(ts.mul_scalar(ts.tanh(self._head(features, "log_std")), 0.5 * (high - low)),
                                0.5 * (high + low))
        eps = rng.standard_normal(mean.shape)
        u = ts.add(mean, ts.hadamard(ts.exp(log_std), Tensor(eps)))
        t = ts.tanh(u)

        gaussian = ts.add_scalar(ts.mul_scalar(log_std, -1.0), float(-0.5 * _LOG_2PI)) - Tensor(0.5 * eps ** 2)
        # d a / d u = (1 - tanh²) / 2
        jacobian = ts.log(ts.add_scalar(ts.mul_scalar(ts.square(t), -0.5), 0.5 + _SQUASH_EPS))
        log_prob = ts.sum(ts.sub(gaussian, jacobian), axis=-1)
        action = ts.add_scalar(ts.mul_scalar(t, 0.5), 0.5)
        return action, log_prob

    def act(self, state: np.ndarray, rng: np.random.Generator, explore: bool = True,
            noise_std: float = 0.0) -> np.ndarray:
        """環境に渡す1つ分の行動（numpy）"""
        states = np.asarray(state, dtype=np.float64).reshape(1, -1)
        if self.stochastic and explore:
            action, _ = self.sample(states, rng)
            return action.data[0]
        action = self.deterministic(states).data[0]
        if explore and noise_std > 0:
            action = np.clip(action + rng.normal(0.0, noise_std, action.shape), 0.0, 1.0)
        return action


def polyak_update(target: ParameterModule, online: ParameterModule, tau: float):
    """target ← τ·online + (1−τ)·target"""
    target_params, online_params = target.parameters(), online.parameters()
    if list(target_params) != list(online_params):
        raise ContractError("polyak update needs matching architectures")
    for name, param in target_params.items():
        source = online_params[name]
        if source.shape != param.shape:
            raise ContractError(f"polyak update: {name} has shape {param.shape} vs {source.shape}")
        param.data = tau * source.data + (1.0 - tau) * param.data


def bellman_target(batch: TransitionBatch, target_critics: Sequence[Critic], target_actor: ActorNet,
                   config: TrainerConfig, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """y = r + γ(1−done)·[min_k Q̄_k(s', ā') − α·log π(ā'|s')]"""
    if config.algo == "sac":
        next_actions, next_log_prob = target_actor.sample(batch.next_states, rng)
        next_actions = next_actions.data
    else:
        next_actions = target_actor.deterministic(batch.next_states).data
        next_log_prob = None

    q_next = np.min([critic.q_value(batch.next_states, next_actions).data for critic in target_critics], axis=0)
    if next_log_prob is not None and config.entropy_in_target:
        q_next = q_next - alpha * next_log_prob.data
    return batch.rewards + config.gamma * (1.0 - batch.dones) * q_next


def q_learning_target(batch: TransitionBatch, target_critic: Critic, candidates: np.ndarray,
                      gamma: float) -> np.ndarray:
    """有限の候補行動集合上での y = r + γ(1−done)·max_a Q̄(s', a)"""
    candidates = np.atleast_2d(candidates)
    B, K = batch.next_states.shape[0], candidates.shape[0]
    states = np.repeat(batch.next_states, K, axis=0)
    actions = np.tile(candidates, (B, 1))
    q = target_critic.q_value(states, actions).data.reshape(B, K)
    return batch.rewards + gamma * (1.0 - batch.dones) * q.max(axis=1)


def critic_update(batch: TransitionBatch, critics: Sequence[Critic], targets: np.ndarray,
                  optimizer: AdamOptimizer, rng: Optional[np.random.Generator] = None,
                  training: bool = True) -> Tuple[float, float]:
    """Bellman 残差の二乗平均を最小化する。戻り値は (損失, 平均Q)"""
    optimizer.zero_grad()
    y = Tensor(targets)
    try:
        with GradTape() as tape:
            losses, q_means = [], []
            for critic in critics:
                q = critic.q_value(batch.states, batch.actions, training=training, rng=rng)
                losses.append(ts.mean(ts.square(ts.sub(q, y))))
                q_means.append(float(q.data.mean()))
            loss = losses[0]
            for extra in losses[1:]:
                loss = ts.add(loss, extra)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingDivergenceError(f"critic loss is not finite: {loss_value}")
            tape.backward(loss)
    except NonFiniteValueError as e:
        logger.error(f"critic 更新で非有限値を検出: {e}")
        raise TrainingDivergenceError(f"critic update diverged: {e}") from e
    optimizer.step()
    return loss_value, float(np.mean(q_means))


def actor_update(batch: TransitionBatch, actor: ActorNet, critics: Sequence[Critic], config: TrainerConfig,
                 alpha: float, optimizer: AdamOptimizer,
                 rng: Optional[np.random.Generator] = None) -> Tuple[float, Optional[float]]:
    """critic を固定して E[Q(s, π(s)) − α log π] を上昇させる。戻り値は (目的関数値, 平均 log π)"""
    optimizer.zero_grad()
    frozen = [critic.frozen() for critic in critics]
    for ctx in frozen:
        ctx.__enter__()
    try:
        with GradTape() as tape:
            log_prob_mean = None
            if config.algo == "sac":
                actions, log_prob = actor.sample(batch.states, rng)
                qs = [critic.q_value(batch.states, actions) for critic in critics]
                q = qs[0] if len(qs) == 1 else ts.minimum(qs[0], qs[1])
                objective = ts.mean(ts.sub(q, ts.mul_scalar(log_prob, alpha)))
                log_prob_mean = float(log_prob.data.mean())
            else:
                actions = actor.deterministic(batch.states)
                objective = ts.mean(critics[0].q_value(batch.states, actions))
            loss = ts.mul_scalar(objective, -1.0)
            if not math.isfinite(loss.item()):
                raise TrainingDivergenceError(f"actor objective is not finite: {objective.item()}")
            tape.backward(loss)
    except NonFiniteValueError as e:
        logger.error(f"actor 更新で非有限値を検出: {e}")
        raise TrainingDivergenceError(f"actor update diverged: {e}") from e
    finally:
        for ctx in reversed(frozen):
            ctx.__exit__(None, None, None)
    optimizer.step()
    return objective.item(), log_prob_mean


class ActorCriticLearner:
    """1シード分の actor・critic・ターゲット・オプティマイザ一式"""

    def __init__(self, config: TrainerConfig, critic_spec: CriticSpec, d_s: int, d_a: int, seed: int):
        self.config = config
        self.d_s, self.d_a = d_s, d_a
        self.replay_rng = rng_stream(seed, "replay")
        self.exploration_rng = rng_stream(seed, "exploration")
        self.actor_noise_rng = rng_stream(seed, "actor_noise")
        self.critic_noise_rng = rng_stream(seed, "critic_noise")

        self.critics: List[Critic] = [build_critic(critic_spec, d_s, d_a, rng_stream(seed, "critic_init"))]
        if config.twin_critic:
            self.critics.append(build_critic(critic_spec, d_s, d_a, rng_stream(seed, "critic2_init")))
        self.target_critics = [critic.clone() for critic in self.critics]

        self.actor = ActorNet(d_s, d_a, config.actor_hidden, config.algo == "sac",
                              rng_stream(seed, "actor_init"), config.log_std_bounds)
        self.target_actor = self.actor.clone()

        critic_params = [p for critic in self.critics for p in critic.parameter_list()]
        self.critic_optimizer = AdamOptimizer(critic_params, config.critic_lr, config.adam_betas, config.adam_eps)
        self.actor_optimizer = AdamOptimizer(self.actor.parameter_list(), config.actor_lr,
                                             config.adam_betas, config.adam_eps)

        self.log_alpha = Tensor(np.array(math.log(max(config.entropy_alpha, 1e-12))), requires_grad=True)
        self.alpha_optimizer = AdamOptimizer([self.log_alpha], config.alpha_lr, config.adam_betas, config.adam_eps)
        self.target_entropy = config.target_entropy if config.target_entropy is not None else -float(d_a)
        self.updates = 0

    @property
    def alpha(self) -> float:
        if self.config.algo != "sac":
            return 0.0
        if self.config.entropy_alpha == 0 and not self.config.auto_entropy:
            return 0.0
        return float(np.exp(self.log_alpha.data))

    def act(self, state: np.ndarray) -> np.ndarray:
        return self.actor.act(state, self.exploration_rng, explore=True,
                              noise_std=self.config.exploration_noise)

    def update(self, batch: TransitionBatch) -> Tuple[float, float]:
        """critic → actor → 温度 → ターゲットの順に1回更新する"""
        cfg = self.config
        alpha = self.alpha
        y = bellman_target(batch, self.target_critics, self.target_actor, cfg, alpha, self.actor_noise_rng)
        loss, q_mean = critic_update(batch, self.critics, y, self.critic_optimizer, self.critic_noise_rng)
        _, log_prob_mean = actor_update(batch, self.actor, self.critics, cfg, alpha,
                                        self.actor_optimizer, self.actor_noise_rng)

        if cfg.algo == "sac" and cfg.auto_entropy and log_prob_mean is not None:
            # ∂/∂log α of −log α·(log π + H_target)
            self.log_alpha.grad = np.array(-(log_prob_mean + self.target_entropy))
            self.alpha_optimizer.step()
            self.log_alpha.zero_grad()

        for target, online in zip(self.target_critics, self.critics):
            polyak_update(target, online, cfg.tau)
        polyak_update(self.target_actor, self.actor, cfg.tau)
        self.updates += 1
        return loss, q_mean


class TrainerService:
    """環境とのロールアウトと更新フェーズを交互に行う学習ループ"""

    def __init__(self, env: Environment, trainer_config: TrainerConfig, critic_spec: CriticSpec,
                 seed: int, run_name: str = "run"):
        self.env = env
        self.config = trainer_config
        self.critic_spec = critic_spec
        self.seed = seed
        self.run_name = run_name
        self.learner = ActorCriticLearner(trainer_config, critic_spec, env.observation_dim, env.action_dim, seed)
        self.buffer = ReplayBuffer(trainer_config.buffer_capacity, self.learner.replay_rng)
        self.episode_seed_rng = rng_stream(seed, "env")
        self.history: List[EpisodeMetrics] = []

    def _updates_allowed(self, total_steps: int) -> bool:
        cfg = self.config
        if cfg.max_updates is not None and self.learner.updates >= cfg.max_updates:
            return False
        return (total_steps >= cfg.warmup_steps and len(self.buffer) >= cfg.batch_size
                and total_steps % cfg.update_every == 0)

    def train(self, episodes: int, callbacks: Sequence[TrainingCallback] = ()) -> TrainingReport:
        cfg = self.config
        env = self.env
        low, high = env.action_low, env.action_high
        total_steps = 0
        last_loss: Optional[float] = None
        started = time.perf_counter()
        logger.info(f"学習開始: {self.run_name} (seed={self.seed}, algo={cfg.algo}, episodes={episodes})")

        for episode in range(episodes):
            episode_started = time.perf_counter()
            obs = env.reset(seed=int(self.episode_seed_rng.integers(0, 2 ** 62))).next_state
            episode_return, steps = 0.0, 0
            losses: List[float] = []
            q_values: List[float] = []

            while True:
                if total_steps < cfg.warmup_steps:
                    action = self.learner.exploration_rng.uniform(0.0, 1.0, env.action_dim)
                else:
                    action = self.learner.act(obs)
                result = env.step(low + action * (high - low))
                self.buffer.push(Transition(obs, action, result.reward, result.next_state, result.done))
                obs = result.next_state
                episode_return += result.reward
                steps += 1
                total_steps += 1

                if self._updates_allowed(total_steps):
                    for _ in range(cfg.updates_per_step):
                        loss, q_mean = self.learner.update(self.buffer.sample(cfg.batch_size))
                        losses.append(loss)
                        q_values.append(q_mean)
                        last_loss = loss
                if result.done:
                    break

            metrics = EpisodeMetrics(
                episode=episode,
                episode_return=episode_return,
                critic_loss_mean=float(np.mean(losses)) if losses else math.nan,
                q_mean=float(np.mean(q_values)) if q_values else math.nan,
                steps=steps,
                wall_ms=(time.perf_counter() - episode_started) * 1000.0,
            )
            self.history.append(metrics)
            for callback in callbacks:
                callback(total_steps, episode, metrics.model_dump())
            logger.debug(f"エピソード {episode}: return={episode_return:.4f}, 更新数={self.learner.updates}")

        returns = [m.episode_return for m in self.history]
        window = min(settings.FINAL_WINDOW, len(returns))
        report = TrainingReport(
            run_name=self.run_name,
            seed=self.seed,
            algo=cfg.algo,
            critic_kind=self.critic_spec.kind,
            episodes=episodes,
            total_steps=total_steps,
            total_updates=self.learner.updates,
            episode_returns=returns,
            first_window_mean_return=float(np.mean(returns[:window])),
            final_window_mean_return=float(np.mean(returns[-window:])),
            final_critic_loss=last_loss,
            critic_parameter_count=self.learner.critics[0].parameter_count(),
            wall_time_s=time.perf_counter() - started,
        )
        logger.info(f"学習完了: {self.run_name} (seed={self.seed}) 最終窓平均リターン="
                    f"{report.final_window_mean_return:.4f}")
        return report


def train(env: Environment, trainer_config: TrainerConfig, critic_spec: CriticSpec, episodes: int,
          seed: int, callbacks: Sequence[TrainingCallback] = (), run_name: str = "run",
          final_window: Optional[int] = None) -> TrainingReport:
    """Algorithm の学習ループを1シード分実行する"""
    trainer = TrainerService(env, trainer_config, critic_spec, seed, run_name)
    report = trainer.train(episodes, callbacks)
    if final_window is not None:
        returns = report.episode_returns
        window = min(final_window, len(returns))
        report.first_window_mean_return = float(np.mean(returns[:window]))
        report.final_window_mean_return = float(np.mean(returns[-window:]))
    return report
