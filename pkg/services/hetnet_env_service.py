# services/hetnet_env_service.py
"""
M ユーザーの異種無線ネットワーク（HetNet）シミュレータ

観測レイアウト（ユーザーごとに14項目、この順で連結）:
    0 d_m        タスク需要 (cycles)
    1 L_m        直近の遅延 (s)
    2 x_m        正規化位置
    3 f_m        ローカル CPU 周波数 (Hz)
    4 τ_m        ユーザータイプ
    5 P_u,m      最大上り送信電力 (W)
    6 q_u,m      上りフェージング利得
    7 ζ_m        パスロス
    8 σ_u        上り雑音の標準偏差
    9 P_d,max    基地局送信電力 (W)
   10 q_d,m      下りフェージング利得
   11 σ_d        下り雑音の標準偏差
   12 C_max      総計算能力
   13 ρ_m        ローカル計算効率

info のキー（長さ M の配列）:
    rate_u_m, rate_d_m, ee_u_m, ee_d_m, latency_m, sinr_u_m, sinr_d_m, utility_m
"""
import logging
import math
from typing import Dict, Optional, Union

import numpy as np

from models.exceptions import ConfigError, DimensionError, EnvironmentStateError
from models.schemas import (
    USER_ACTION_DIM,
    USER_STATE_DIM,
    EnvConfig,
    StepResult,
    UserPopulation,
    UserState,
)
from services.network_service import rng_stream

logger = logging.getLogger(__name__)

# 行動行列の列
P_U, P_D, B_U, B_D, C = range(USER_ACTION_DIM)
# 合計が 1 以下に制約される共有資源の列（p_u はユーザー単位の制約のみ）
SHARED_COLUMNS = (P_D, B_U, B_D, C)

OBSERVATION_FIELDS = (
    "demand", "latency", "position", "cpu_frequency", "user_type", "uplink_power_max",
    "uplink_fading", "path_loss", "uplink_noise_std", "downlink_power_max",
    "downlink_fading", "downlink_noise_std", "compute_capacity", "compute_efficiency",
)

Number = Union[float, np.ndarray]


# ---------------------------------------------------------------------------
# チャネル・指標の計算式
# ---------------------------------------------------------------------------

def path_loss(distance: Number, exponent: float) -> Number:
    """大規模パスロス ζ = D^(-γ)"""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d <= 0):
        raise DimensionError(f"path loss needs a positive distance, got {distance}")
    out = d ** (-exponent)
    return float(out) if out.ndim == 0 else out


def sample_rician(k_factor: float, rng: np.random.Generator, size=None) -> Number:
    """平均電力 1 に正規化したライスフェージングの電力利得"""
    if k_factor < 0:
        raise ConfigError(f"Rician K-factor must be non-negative: {k_factor}")
    if math.isinf(k_factor):
        return 1.0 if size is None else np.ones(size)
    los = math.sqrt(k_factor / (k_factor + 1.0))
    scatter = math.sqrt(1.0 / (2.0 * (k_factor + 1.0)))
    real = los + scatter * rng.standard_normal(size)
    imag = scatter * rng.standard_normal(size)
    return real ** 2 + imag ** 2


def _interference(signal: np.ndarray) -> np.ndarray:
    """各ユーザーに対する他ユーザー信号の総和 Σ_{j≠m}"""
    mask = 1.0 - np.eye(signal.shape[0])
    return mask @ signal


def uplink_sinrs(action: np.ndarray, users: UserPopulation, config: EnvConfig) -> np.ndarray:
    signal = action[:, P_U] * users.uplink_power_max * users.uplink_fading * users.path_loss
    return signal / (_interference(signal) + config.uplink_noise_power)


def downlink_sinrs(action: np.ndarray, users: UserPopulation, config: EnvConfig) -> np.ndarray:
    signal = action[:, P_D] * config.downlink_power_max * users.downlink_fading * users.path_loss
    return signal / (_interference(signal) + config.downlink_noise_power)


def sinr_uplink(m: int, action: np.ndarray, users: UserPopulation, config: EnvConfig) -> float:
    return float(uplink_sinrs(action, users, config)[m])


def sinr_downlink(m: int, action: np.ndarray, users: UserPopulation, config: EnvConfig) -> float:
    return float(downlink_sinrs(action, users, config)[m])


def shannon_rate(share: Number, bandwidth: float, sinr: Number) -> Number:
    """b·B·log2(1+SINR)"""
    return share * bandwidth * np.log2(1.0 + np.asarray(sinr))


def rate_uplink(m: int, action: np.ndarray, sinr: float, config: EnvConfig) -> float:
    return float(shannon_rate(action[m, B_U], config.uplink_bandwidth, sinr))


def rate_downlink(m: int, action: np.ndarray, sinr: float, config: EnvConfig) -> float:
    return float(shannon_rate(action[m, B_D], config.downlink_bandwidth, sinr))


def energy_efficiency(rate: Number, power_share: Number, power_max: Number) -> Number:
    """rate / (p·P_max)。p = 0 のときは 0"""
    rate = np.asarray(rate, dtype=np.float64)
    power = np.asarray(power_share, dtype=np.float64) * power_max
    safe = np.where(power > 0, power, 1.0)
    out = np.where(power > 0, rate / safe, 0.0)
    return float(out) if out.ndim == 0 else out


def service_latency(demand: Number, rate_u: Number, compute_share: Number, compute_capacity: float,
                    efficiency: Number, latency_cap: float) -> Number:
    """送信遅延 + 処理遅延。レートか計算割当が 0 のときだけ上限値を返す"""
    demand = np.asarray(demand, dtype=np.float64)
    rate_u = np.asarray(rate_u, dtype=np.float64)
    compute = np.asarray(compute_share, dtype=np.float64) * compute_capacity * efficiency
    degenerate = (rate_u <= 0) | (compute <= 0)
    total = demand / np.where(degenerate, 1.0, rate_u) + demand / np.where(degenerate, 1.0, compute)
    out = np.where(degenerate, latency_cap, total)
    return float(out) if out.ndim == 0 else out


def project_action(raw: np.ndarray) -> np.ndarray:
    """[0,1] にクリップした後、合計が 1 を超える共有資源の列を 1/S 倍する"""
    projected = np.clip(np.asarray(raw, dtype=np.float64), 0.0, 1.0)
    if projected.ndim != 2 or projected.shape[1] != USER_ACTION_DIM:
        raise DimensionError(f"action must be M×{USER_ACTION_DIM}, got shape {projected.shape}")
    for column in SHARED_COLUMNS:
        total = projected[:, column].sum()
        if total > 1.0:
            projected[:, column] = projected[:, column] / total
    return projected


def utility_values(weights: np.ndarray, rate_u: np.ndarray, rate_d: np.ndarray,
                   ee_u: np.ndarray, ee_d: np.ndarray, latency: np.ndarray) -> np.ndarray:
    """ユーザーごとの効用 α1·R_u + α2·R_d + α3·η_u + α4·η_d − α5·L"""
    return (weights[:, 0] * rate_u + weights[:, 1] * rate_d + weights[:, 2] * ee_u
            + weights[:, 3] * ee_d - weights[:, 4] * latency)


def reward_values(weights: np.ndarray, action: np.ndarray, rate_u: np.ndarray, rate_d: np.ndarray,
                  latency: np.ndarray, latency_threshold: np.ndarray,
                  reference_rate_u: float, reference_rate_d: float) -> np.ndarray:
    """ユーザーごとの報酬（レートは参照レートで正規化）"""
    violation = (latency > latency_threshold).astype(np.float64)
    return (weights[:, 0] * rate_u / reference_rate_u
            + weights[:, 1] * rate_d / reference_rate_d
            - weights[:, 2] * action[:, B_U]
            - weights[:, 3] * action[:, B_D]
            - weights[:, 4] * action[:, P_U] ** 2
            - weights[:, 5] * action[:, P_D] ** 2
            - weights[:, 6] * violation)


class HetNetEnvService:
    """HetNet 環境サービス（1インスタンス = 1スレッド）"""

    def __init__(self, config: EnvConfig, seed: Optional[int] = None):
        self.config = config
        self.seed = config.seed if config.seed is not None else (seed if seed is not None else 0)
        self.num_users = config.num_users
        self.reference_rate_u = config.reference_rate_uplink or config.uplink_bandwidth
        self.reference_rate_d = config.reference_rate_downlink or config.downlink_bandwidth

        # タイプ別の選好プロファイル（観測には含めない）
        profile_rng = rng_stream(self.seed, "env_profiles")
        spread = config.preference_spread
        self.type_utility_weights = np.asarray(config.utility_weights) * profile_rng.uniform(
            1.0 - spread, 1.0 + spread, size=(config.type_count, 5))
        self.type_reward_weights = np.asarray(config.reward_weights) * profile_rng.uniform(
            1.0 - spread, 1.0 + spread, size=(config.type_count, 7))

        self._observation_scale = self._build_observation_scale()
        self.rng: Optional[np.random.Generator] = None
        self.users: Optional[UserPopulation] = None
        self.step_index = 0
        self.done = True

        logger.info(f"HetNet 環境初期化完了 - ユーザー数: {self.num_users}, タイプ数: {config.type_count}")

    @property
    def observation_dim(self) -> int:
        return self.num_users * USER_STATE_DIM

    @property
    def action_dim(self) -> int:
        return self.num_users * USER_ACTION_DIM

    @property
    def action_low(self) -> np.ndarray:
        return np.zeros(self.action_dim)

    @property
    def action_high(self) -> np.ndarray:
        return np.ones(self.action_dim)

    def _build_observation_scale(self) -> np.ndarray:
        cfg = self.config
        max_efficiency = 1.0 / (cfg.switched_capacitance_range[0] * cfg.cpu_frequency_range[0])
        return np.array([
            cfg.demand_range[1],
            cfg.latency_cap,
            1.0,
            cfg.cpu_frequency_range[1],
            max(cfg.type_count - 1, 1),
            cfg.uplink_power_range[1],
            1.0,
            cfg.distance_range[0] ** (-cfg.path_loss_exponent),
            math.sqrt(cfg.uplink_noise_power),
            cfg.downlink_power_max,
            1.0,
            math.sqrt(cfg.downlink_noise_power),
            cfg.compute_capacity,
            max_efficiency,
        ])

    def reset(self, seed: Optional[int] = None) -> StepResult:
        """ユーザーを初期化し初期観測を返す（同じシードなら同じ観測）"""
        cfg = self.config
        M = self.num_users
        self.rng = rng_stream(self.seed if seed is None else seed, "env")
        rng = self.rng

        position = rng.uniform(0.0, 1.0, M)
        base_distance = rng.uniform(*cfg.distance_range, M)
        demand = rng.uniform(*cfg.demand_range, M)
        threshold = rng.uniform(*cfg.latency_threshold_range, M)
        user_type = rng.integers(0, cfg.type_count, M)
        cpu_frequency = rng.uniform(*cfg.cpu_frequency_range, M)
        capacitance = rng.uniform(*cfg.switched_capacitance_range, M)
        uplink_power = rng.uniform(*cfg.uplink_power_range, M)

        self.users = UserPopulation(
            demand=demand,
            latency=np.zeros(M),
            position=position,
            initial_position=position.copy(),
            base_distance=base_distance,
            distance=base_distance.copy(),
            cpu_frequency=cpu_frequency,
            user_type=user_type,
            uplink_power_max=uplink_power,
            uplink_fading=np.ones(M),
            downlink_fading=np.ones(M),
            path_loss=path_loss(base_distance, cfg.path_loss_exponent),
            switched_capacitance=capacitance,
            compute_efficiency=1.0 / (capacitance * cpu_frequency),
            latency_threshold=threshold,
            utility_weights=self.type_utility_weights[user_type],
            reward_weights=self.type_reward_weights[user_type],
        )
        self._refresh_fading()
        self.step_index = 0
        self.done = False

        logger.debug(f"HetNet リセット完了 (seed={seed})")
        return StepResult(
            next_state=self.observation(),
            reward=0.0,
            per_user_rewards=np.zeros(M),
            done=False,
        )

    def _refresh_fading(self):
        M = self.num_users
        self.users.uplink_fading = np.asarray(sample_rician(self.config.rician_k, self.rng, M))
        self.users.downlink_fading = np.asarray(sample_rician(self.config.rician_k, self.rng, M))

    def step_mobility(self) -> UserPopulation:
        """正規化位置にガウス摂動を加え [0,1] にクリップ、距離とパスロスを更新"""
        cfg = self.config
        users = self.users
        delta = self.rng.normal(0.0, cfg.mobility_std, self.num_users)
        users.position = np.clip(users.position + delta, 0.0, 1.0)
        d_min, d_max = cfg.distance_range
        users.distance = np.clip(
            users.base_distance + (users.position - users.initial_position) * (d_max - d_min),
            d_min, d_max)
        users.path_loss = path_loss(users.distance, cfg.path_loss_exponent)
        return users

    def raw_observation(self) -> np.ndarray:
        """正規化前の観測（M×14）"""
        cfg = self.config
        u = self.users
        M = self.num_users
        columns = [
            u.demand,
            u.latency,
            u.position,
            u.cpu_frequency,
            u.user_type.astype(np.float64),
            u.uplink_power_max,
            u.uplink_fading,
            u.path_loss,
            np.full(M, math.sqrt(cfg.uplink_noise_power)),
            np.full(M, cfg.downlink_power_max),
            u.downlink_fading,
            np.full(M, math.sqrt(cfg.downlink_noise_power)),
            np.full(M, cfg.compute_capacity),
            u.compute_efficiency,
        ]
        return np.stack(columns, axis=1)

    def observation(self) -> np.ndarray:
        obs = self.raw_observation()
        if self.config.normalize_observation:
            obs = obs / self._observation_scale
        return obs.reshape(-1)

    def user_state(self, m: int) -> UserState:
        u = self.users
        cfg = self.config
        return UserState(
            demand=float(u.demand[m]),
            latency=float(u.latency[m]),
            position=float(u.position[m]),
            cpu_frequency=float(u.cpu_frequency[m]),
            user_type=int(u.user_type[m]),
            uplink_power_max=float(u.uplink_power_max[m]),
            uplink_fading=float(u.uplink_fading[m]),
            downlink_fading=float(u.downlink_fading[m]),
            path_loss=float(u.path_loss[m]),
            uplink_noise_std=math.sqrt(cfg.uplink_noise_power),
            downlink_noise_std=math.sqrt(cfg.downlink_noise_power),
            downlink_power_max=cfg.downlink_power_max,
            compute_capacity=cfg.compute_capacity,
            compute_efficiency=float(u.compute_efficiency[m]),
            switched_capacitance=float(u.switched_capacitance[m]),
            latency_threshold=float(u.latency_threshold[m]),
            utility_weights=u.utility_weights[m].tolist(),
            reward_weights=u.reward_weights[m].tolist(),
        )

    def evaluate(self, projected: np.ndarray) -> Dict[str, np.ndarray]:
        """射影済み行動に対する SINR・レート・EE・遅延・効用・報酬"""
        cfg = self.config
        users = self.users
        sinr_u = uplink_sinrs(projected, users, cfg)
        sinr_d = downlink_sinrs(projected, users, cfg)
        rate_u = shannon_rate(projected[:, B_U], cfg.uplink_bandwidth, sinr_u)
        rate_d = shannon_rate(projected[:, B_D], cfg.downlink_bandwidth, sinr_d)
        ee_u = energy_efficiency(rate_u, projected[:, P_U], users.uplink_power_max)
        ee_d = energy_efficiency(rate_d, projected[:, P_D], cfg.downlink_power_max)
        latency = service_latency(users.demand, rate_u, projected[:, C], cfg.compute_capacity,
                                  users.compute_efficiency, cfg.latency_cap)
        return {
            "sinr_u_m": sinr_u,
            "sinr_d_m": sinr_d,
            "rate_u_m": rate_u,
            "rate_d_m": rate_d,
            "ee_u_m": ee_u,
            "ee_d_m": ee_d,
            "latency_m": latency,
            "utility_m": utility_values(users.utility_weights, rate_u, rate_d, ee_u, ee_d, latency),
            "reward_m": reward_values(users.reward_weights, projected, rate_u, rate_d, latency,
                                      users.latency_threshold, self.reference_rate_u,
                                      self.reference_rate_d),
        }

    def utility(self, m: int, projected: np.ndarray) -> float:
        return float(self.evaluate(projected)["utility_m"][m])

    def reward(self, m: int, projected: np.ndarray) -> float:
        return float(self.evaluate(projected)["reward_m"][m])

    def step(self, action: np.ndarray) -> StepResult:
        """行動を射影 → 指標計算 → 報酬 → 移動とフェージング更新 → 次の観測"""
        if self.users is None or self.done:
            raise EnvironmentStateError("step called on a terminal or un-reset HetNet episode")
        raw = np.asarray(action, dtype=np.float64)
        if raw.size != self.action_dim:
            raise DimensionError(f"action has {raw.size} entries, expected {self.action_dim}")
        projected = project_action(raw.reshape(self.num_users, USER_ACTION_DIM))

        metrics = self.evaluate(projected)
        per_user_rewards = metrics.pop("reward_m")
        self.users.latency = metrics["latency_m"]

        self.step_index += 1
        self.step_mobility()
        if self.config.fading_refresh == "step":
            self._refresh_fading()
        self.done = self.step_index >= self.config.episode_len

        metrics["projected_action"] = projected
        return StepResult(
            next_state=self.observation(),
            reward=float(per_user_rewards.mean()),
            per_user_rewards=per_user_rewards,
            done=self.done,
            info=metrics,
        )
