# models/schemas.py (Pydantic V2 現代的書き方)
import math
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# 1ユーザーあたりの観測次元（タスク需要〜計算効率の14項目）
USER_STATE_DIM = 14
# 1ユーザーあたりの行動次元（p_u, p_d, b_u, b_d, c）
USER_ACTION_DIM = 5


def _check_range(name: str, value: Tuple[float, float], positive: bool = False) -> Tuple[float, float]:
    low, high = value
    if low > high:
        raise ValueError(f"{name} must be [low, high]: {value}")
    if positive and low <= 0:
        raise ValueError(f"{name} lower bound must be positive: {value}")
    return value


class EnvConfig(BaseModel):
    """HetNet 環境の設定"""
    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "num_users": 5,
                "distance_range": [5.0, 10.0],
                "episode_len": 200,
            }
        },
    )

    num_users: int = Field(5, ge=1, description="ユーザー数 M")
    mobility_std: float = Field(0.02, ge=0.0, description="移動の標準偏差（正規化座標）")
    path_loss_exponent: float = Field(3.0, gt=0.0, description="パスロス指数 γ")
    rician_k: float = Field(3.0, ge=0.0, description="ライス K ファクタ（線形）")
    uplink_power_range: Tuple[float, float] = Field((0.1, 0.2), description="ユーザー最大上り送信電力の範囲 (W)")
    downlink_power_max: float = Field(1.0, gt=0.0, description="基地局最大下り送信電力 (W)")
    uplink_bandwidth: float = Field(1e6, gt=0.0, description="最大上り帯域 (Hz)")
    downlink_bandwidth: float = Field(1e6, gt=0.0, description="最大下り帯域 (Hz)")
    uplink_noise_power: float = Field(1e-6, gt=0.0, description="上り雑音電力 (W)")
    downlink_noise_power: float = Field(1e-6, gt=0.0, description="下り雑音電力 (W)")
    compute_capacity: float = Field(1e9, gt=0.0, description="総計算能力 C_max (cycles/s)")
    cpu_frequency_range: Tuple[float, float] = Field((1e9, 2e9), description="ローカルCPU周波数 (Hz)")
    switched_capacitance_range: Tuple[float, float] = Field((5e-10, 1e-9), description="実効スイッチング容量係数 κ")
    distance_range: Tuple[float, float] = Field((5.0, 10.0), description="送信距離 [d_min, d_max] (m)")
    episode_len: int = Field(200, ge=1, description="エピソード長")
    latency_threshold_range: Tuple[float, float] = Field((0.5, 2.0), description="遅延しきい値 (s)")
    demand_range: Tuple[float, float] = Field((1e5, 1e6), description="タスク需要 (CPU cycles)")
    type_count: int = Field(3, ge=1, description="ユーザータイプ数 τ_max+1")
    latency_cap: float = Field(10.0, gt=0.0, description="遅延の上限値 (s)")
    utility_weights: List[float] = Field([1.0, 1.0, 1.0, 1.0, 1.0], min_length=5, max_length=5)
    reward_weights: List[float] = Field([1.0, 1.0, 0.2, 0.2, 0.2, 0.2, 1.0], min_length=7, max_length=7)
    preference_spread: float = Field(0.5, ge=0.0, le=1.0, description="タイプ別重みの揺らぎ幅")
    reference_rate_uplink: Optional[float] = Field(None, gt=0.0, description="報酬正規化用の上り参照レート")
    reference_rate_downlink: Optional[float] = Field(None, gt=0.0, description="報酬正規化用の下り参照レート")
    fading_refresh: Literal["step", "episode"] = "step"
    normalize_observation: bool = True
    # 指定すると選好プロファイルを実行シードに関係なく固定する
    seed: Optional[int] = None

    @field_validator("distance_range", "cpu_frequency_range", "switched_capacitance_range",
                     "uplink_power_range", "latency_threshold_range", "demand_range")
    @classmethod
    def _positive_ranges(cls, value, info):
        return _check_range(info.field_name, value, positive=True)

    @field_validator("utility_weights", "reward_weights")
    @classmethod
    def _non_negative_weights(cls, value, info):
        if any(w < 0 for w in value):
            raise ValueError(f"{info.field_name} must be non-negative")
        return value

    @property
    def observation_dim(self) -> int:
        return self.num_users * USER_STATE_DIM

    @property
    def action_dim(self) -> int:
        return self.num_users * USER_ACTION_DIM


class PointMassConfig(BaseModel):
    """質点到達タスクの設定"""
    model_config = ConfigDict(extra="forbid")

    mass: float = Field(1.0, gt=0.0)
    dt: float = Field(0.05, gt=0.0)
    friction: float = Field(0.1, ge=0.0)
    max_force: float = Field(1.0, gt=0.0)
    arena_half_width: float = Field(1.0, gt=0.0)
    goal_radius: float = Field(0.05, gt=0.0)
    action_penalty: float = Field(0.01, ge=0.0)
    episode_len: int = Field(200, ge=1)
    seed: int = 0


class ReaCriticSettings(BaseModel):
    """ReaCritic の構造パラメータ（入出力次元を除く）"""
    model_config = ConfigDict(extra="forbid")

    d_h: int = Field(32, ge=1, description="隠れ次元")
    H: int = Field(4, ge=1, description="水平推論ステップ数")
    V: int = Field(2, ge=1, description="垂直推論ステップ数（Transformerブロック数）")
    n_heads: int = Field(4, ge=1, description="アテンションヘッド数")
    d_ff: Optional[int] = Field(None, ge=1, description="FFN 中間幅（未指定時 4·d_h）")
    noise_sigma: float = Field(0.05, ge=0.0, description="水平トークンへのガウス雑音の標準偏差")
    noise_in_eval: bool = False
    ln_eps: float = Field(1e-5, gt=0.0)

    @model_validator(mode="after")
    def _check_heads(self):
        if self.d_h % self.n_heads != 0:
            raise ValueError(f"d_h={self.d_h} must be divisible by n_heads={self.n_heads}")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_h
        return self


class CriticConfig(ReaCriticSettings):
    """ReaCritic インスタンスを定義する設定"""

    d_s: int = Field(..., ge=1, description="状態次元")
    d_a: int = Field(..., ge=1, description="行動次元")


class MlpCriticConfig(BaseModel):
    """MLP ベースライン critic の設定"""
    model_config = ConfigDict(extra="forbid")

    d_s: int = Field(..., ge=1)
    d_a: int = Field(..., ge=1)
    widths: List[int] = Field([256, 256], min_length=1)


class CriticSpec(BaseModel):
    """実験で使う critic の種類と構造"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["reacritic", "mlp"] = "reacritic"
    reacritic: ReaCriticSettings = Field(default_factory=ReaCriticSettings)
    # None の場合は reacritic と同程度のパラメータ数になる幅を自動で決める
    mlp_widths: Optional[List[int]] = None


class TrainerConfig(BaseModel):
    """学習ループの設定"""
    model_config = ConfigDict(extra="forbid")

    algo: Literal["sac", "ddpg"] = "sac"
    gamma: float = Field(0.99, ge=0.0, lt=1.0, description="割引率 γ")
    critic_lr: float = Field(3e-4, description="η_Q")
    actor_lr: float = Field(3e-4, description="η_π")
    tau: float = Field(0.005, gt=0.0, le=1.0, description="Polyak 係数")
    batch_size: int = Field(64, ge=1)
    buffer_capacity: int = Field(100_000, ge=1)
    warmup_steps: int = Field(1000, ge=0)
    update_every: int = Field(1, ge=1)
    updates_per_step: int = Field(1, ge=1)
    # 0 にすると更新を行わず初期方策のロールアウト統計だけを集める
    max_updates: Optional[int] = Field(None, ge=0)
    entropy_alpha: float = Field(0.2, ge=0.0, description="SAC エントロピー係数（初期値）")
    auto_entropy: bool = True
    alpha_lr: float = 3e-4
    target_entropy: Optional[float] = None
    entropy_in_target: bool = True
    twin_critic: bool = True
    actor_hidden: List[int] = Field([64, 64], min_length=1)
    log_std_bounds: Tuple[float, float] = (-5.0, 2.0)
    exploration_noise: float = Field(0.1, ge=0.0, description="DDPG の探索雑音")
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)

    @field_validator("critic_lr", "actor_lr", "alpha_lr")
    @classmethod
    def _positive_lr(cls, value, info):
        if value <= 0:
            raise ValueError(f"{info.field_name} must be positive: {value}")
        return value

    @field_validator("log_std_bounds")
    @classmethod
    def _ordered_bounds(cls, value):
        return _check_range("log_std_bounds", value)


class SweepAxes(BaseModel):
    """グリッドスイープの軸（未指定の軸は固定）"""
    model_config = ConfigDict(extra="forbid")

    H: Optional[List[int]] = None
    V: Optional[List[int]] = None
    noise_sigma: Optional[List[float]] = None
    num_users: Optional[List[int]] = None

    @field_validator("H", "V", "num_users")
    @classmethod
    def _positive_axis(cls, value, info):
        if value is not None and (not value or any(v < 1 for v in value)):
            raise ValueError(f"sweep.{info.field_name} must hold at least one value >= 1")
        return value

    @field_validator("noise_sigma")
    @classmethod
    def _non_negative_noise(cls, value):
        if value is not None and (not value or any(v < 0 for v in value)):
            raise ValueError("sweep.noise_sigma must hold at least one non-negative value")
        return value


class ExperimentSpec(BaseModel):
    """実験仕様（設定ファイル1つ分）"""
    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "name": "hetnet_m5",
                "env": "hetnet",
                "hetnet": {"num_users": 5},
                "critic": {"kind": "reacritic", "reacritic": {"H": 4, "V": 2}},
                "seeds": [0, 1],
                "episodes": 20,
                "sweep": {"H": [1, 4], "V": [1, 3]},
            }
        },
    )

    name: str = Field("experiment", min_length=1)
    env: Literal["hetnet", "pointmass"] = "hetnet"
    hetnet: EnvConfig = Field(default_factory=EnvConfig)
    pointmass: PointMassConfig = Field(default_factory=PointMassConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    critic: CriticSpec = Field(default_factory=CriticSpec)
    seeds: List[int] = Field([0], min_length=1)
    episodes: int = Field(20, ge=1)
    output_dir: Optional[str] = None
    final_window: Optional[int] = Field(None, ge=1)
    record_wall_time: bool = False
    sweep: SweepAxes = Field(default_factory=SweepAxes)


class UserState(BaseModel):
    """1ユーザー分の状態（観測14項目＋非公開の選好重み）"""
    demand: float
    latency: float
    position: float
    cpu_frequency: float
    user_type: int
    uplink_power_max: float
    uplink_fading: float
    downlink_fading: float
    path_loss: float
    uplink_noise_std: float
    downlink_noise_std: float
    downlink_power_max: float
    compute_capacity: float
    compute_efficiency: float
    switched_capacitance: float
    latency_threshold: float
    utility_weights: List[float]
    reward_weights: List[float]


class UserPopulation(BaseModel):
    """全ユーザーの状態を列ごとの配列で保持する（長さ M）"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    demand: np.ndarray
    latency: np.ndarray
    position: np.ndarray
    initial_position: np.ndarray
    base_distance: np.ndarray
    distance: np.ndarray
    cpu_frequency: np.ndarray
    user_type: np.ndarray
    uplink_power_max: np.ndarray
    uplink_fading: np.ndarray
    downlink_fading: np.ndarray
    path_loss: np.ndarray
    switched_capacitance: np.ndarray
    compute_efficiency: np.ndarray
    latency_threshold: np.ndarray
    utility_weights: np.ndarray
    reward_weights: np.ndarray


class StepResult(BaseModel):
    """環境 1 ステップの結果"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    next_state: np.ndarray
    reward: float
    per_user_rewards: np.ndarray
    done: bool
    info: Dict[str, Any] = Field(default_factory=dict)


class EpisodeMetrics(BaseModel):
    """メトリクス CSV の1行"""
    episode: int
    episode_return: float
    critic_loss_mean: float = math.nan
    q_mean: float = math.nan
    steps: int
    wall_ms: float = 0.0


class TrainingReport(BaseModel):
    """1シード分の学習結果サマリー"""
    run_name: str
    seed: int
    algo: str
    critic_kind: str
    episodes: int
    total_steps: int
    total_updates: int
    episode_returns: List[float]
    first_window_mean_return: float
    final_window_mean_return: float
    final_critic_loss: Optional[float] = None
    critic_parameter_count: int
    wall_time_s: float


class CheckResult(BaseModel):
    """verify スイートの1チェック結果"""
    suite: str
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""
