# services/pointmass_env_service.py
"""質点を目標まで運ぶ連続制御タスク（学習器の動作確認用）"""
import logging
from typing import Optional

import numpy as np

from models.exceptions import DimensionError, EnvironmentStateError
from models.schemas import PointMassConfig, StepResult
from services.network_service import rng_stream

logger = logging.getLogger(__name__)


class PointMassEnvService:
    """
    観測: [位置x, 位置y, 速度x, 速度y, 目標x, 目標y]
    行動: [-1,1]^2 の力（範囲外はクリップして info["action_clipped"] に記録）
    """

    observation_dim = 6
    action_dim = 2

    def __init__(self, config: Optional[PointMassConfig] = None):
        self.config = config or PointMassConfig()
        self.rng: Optional[np.random.Generator] = None
        self.position = np.zeros(2)
        self.velocity = np.zeros(2)
        self.target = np.zeros(2)
        self.step_index = 0
        self.done = True

    @property
    def action_low(self) -> np.ndarray:
        return -np.ones(self.action_dim)

    @property
    def action_high(self) -> np.ndarray:
        return np.ones(self.action_dim)

    def observation(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity, self.target])

    def distance(self) -> float:
        return float(np.linalg.norm(self.position - self.target))

    def reset(self, seed: Optional[int] = None) -> StepResult:
        cfg = self.config
        self.rng = rng_stream(cfg.seed if seed is None else seed, "env")
        w = cfg.arena_half_width
        self.position = self.rng.uniform(-w, w, 2)
        self.velocity = np.zeros(2)
        self.target = self.rng.uniform(-w, w, 2)
        self.step_index = 0
        self.done = False
        return StepResult(next_state=self.observation(), reward=0.0,
                          per_user_rewards=np.zeros(1), done=False)

    def step(self, action: np.ndarray) -> StepResult:
        if self.done:
            raise EnvironmentStateError("step called on a terminal point-mass episode")
        cfg = self.config
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.size != self.action_dim:
            raise DimensionError(f"action has {action.size} entries, expected {self.action_dim}")
        clipped = np.clip(action, -1.0, 1.0)
        was_clipped = bool(np.any(clipped != action))
        if was_clipped:
            logger.warning(f"行動が範囲外のためクリップしました: {action.tolist()}")

        # 摩擦つきオイラー積分
        force = clipped * cfg.max_force
        self.velocity = self.velocity + cfg.dt * (force / cfg.mass - cfg.friction * self.velocity)
        self.position = self.position + cfg.dt * self.velocity
        w = cfg.arena_half_width
        hit_wall = np.abs(self.position) > w
        self.position = np.clip(self.position, -w, w)
        self.velocity = np.where(hit_wall, 0.0, self.velocity)

        distance = self.distance()
        reward = -distance - cfg.action_penalty * float(clipped @ clipped)
        self.step_index += 1
        self.done = self.step_index >= cfg.episode_len or distance < cfg.goal_radius

        return StepResult(
            next_state=self.observation(),
            reward=reward,
            per_user_rewards=np.array([reward]),
            done=self.done,
            info={"distance": distance, "action_clipped": was_clipped},
        )
