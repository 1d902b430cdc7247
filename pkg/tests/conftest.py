# tests/conftest.py
import numpy as np
import pytest

from models.schemas import (
    CriticConfig,
    CriticSpec,
    EnvConfig,
    ExperimentSpec,
    PointMassConfig,
    ReaCriticSettings,
    TrainerConfig,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_critic_config():
    return CriticConfig(d_s=6, d_a=2, d_h=8, H=3, V=2, n_heads=2, noise_sigma=0.0)


@pytest.fixture
def env_config():
    return EnvConfig(num_users=3, episode_len=10, seed=7)


@pytest.fixture
def tiny_trainer_config():
    return TrainerConfig(batch_size=8, warmup_steps=16, buffer_capacity=500, actor_hidden=[16])


@pytest.fixture
def tiny_critic_spec():
    return CriticSpec(kind="reacritic", reacritic=ReaCriticSettings(d_h=8, H=2, V=1, n_heads=2))


@pytest.fixture
def tiny_experiment(tmp_path, tiny_trainer_config, tiny_critic_spec):
    """数秒で終わる質点タスクの実験仕様"""
    return ExperimentSpec(
        name="tiny",
        env="pointmass",
        pointmass=PointMassConfig(episode_len=12),
        trainer=tiny_trainer_config,
        critic=tiny_critic_spec,
        seeds=[0],
        episodes=3,
        output_dir=str(tmp_path / "runs"),
        final_window=2,
    )
