# tests/test_pointmass_env_service.py
import numpy as np
import numpy.testing as npt
import pytest

from models.exceptions import EnvironmentStateError
from models.schemas import PointMassConfig
from services.pointmass_env_service import PointMassEnvService


@pytest.fixture
def env():
    env = PointMassEnvService(PointMassConfig(episode_len=50))
    env.reset(seed=0)
    return env


def test_reset_is_deterministic():
    a = PointMassEnvService().reset(seed=4).next_state
    b = PointMassEnvService().reset(seed=4).next_state
    npt.assert_array_equal(a, b)
    assert a.shape == (6,)


def test_zero_action_from_rest_keeps_position(env):
    start = env.position.copy()
    result = env.step(np.zeros(2))
    npt.assert_array_equal(env.position, start)
    npt.assert_array_equal(result.next_state[2:4], [0.0, 0.0])


def test_friction_decays_velocity(env):
    env.velocity = np.array([0.4, -0.2])
    env.step(np.zeros(2))
    npt.assert_allclose(env.velocity, np.array([0.4, -0.2]) * (1 - 0.05 * 0.1), rtol=1e-12)


def test_reward_at_target_is_action_penalty(env):
    env.position = env.target.copy()
    env.velocity = np.zeros(2)
    action = np.array([0.6, -0.8])
    result = env.step(action)
    assert result.reward == pytest.approx(-0.01 * float(action @ action), abs=5e-3)


def test_constant_push_toward_target_reduces_distance(env):
    env.position = np.array([-0.5, 0.0])
    env.target = np.array([0.5, 0.0])
    env.velocity = np.zeros(2)
    distances = [env.distance()]
    for _ in range(10):
        distances.append(env.step(np.array([1.0, 0.0])).info["distance"])
    assert all(later < earlier for earlier, later in zip(distances, distances[1:]))


def test_out_of_range_action_is_clipped(env):
    result = env.step(np.array([3.0, 0.0]))
    assert result.info["action_clipped"] is True
    assert np.all(np.abs(env.position) <= 1.0)


def test_episode_length_and_terminal_error():
    env = PointMassEnvService(PointMassConfig(episode_len=3, goal_radius=1e-9))
    env.reset(seed=1)
    done = [env.step(np.zeros(2)).done for _ in range(3)]
    assert done == [False, False, True]
    with pytest.raises(EnvironmentStateError):
        env.step(np.zeros(2))
