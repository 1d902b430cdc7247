# tests/test_network_service.py
import numpy as np
import numpy.testing as npt
import pytest

from models.exceptions import ContractError
from services.network_service import MlpNetwork, mlp_parameter_count, rng_stream
from services.tensor_service import Tensor


def test_rng_stream_is_reproducible_and_named():
    first = rng_stream(3, "env").standard_normal(5)
    again = rng_stream(3, "env").standard_normal(5)
    other = rng_stream(3, "replay").standard_normal(5)
    npt.assert_array_equal(first, again)
    assert not np.array_equal(first, other)


def test_mlp_parameter_count_matches_network():
    net = MlpNetwork(7, [5, 4], 1, rng_stream(0, "init"))
    assert net.parameter_count() == mlp_parameter_count(7, [5, 4], 1) == 7 * 5 + 5 + 5 * 4 + 4 + 4 + 1


def test_clone_does_not_share_storage():
    net = MlpNetwork(3, [4], 2, rng_stream(0, "init"))
    twin = net.clone()
    twin.parameters()["mlp.0.weight"].data = np.zeros((3, 4))
    assert np.any(net.parameters()["mlp.0.weight"].data != 0)


def test_load_state_dict_round_trip_and_mismatch():
    net = MlpNetwork(3, [4], 2, rng_stream(0, "a"))
    other = MlpNetwork(3, [4], 2, rng_stream(0, "b"))
    other.load_state_dict(net.state_dict())
    for name, param in net.parameters().items():
        npt.assert_array_equal(param.data, other.parameters()[name].data)

    wrong_shape = MlpNetwork(3, [5], 2, rng_stream(0, "c"))
    with pytest.raises(ContractError):
        wrong_shape.load_state_dict(net.state_dict())


def test_frozen_restores_requires_grad():
    net = MlpNetwork(2, [3], 1, rng_stream(0, "init"))
    with net.frozen():
        assert not any(p.requires_grad for p in net.parameter_list())
    assert all(p.requires_grad for p in net.parameter_list())


def test_forward_shape():
    net = MlpNetwork(4, [6, 6], 3, rng_stream(1, "init"))
    assert net.forward(Tensor(np.ones((5, 4)))).shape == (5, 3)
