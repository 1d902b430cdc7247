# tests/test_critic_service.py
import numpy as np
import numpy.testing as npt
import pytest
from pydantic import ValidationError

from models.exceptions import ContractError, DimensionError
from models.schemas import CriticConfig, CriticSpec, ReaCriticSettings
from services import tensor_service as ts
from services.critic_service import (
    MlpCriticService,
    ReaCriticService,
    build_critic,
    flop_breakdown,
    flop_count,
    load_checkpoint,
    matched_mlp_widths,
    reacritic_parameter_count,
    save_checkpoint,
)
from services.network_service import mlp_parameter_count, rng_stream
from services.tensor_service import Tensor
from services.verification_service import gradient_check


@pytest.fixture
def critic(small_critic_config):
    return ReaCriticService(small_critic_config, rng_stream(0, "critic_init"))


def batch(rng, config, B=4):
    return rng.standard_normal((B, config.d_s)), rng.uniform(0, 1, (B, config.d_a))


def test_q_value_shape_and_eval_determinism(critic, small_critic_config, rng):
    state, action = batch(rng, small_critic_config, B=5)
    first = critic.q_value(state, action).data
    assert first.shape == (5,)
    npt.assert_array_equal(first, critic.q_value(state, action).data)


def test_embed_shape_and_zero_weights(critic, small_critic_config, rng):
    state, action = batch(rng, small_critic_config)
    assert critic.embed(state, action).shape == (4, small_critic_config.d_h)
    critic.parameters()["embed.weight"].data = np.zeros_like(critic.parameters()["embed.weight"].data)
    critic.parameters()["embed_ln.bias"].data = np.arange(small_critic_config.d_h, dtype=float)
    npt.assert_array_equal(critic.embed(state, action).data,
                           np.tile(np.arange(small_critic_config.d_h, dtype=float), (4, 1)))


def test_input_dimensions_are_checked(critic, rng):
    with pytest.raises(DimensionError):
        critic.q_value(rng.standard_normal((2, 5)), rng.uniform(0, 1, (2, 2)))
    with pytest.raises(DimensionError):
        critic.q_value(rng.standard_normal((2, 6)), rng.uniform(0, 1, (3, 2)))


def test_heads_must_divide_hidden_size():
    with pytest.raises(ValidationError):
        ReaCriticSettings(d_h=10, n_heads=4)


def test_horizontal_expand_adds_positional_encodings(critic, small_critic_config, rng):
    z0 = Tensor(rng.standard_normal((2, small_critic_config.d_h)))
    tokens = critic.horizontal_expand(z0).data
    positional = critic.parameters()["positional"].data
    npt.assert_allclose(tokens - z0.data[:, None, :], np.broadcast_to(positional, tokens.shape), atol=1e-15)


def test_horizontal_expand_single_token_identity(rng):
    config = CriticConfig(d_s=3, d_a=1, d_h=4, H=1, V=1, n_heads=1, noise_sigma=0.0)
    critic = ReaCriticService(config, rng_stream(0, "critic_init"))
    critic.parameters()["positional"].data = np.zeros((1, 4))
    z0 = Tensor(rng.standard_normal((3, 4)))
    npt.assert_array_equal(critic.horizontal_expand(z0).data[:, 0, :], z0.data)


def test_horizontal_noise_statistics_and_modes(rng):
    config = CriticConfig(d_s=3, d_a=1, d_h=50, H=20, V=1, n_heads=1, noise_sigma=0.1)
    critic = ReaCriticService(config, rng_stream(0, "critic_init"))
    z0 = Tensor(np.zeros((100, 50)))
    clean = critic.horizontal_expand(z0, training=False).data
    noisy = critic.horizontal_expand(z0, training=True, rng=rng).data
    assert abs(np.std(noisy - clean) / 0.1 - 1.0) < 0.02
    with pytest.raises(ContractError):
        critic.horizontal_expand(z0, training=True)


def test_zero_output_projections_make_block_identity(critic, small_critic_config, rng):
    p = critic.parameters()
    for name in ("blocks.0.attn.wo", "blocks.0.attn.bo", "blocks.0.ffn.w2", "blocks.0.ffn.b2"):
        p[name].data = np.zeros_like(p[name].data)
    tokens = Tensor(rng.standard_normal((2, small_critic_config.H, small_critic_config.d_h)))
    npt.assert_array_equal(critic.transformer_block(tokens, 0).data, tokens.data)


def test_block_is_permutation_equivariant(critic, small_critic_config, rng):
    tokens = rng.standard_normal((2, small_critic_config.H, small_critic_config.d_h))
    order = np.array([2, 0, 1])
    out = critic.transformer_block(Tensor(tokens), 1).data
    permuted = critic.transformer_block(Tensor(tokens[:, order, :]), 1).data
    npt.assert_allclose(permuted, out[:, order, :], atol=1e-12)


def test_attention_weights_sum_to_one(critic, small_critic_config, rng):
    critic.q_value(*batch(rng, small_critic_config, B=32))
    for name, weights in critic.last_attention_weights.items():
        assert np.max(np.abs(weights.sum(axis=-1) - 1.0)) < 1e-9, name
    assert set(critic.last_attention_weights) == {"block0", "block1", "aggregate"}


def test_aggregate_single_and_identical_tokens(rng):
    config = CriticConfig(d_s=2, d_a=1, d_h=4, H=1, V=1, n_heads=2)
    single = ReaCriticService(config, rng_stream(0, "critic_init"))
    tokens = Tensor(rng.standard_normal((3, 1, 4)))
    npt.assert_allclose(single.aggregate(tokens).data, tokens.data[:, 0, :], rtol=1e-15)

    wide = ReaCriticService(config.model_copy(update={"H": 5}), rng_stream(0, "critic_init"))
    token = rng.standard_normal((3, 1, 4))
    same = Tensor(np.repeat(token, 5, axis=1))
    npt.assert_allclose(wide.aggregate(same).data, token[:, 0, :], rtol=1e-12)
    npt.assert_allclose(wide.last_attention_weights["aggregate"], 0.2, rtol=1e-12)


def test_parameter_count_formula(critic, small_critic_config):
    assert critic.parameter_count() == reacritic_parameter_count(small_critic_config)


def test_flop_breakdown_matches_instrumented_pass(rng):
    config = CriticConfig(d_s=5, d_a=3, d_h=12, H=4, V=3, n_heads=3)
    critic = ReaCriticService(config, rng_stream(2, "critic_init"))
    with ts.count_macs() as counter:
        critic.q_value(*batch(rng, config, B=6))
    assert dict(counter) == flop_breakdown(config, 6)


def test_flop_count_scaling():
    base = CriticConfig(d_s=4, d_a=2, d_h=8, H=3, V=2, n_heads=2)
    attention, ffn = flop_count(base, 4)
    attention_v, ffn_v = flop_count(base.model_copy(update={"V": 4}), 4)
    assert (attention_v, ffn_v) == (2 * attention, 2 * ffn)
    attention_h, _ = flop_count(base.model_copy(update={"H": 6}), 4)
    assert attention_h == 4 * attention


def test_full_pipeline_gradient(rng):
    config = CriticConfig(d_s=4, d_a=2, d_h=8, H=3, V=1, n_heads=2)
    critic = ReaCriticService(config, rng_stream(0, "critic_init"))
    state, action = batch(rng, config, B=3)
    weights = Tensor(rng.standard_normal(3))
    errors = gradient_check(lambda: ts.sum(ts.hadamard(critic.q_value(state, action), weights)),
                            critic.parameter_list())
    assert max(errors.values()) < 1e-4


def test_matched_mlp_widths_close_to_budget():
    target = 12_345
    widths = matched_mlp_widths(target, 20)
    best = mlp_parameter_count(20, widths, 1)
    for neighbour in (widths[0] - 1, widths[0] + 1):
        assert abs(best - target) <= abs(mlp_parameter_count(20, [neighbour, neighbour], 1) - target)


def test_build_critic_kinds(rng):
    spec = CriticSpec(kind="mlp", reacritic=ReaCriticSettings(d_h=8, H=2, V=1, n_heads=2))
    mlp = build_critic(spec, 6, 2, rng_stream(0, "critic_init"))
    assert isinstance(mlp, MlpCriticService)
    assert mlp.q_value(rng.standard_normal((3, 6)), rng.uniform(0, 1, (3, 2))).shape == (3,)

    explicit = build_critic(spec.model_copy(update={"mlp_widths": [7, 5]}), 6, 2, rng_stream(0, "critic_init"))
    assert explicit.config.widths == [7, 5]
    assert isinstance(build_critic(CriticSpec(), 6, 2, rng_stream(0, "critic_init")), ReaCriticService)


def test_checkpoint_restores_parameters_exactly(critic, small_critic_config, tmp_path, rng):
    path = save_checkpoint(critic, tmp_path / "critic.json")
    restored = load_checkpoint(path)
    state, action = batch(rng, small_critic_config)
    npt.assert_array_equal(restored.q_value(state, action).data, critic.q_value(state, action).data)
