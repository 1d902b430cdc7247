# services/critic_service.py
"""
ReaCritic 価値ネットワーク

状態・行動の埋め込み → H 本の水平推論トークンへの展開（位置エンコーディング＋任意の雑音）
→ V 段の pre-norm Transformer ブロック → H トークン上のアテンション集約 → スカラー Q
"""
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional, Protocol, Tuple, Union

import numpy as np

from config.settings import settings
from models.exceptions import ConfigError, ContractError, DimensionError
from models.schemas import CriticConfig, CriticSpec, MlpCriticConfig
from services import tensor_service as ts
from services.network_service import MlpNetwork, ParameterModule, mlp_parameter_count, scaled_gaussian
from services.tensor_service import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "reacritic-checkpoint"

# MAC 集計のタグ
TAG_EMBED = "embed"
TAG_PROJECTION = "projection"
TAG_ATTENTION = "attention"
TAG_FFN = "ffn"
TAG_AGGREGATE = "aggregate"
TAG_HEAD = "head"


class CriticNetwork(Protocol):
    """学習器から見た critic のインターフェース"""

    def q_value(self, state, action, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor: ...

    def parameters(self) -> Dict[str, Tensor]: ...

    def parameter_list(self): ...

    def parameter_count(self) -> int: ...

    def clone(self): ...


def _input_tensor(value, dim: int, label: str) -> Tensor:
    tensor = value if isinstance(value, Tensor) else Tensor(value)
    if tensor.ndim != 2 or tensor.shape[1] != dim:
        raise DimensionError(f"{label} must be (B, {dim}), got {tensor.shape}")
    return tensor


class ReaCriticService(ParameterModule):
    """水平・垂直の二軸推論を行う Transformer critic"""

    kind = "reacritic"

    def __init__(self, config: CriticConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        d_in = config.d_s + config.d_a
        d_h, d_ff = config.d_h, config.d_ff
        self.head_dim = d_h // config.n_heads
        self.last_attention_weights: Dict[str, np.ndarray] = {}

        self.add_parameter("embed.weight", scaled_gaussian(rng, (d_in, d_h), d_in))
        self.add_parameter("embed_ln.gain", np.ones(d_h))
        self.add_parameter("embed_ln.bias", np.zeros(d_h))
        self.add_parameter("positional", rng.normal(0.0, 0.02, size=(config.H, d_h)))
        for v in range(config.V):
            p = f"blocks.{v}"
            self.add_parameter(f"{p}.ln1.gain", np.ones(d_h))
            self.add_parameter(f"{p}.ln1.bias", np.zeros(d_h))
            for name in ("wq", "wk", "wv", "wo"):
                self.add_parameter(f"{p}.attn.{name}", scaled_gaussian(rng, (d_h, d_h), d_h))
            self.add_parameter(f"{p}.attn.bo", np.zeros(d_h))
            self.add_parameter(f"{p}.ln2.gain", np.ones(d_h))
            self.add_parameter(f"{p}.ln2.bias", np.zeros(d_h))
            self.add_parameter(f"{p}.ffn.w1", scaled_gaussian(rng, (d_h, d_ff), d_h))
            self.add_parameter(f"{p}.ffn.b1", np.zeros(d_ff))
            self.add_parameter(f"{p}.ffn.w2", scaled_gaussian(rng, (d_ff, d_h), d_ff))
            self.add_parameter(f"{p}.ffn.b2", np.zeros(d_h))
        self.add_parameter("aggregate.w_a", scaled_gaussian(rng, (d_h, 1), d_h))
        self.add_parameter("final_ln.gain", np.ones(d_h))
        self.add_parameter("final_ln.bias", np.zeros(d_h))
        self.add_parameter("head.w_q", scaled_gaussian(rng, (d_h, 1), d_h))

        logger.info(f"ReaCritic 初期化完了 - H={config.H}, V={config.V}, d_h={d_h}, "
                    f"パラメータ数={self.parameter_count()}")

    def embed(self, state, action) -> Tensor:
        """z0 = LayerNorm(W_embed · [state ∥ action])"""
        cfg = self.config
        p = self.parameters()
        state = _input_tensor(state, cfg.d_s, "state")
        action = _input_tensor(action, cfg.d_a, "action")
        if state.shape[0] != action.shape[0]:
            raise DimensionError(f"state batch {state.shape} and action batch {action.shape} differ")
        joint = ts.concat([state, action], axis=-1)
        projected = ts.matmul(joint, p["embed.weight"], tag=TAG_EMBED)
        return ts.layer_norm(projected, p["embed_ln.gain"], p["embed_ln.bias"], cfg.ln_eps)

    def horizontal_expand(self, z0: Tensor, training: bool = False,
                          rng: Optional[np.random.Generator] = None) -> Tensor:
        """Z0[:, i, :] = z0 + e_i（学習時は N(0, σ²) の雑音を加える）"""
        cfg = self.config
        tokens = ts.add(ts.repeat_axis(z0, 1, cfg.H), self.parameters()["positional"])
        if self.noise_active(training):
            if rng is None:
                raise ContractError("horizontal noise is active but no rng stream was supplied")
            noise = rng.normal(0.0, cfg.noise_sigma, size=tokens.shape)
            tokens = ts.add(tokens, Tensor(noise))
        return tokens

    def noise_active(self, training: bool) -> bool:
        return self.config.noise_sigma > 0 and (training or self.config.noise_in_eval)

    def _split_heads(self, x: Tensor, key_layout: bool = False) -> Tensor:
        B, H, _ = x.shape
        x = ts.reshape(x, (B, H, self.config.n_heads, self.head_dim))
        # (B, heads, H, dk)、キーは転置済み (B, heads, dk, H)
        return ts.transpose(x, (0, 2, 3, 1) if key_layout else (0, 2, 1, 3))

    def self_attention(self, x: Tensor, v: int) -> Tensor:
        """H トークン軸上のマルチヘッド自己注意（マスクなし）"""
        p = self.parameters()
        prefix = f"blocks.{v}.attn"
        B, H, d_h = x.shape
        q = self._split_heads(ts.matmul(x, p[f"{prefix}.wq"], tag=TAG_PROJECTION))
        k = self._split_heads(ts.matmul(x, p[f"{prefix}.wk"], tag=TAG_PROJECTION), key_layout=True)
        val = self._split_heads(ts.matmul(x, p[f"{prefix}.wv"], tag=TAG_PROJECTION))

        scores = ts.mul_scalar(ts.matmul(q, k, tag=TAG_ATTENTION), 1.0 / math.sqrt(self.head_dim))
        weights = ts.softmax(scores, axis=-1)
        self.last_attention_weights[f"block{v}"] = weights.data
        mixed = ts.matmul(weights, val, tag=TAG_ATTENTION)

        merged = ts.reshape(ts.transpose(mixed, (0, 2, 1, 3)), (B, H, d_h))
        return ts.add(ts.matmul(merged, p[f"{prefix}.wo"], tag=TAG_PROJECTION), p[f"{prefix}.bo"])

    def feed_forward(self, x: Tensor, v: int) -> Tensor:
        p = self.parameters()
        prefix = f"blocks.{v}.ffn"
        hidden = ts.gelu(ts.add(ts.matmul(x, p[f"{prefix}.w1"], tag=TAG_FFN), p[f"{prefix}.b1"]))
        return ts.add(ts.matmul(hidden, p[f"{prefix}.w2"], tag=TAG_FFN), p[f"{prefix}.b2"])

    def transformer_block(self, tokens: Tensor, v: int) -> Tensor:
        """Z' = Z + MHSA(LN(Z)); out = Z' + FFN(LN(Z'))"""
        p = self.parameters()
        eps = self.config.ln_eps
        prefix = f"blocks.{v}"
        normed = ts.layer_norm(tokens, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"], eps)
        tokens = ts.add(tokens, self.self_attention(normed, v))
        normed = ts.layer_norm(tokens, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"], eps)
        return ts.add(tokens, self.feed_forward(normed, v))

    def aggregate(self, tokens: Tensor) -> Tensor:
        """s_i = Z_i · w_a、softmax 重みでトークンを加重和する"""
        B, H, d_h = tokens.shape
        scores = ts.reshape(ts.matmul(tokens, self.parameters()["aggregate.w_a"], tag=TAG_AGGREGATE), (B, H))
        weights = ts.softmax(scores, axis=-1)
        self.last_attention_weights["aggregate"] = weights.data
        pooled = ts.matmul(ts.reshape(weights, (B, 1, H)), tokens, tag=TAG_AGGREGATE)
        return ts.reshape(pooled, (B, d_h))

    def q_value(self, state, action, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Q = w_qᵀ · LN(ẑ)、形状 (B,)"""
        p = self.parameters()
        z0 = self.embed(state, action)
        tokens = self.horizontal_expand(z0, training, rng)
        for v in range(self.config.V):
            tokens = self.transformer_block(tokens, v)
        pooled = self.aggregate(tokens)
        normed = ts.layer_norm(pooled, p["final_ln.gain"], p["final_ln.bias"], self.config.ln_eps)
        q = ts.matmul(normed, p["head.w_q"], tag=TAG_HEAD)
        return ts.reshape(q, (q.shape[0],))


class MlpCriticService(MlpNetwork):
    """2層 GELU の MLP critic（ReaCritic と同じ学習スケジュールで差し替え可能）"""

    kind = "mlp"

    def __init__(self, config: MlpCriticConfig, rng: np.random.Generator):
        super().__init__(config.d_s + config.d_a, config.widths, 1, rng, prefix="mlp_critic")
        self.config = config
        logger.info(f"MLP critic 初期化完了 - 幅={config.widths}, パラメータ数={self.parameter_count()}")

    def q_value(self, state, action, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        state = _input_tensor(state, self.config.d_s, "state")
        action = _input_tensor(action, self.config.d_a, "action")
        q = self.forward(ts.concat([state, action], axis=-1), tag=TAG_FFN)
        return ts.reshape(q, (q.shape[0],))


Critic = Union[ReaCriticService, MlpCriticService]


def reacritic_parameter_count(config: CriticConfig) -> int:
    d_in, d_h, d_ff = config.d_s + config.d_a, config.d_h, config.d_ff
    per_block = 4 * d_h + 4 * d_h * d_h + d_h + d_h * d_ff + d_ff + d_ff * d_h + d_h
    return d_in * d_h + 2 * d_h + config.H * d_h + config.V * per_block + d_h + 2 * d_h + d_h


def matched_mlp_widths(target_count: int, d_in: int, depth: int = 2) -> list:
    """同じ幅 w の隠れ層 depth 層でパラメータ数が target_count に最も近い幅"""
    if depth != 2:
        raise ConfigError("matched-budget widths are solved for two hidden layers only")
    # w² + (d_in + 3)·w + 1 = target
    b = d_in + 3
    width = (-b + math.sqrt(b * b + 4.0 * max(target_count - 1, 0))) / 2.0
    candidates = {max(1, math.floor(width)), max(1, math.ceil(width))}
    best = min(candidates, key=lambda w: abs(mlp_parameter_count(d_in, [w, w], 1) - target_count))
    return [best, best]


def flop_breakdown(config: CriticConfig, batch_size: int) -> Dict[str, int]:
    """順伝播1回の積和回数（タグ別の主要項）"""
    B, H, V = batch_size, config.H, config.V
    d_h, d_ff, d_in = config.d_h, config.d_ff, config.d_s + config.d_a
    return {
        TAG_EMBED: B * d_in * d_h,
        TAG_PROJECTION: 4 * B * V * H * d_h * d_h,
        TAG_ATTENTION: 2 * B * V * H * H * d_h,
        TAG_FFN: 2 * B * V * H * d_h * d_ff,
        TAG_AGGREGATE: 2 * B * H * d_h,
        TAG_HEAD: B * d_h,
    }


def flop_count(config: CriticConfig, batch_size: int) -> Tuple[int, int]:
    """(アテンション項 ∝ B·V·H²·d_h, FFN 項 ∝ B·V·H·d_h·d_ff)"""
    breakdown = flop_breakdown(config, batch_size)
    return breakdown[TAG_ATTENTION], breakdown[TAG_FFN]


def build_critic(spec: CriticSpec, d_s: int, d_a: int, rng: np.random.Generator) -> Critic:
    """実験仕様から critic を構築する"""
    rea_config = CriticConfig(d_s=d_s, d_a=d_a, **spec.reacritic.model_dump())
    if spec.kind == "reacritic":
        return ReaCriticService(rea_config, rng)
    widths = spec.mlp_widths or matched_mlp_widths(reacritic_parameter_count(rea_config), d_s + d_a)
    return MlpCriticService(MlpCriticConfig(d_s=d_s, d_a=d_a, widths=widths), rng)


def save_checkpoint(critic: Critic, path: Union[str, Path]) -> Path:
    """パラメータを JSON（名前・形状・行優先の値）で保存"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": settings.CHECKPOINT_FORMAT_VERSION,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "kind": critic.kind,
        "config": critic.config.model_dump(),
        "params": [
            {"name": name, "shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in critic.parameters().items()
        ],
    }
    path.write_text(json.dumps(document, ensure_ascii=False, indent=2), encoding="utf-8")
    logger.info(f"チェックポイント保存完了: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Critic:
    path = Path(path)
    document = json.loads(path.read_text(encoding="utf-8"))
    if document.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a critic checkpoint")
    if document.get("version") != settings.CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {document.get('version')} in {path}")

    rng = np.random.default_rng(0)
    if document["kind"] == ReaCriticService.kind:
        critic: Critic = ReaCriticService(CriticConfig(**document["config"]), rng)
    elif document["kind"] == MlpCriticService.kind:
        critic = MlpCriticService(MlpCriticConfig(**document["config"]), rng)
    else:
        raise ConfigError(f"unknown critic kind {document['kind']!r} in {path}")

    state = {entry["name"]: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
             for entry in document["params"]}
    critic.load_state_dict(state)
    logger.info(f"チェックポイント読み込み完了: {path}")
    return critic
