# services/network_service.py
"""パラメータ管理・乱数ストリーム・全結合ネットワークの共通部品"""
import copy
import logging
import zlib
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Mapping, Sequence

import numpy as np

from models.exceptions import ContractError
from services import tensor_service as ts
from services.tensor_service import Tensor

logger = logging.getLogger(__name__)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """マスターシードと名前から独立した乱数ストリームを作る"""
    entropy = [int(seed) % (2 ** 64), zlib.crc32(name.encode("utf-8"))]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def scaled_gaussian(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    """std = 1/sqrt(fan_in) の正規分布で初期化"""
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=tuple(shape))


class ParameterModule:
    """名前付きパラメータを順序つきで保持するネットワークの基底クラス"""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add_parameter(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def parameters(self) -> Dict[str, Tensor]:
        return self._params

    def parameter_list(self) -> List[Tensor]:
        return list(self._params.values())

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self._params.values()]))

    def zero_grad(self):
        for param in self._params.values():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        if list(state.keys()) != list(self._params.keys()):
            raise ContractError("parameter names do not match the architecture")
        for name, values in state.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != self._params[name].shape:
                raise ContractError(
                    f"parameter {name}: shape {values.shape} does not match {self._params[name].shape}")
            self._params[name].data = values.copy()

    def clone(self) -> "ParameterModule":
        """パラメータ記憶領域を共有しない複製"""
        twin = copy.deepcopy(self)
        twin.zero_grad()
        return twin

    @contextmanager
    def frozen(self) -> Iterator["ParameterModule"]:
        """ブロック内ではパラメータを勾配計算の対象から外す"""
        previous = {name: p.requires_grad for name, p in self._params.items()}
        for param in self._params.values():
            param.requires_grad = False
        try:
            yield self
        finally:
            for name, param in self._params.items():
                param.requires_grad = previous[name]


class MlpNetwork(ParameterModule):
    """GELU 活性の多層パーセプトロン"""

    def __init__(self, d_in: int, widths: Sequence[int], d_out: int, rng: np.random.Generator,
                 prefix: str = "mlp", activation: Callable[[Tensor], Tensor] = ts.gelu):
        super().__init__()
        self.activation = activation
        self.layer_names: List[tuple] = []
        fan_in = d_in
        for i, width in enumerate(list(widths) + [d_out]):
            w_name, b_name = f"{prefix}.{i}.weight", f"{prefix}.{i}.bias"
            self.add_parameter(w_name, scaled_gaussian(rng, (fan_in, width), fan_in))
            self.add_parameter(b_name, np.zeros(width))
            self.layer_names.append((w_name, b_name))
            fan_in = width

    def forward(self, x: Tensor, tag: str = "mlp") -> Tensor:
        params = self.parameters()
        last = len(self.layer_names) - 1
        for i, (w_name, b_name) in enumerate(self.layer_names):
            x = ts.add(ts.matmul(x, params[w_name], tag=tag), params[b_name])
            if i < last:
                x = self.activation(x)
        return x


def mlp_parameter_count(d_in: int, widths: Sequence[int], d_out: int) -> int:
    count, fan_in = 0, d_in
    for width in list(widths) + [d_out]:
        count += fan_in * width + width
        fan_in = width
    return count
