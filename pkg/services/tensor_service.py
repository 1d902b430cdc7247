# services/tensor_service.py
"""
逆モード自動微分つきの最小限の密テンソルライブラリ

- 演算は numpy (float64) で計算し、有効な GradTape があれば逆伝播規則を記録する
- テープは学習更新1回につき1本作り、backward 後に破棄する
- ブロードキャストは先頭のバッチ次元のみサポートする
"""
import logging
import math
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import settings
from models.exceptions import ConfigError, ContractError, DimensionError, NonFiniteValueError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, int, Sequence, np.ndarray]

_GELU_C = math.sqrt(2.0 / math.pi)

# 有効なテープ / MAC カウンタのスタック（学習スレッド専用）
_tape_stack: List["GradTape"] = []
_mac_counters: List[Counter] = []


class Tensor:
    """float64 の密テンソル。勾配は grad に蓄積される"""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        return hadamard(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    """テープ上の1演算（入力・出力・局所的な逆伝播規則）"""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class GradTape:
    """
    演算の記録テープ

    with GradTape() as tape:
        loss = ...
    tape.backward(loss)
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor):
        """loss から到達可能な requires_grad テンソルすべてに勾配を設定する"""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("backward called on an empty tape")

        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: Dict[int, Tensor] = {id(loss): loss}

        # 記録順の逆に1回ずつ訪問する
        for node in reversed(self.nodes):
            grad_out = pending.pop(id(node.output), None)
            if grad_out is None:
                continue
            _accumulate(node.output, grad_out)
            input_grads = node.backward_fn(grad_out)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + grad
                else:
                    pending[key] = grad
                    owners[key] = tensor

        # 残りはテープ外で作られた葉テンソル
        for key, grad in pending.items():
            tensor = owners[key]
            if tensor.requires_grad:
                _accumulate(tensor, grad)


def _accumulate(tensor: Tensor, grad: np.ndarray):
    if grad.shape != tensor.shape:
        grad = grad.reshape(tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def _record(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    # 総和が有限なら全要素が有限（NaN/Inf は総和に伝播する）
    if settings.CHECK_FINITE and not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _tape_stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape_stack[-1].nodes.append(_Node(op, inputs, out, backward_fn))
    return out


@contextmanager
def count_macs() -> Iterator[Counter]:
    """ブロック内の matmul の積和回数をタグ別に数える"""
    counter: Counter = Counter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_leading_broadcast(op: str, a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]):
    short, long = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if long[len(long) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a_shape} and {b_shape} are not compatible")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# 要素ごとの演算
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("add", a.shape, b.shape)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("sub", a.shape, b.shape)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("hadamard", a.shape, b.shape)
    return _record("hadamard", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("mul_scalar", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _record("add_scalar", a.data + float(c), (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """GELU（tanh 近似）"""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _record("gelu", out, (a,), _backward)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _record("tanh", t, (a,), lambda g: (g * (1.0 - t ** 2),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _record("exp", e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DimensionError("log: input must be strictly positive")
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _record("square", a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """範囲内の要素だけ勾配を通す"""
    inside = (a.data >= low) & (a.data <= high)
    return _record("clip", np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data <= b.data
    return _record("minimum", np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (g * pick_a, g * ~pick_a))


# ---------------------------------------------------------------------------
# 縮約
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out), (a,), _backward)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise DimensionError(f"mean over an empty axis of shape {a.shape}")
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record("mean", np.asarray(out), (a,), _backward)


# ---------------------------------------------------------------------------
# 形状操作
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _record("reshape", a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    lead = [t.shape[:ax] + t.shape[ax + 1:] for t in tensors]
    if any(t.ndim != tensors[0].ndim for t in tensors) or any(shape != lead[0] for shape in lead):
        raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} do not agree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def repeat_axis(a: Tensor, axis: int, count: int) -> Tensor:
    """新しい軸 axis を挿入して count 回複製する"""
    expanded = np.expand_dims(a.data, axis)
    shape = list(expanded.shape)
    shape[axis] = count
    return _record("repeat_axis", np.broadcast_to(expanded, shape).copy(), (a,),
                   lambda g: (g.sum(axis=axis),))


# ---------------------------------------------------------------------------
# 行列積・正規化
# ---------------------------------------------------------------------------

def _matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # [..., m, k] × [k, n] は1回の2次元積にまとめる
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor, tag: str = "matmul") -> Tensor:
    """[..., m, k] × [..., k, n] → [..., m, n]"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    _check_leading_broadcast("matmul", a.shape[:-2], b.shape[:-2])
    out = _matmul_data(a.data, b.data)

    if _mac_counters:
        m, k = a.shape[-2:]
        macs = int(np.prod(out.shape[:-2], dtype=np.int64)) * m * k * b.shape[-1]
        for counter in _mac_counters:
            counter[tag] += macs

    def _backward(g):
        grad_a = grad_b = None
        if a.requires_grad:
            grad_a = _unbroadcast(_matmul_data(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                grad_b = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return grad_a, grad_b

    return _record("matmul", out, (a, b), _backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise DimensionError(f"softmax over an empty axis of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), _backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """最終軸に沿ったレイヤ正規化"""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError(f"layer_norm over an empty axis of shape {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match ({d},)")
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive: {eps}")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data * xhat + bias.data

    def _backward(g):
        dxhat = g * gain.data
        dx = inv / d * (d * dxhat
                        - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        grad_gain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        grad_bias = g.sum(axis=lead) if bias.requires_grad else None
        return dx, grad_gain, grad_bias

    return _record("layer_norm", out, (x, gain, bias), _backward)


# ---------------------------------------------------------------------------
# 最適化
# ---------------------------------------------------------------------------

def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], lr: float,
              beta1: float, beta2: float, eps: float, t: int,
              moments: Sequence[Tuple[np.ndarray, np.ndarray]]):
    """バイアス補正つき Adam 更新（moments は各パラメータの (m, v) バッファ）"""
    if lr <= 0:
        raise ConfigError(f"Adam learning rate must be positive: {lr}")
    if t < 1:
        raise ConfigError(f"Adam step index starts at 1, got {t}")
    if len(moments) != len(params):
        raise ContractError("Adam moment buffers are not allocated for every parameter")

    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for param, grad, (m, v) in zip(params, grads, moments):
        if grad is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param.data = param.data - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


class AdamOptimizer:
    """パラメータ集合に対する Adam オプティマイザ"""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"Adam learning rate must be positive: {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.moments = [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

    def step(self):
        self.t += 1
        adam_step(self.params, [p.grad for p in self.params], self.lr,
                  self.beta1, self.beta2, self.eps, self.t, self.moments)
