from __future__ import annotations

import contextlib
import contextvars
import logging
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# 交差エントロピーのlog内に加える下限値（-log(0)を避ける）
CROSS_ENTROPY_FLOOR = 1e-9

_default_dtype = contextvars.ContextVar("default_dtype", default=np.float32)
_active_tape = contextvars.ContextVar("active_tape", default=None)


class DimensionError(ValueError):
    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = tuple(tuple(shape) for shape in shapes)
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(shape) for shape in self.shapes))


class TapeError(RuntimeError):
    pass


class SoftmaxError(ValueError):
    pass


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """生成するテンソルの既定の浮動小数点型を一時的に切り替える。
    学習は32bit、勾配検査は64bitで行う。
    """
    token = _default_dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _default_dtype.reset(token)


def get_default_dtype():
    return _default_dtype.get()


class Tensor:
    """勾配を保持できる密なn次元配列。

    値の実体はrow-majorのnumpy配列。
    演算の結果として生成されたテンソルは、生成後は勾配の蓄積以外で変更しない。
    """

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    def __repr__(self):
        name = self.__class__.__name__
        return f"{name}(shape={self.shape}, dtype={self.dtype.__name__}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype.type

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> Tensor:
        self.grad = None
        return self

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.reshape(grad, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


class Tape:
    """演算の記録（逆伝播用）。

    with文の内側で実行された演算のうち、勾配を必要とする入力を持つものが記録される。
    一つのテープは一つのスレッド（コンテキスト）の中でのみ使うこと。
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *_exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self._consumed:
            raise TapeError("cannot record on a tape that has already been replayed")
        output.requires_grad = True
        output._tape = self
        self._entries.append((output, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """記録を逆順に再生し、勾配を蓄積する。二回目の呼び出しはエラー。"""
        if self._consumed:
            raise TapeError("backward has already been run on this tape")
        if loss.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")

        self._consumed = True
        loss._accumulate(np.ones_like(loss.data))

        for output, inputs, backward_fn in reversed(self._entries):
            if output.grad is None:
                continue
            for tensor, grad in zip(inputs, backward_fn(output.grad)):
                if grad is not None and tensor.requires_grad:
                    tensor._accumulate(grad)

        logger.debug("replayed %d recorded operations", len(self._entries))
        self._entries.clear()


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss was not produced by a recorded tape")
    loss._tape.backward(loss)


def _result(data, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(np.asarray(data, dtype=inputs[0].data.dtype))
    tape = _active_tape.get()
    if tape is not None and any(tensor.requires_grad for tensor in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    """要素ごとの和。行列に行ベクトルを加える場合のみbを各行に展開する。"""
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError("add", a.shape, b.shape)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("add_n requires at least one tensor")
    for tensor in tensors[1:]:
        _require_same_shape("add_n", tensors[0], tensor)

    total = tensors[0].data.copy()
    for tensor in tensors[1:]:
        total = total + tensor.data

    return _result(total, tuple(tensors), lambda g: tuple(g for _ in tensors))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # tanhによる表現はオーバーフローしない
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def elementwise(op: str, *args: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op: {op!r}") from None
    return fn(*args)


def sum_(x: Tensor) -> Tensor:
    return _result(x.data.sum(), (x,), lambda g: (np.full(x.shape, g, dtype=x.data.dtype),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """行列積。(m×k)(k×n)の他に、ベクトル×行列、行列×ベクトルも扱う。"""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def _backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return _result(a.data @ b.data, (a, b), _backward)


def _as_mask(mask, n: int) -> np.ndarray:
    array = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    if array.shape != (n,):
        raise DimensionError("softmax", (n,), array.shape)
    return array


def softmax(x: Tensor, mask=None) -> Tensor:
    """マスク付きsoftmax。maskがFalseの位置は厳密に0になる。"""
    if x.ndim != 1 or x.shape[0] < 1:
        raise DimensionError("softmax", x.shape)

    attendable = np.ones(x.shape, dtype=bool) if mask is None else _as_mask(mask, x.shape[0])
    if not attendable.any():
        raise SoftmaxError("softmax: every position is masked")

    shifted = np.where(attendable, x.data - x.data[attendable].max(), 0.0)
    exp = np.where(attendable, np.exp(shifted), 0.0)
    y = exp / exp.sum()

    return _result(y, (x,), lambda g: (y * (g - (g * y).sum()),))


def cross_entropy(pred: Tensor, target_index: int) -> Tensor:
    """-log(pred[target] + ε)。predは確率分布であること。"""
    if pred.ndim != 1:
        raise DimensionError("cross_entropy", pred.shape)
    if not 0 <= target_index < pred.shape[0]:
        raise IndexError(f"target index {target_index} out of range for {pred.shape[0]} classes")
    if abs(float(pred.data.sum()) - 1.0) > 1e-5:
        raise ValueError(f"cross_entropy expects a probability distribution, sum = {float(pred.data.sum())}")

    p = pred.data[target_index]

    def _backward(g):
        grad = np.zeros_like(pred.data)
        grad[target_index] = -g / (p + CROSS_ENTROPY_FLOOR)
        return (grad,)

    return _result(-np.log(p + CROSS_ENTROPY_FLOOR), (pred,), _backward)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors or any(tensor.ndim != 1 for tensor in tensors):
        raise DimensionError("concat", *(tensor.shape for tensor in tensors))

    bounds = np.cumsum([0] + [tensor.shape[0] for tensor in tensors])

    def _backward(g):
        return tuple(g[start:stop] for start, stop in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([tensor.data for tensor in tensors]), tuple(tensors), _backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """同じ長さのベクトルを行として並べた行列を作る。"""
    if not tensors:
        raise ValueError("stack requires at least one tensor")
    for tensor in tensors:
        if tensor.ndim != 1:
            raise DimensionError("stack", tensor.shape)
        _require_same_shape("stack", tensors[0], tensor)

    return _result(np.stack([tensor.data for tensor in tensors]), tuple(tensors), lambda g: tuple(g))


def slice_(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 1 or not 0 <= start <= stop <= x.shape[0]:
        raise DimensionError("slice", x.shape, (start, stop))

    def _backward(g):
        grad = np.zeros_like(x.data)
        grad[start:stop] = g
        return (grad,)

    return _result(x.data[start:stop], (x,), _backward)


def embedding_lookup(table: Tensor, indices: int | Sequence[int]) -> Tensor:
    """埋め込み表から行を取り出す。整数なら1行（ベクトル）、列なら行列を返す。
    逆伝播は取り出した行へのscatter-add。
    """
    if table.ndim != 2:
        raise DimensionError("embedding_lookup", table.shape)

    index = np.asarray(indices, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(table.data[index], (table,), _backward)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Σ_i weights[i]·values[i]。"""
    if weights.ndim != 1 or values.ndim != 2 or weights.shape[0] != values.shape[0]:
        raise DimensionError("weighted_sum", weights.shape, values.shape)

    return _result(
        weights.data @ values.data,
        (weights, values),
        lambda g: (values.data @ g, np.outer(weights.data, g)),
    )


def weighted_onehot_sum(weights: Tensor, indices: Sequence[int], size: int) -> Tensor:
    """行がone-hotベクトル（indicesで指定）の場合のweighted_sum。
    同じインデックスが複数回現れる場合は重みの和になる。
    """
    index = np.asarray(indices, dtype=np.int64)
    if weights.ndim != 1 or index.shape != weights.shape:
        raise DimensionError("weighted_onehot_sum", weights.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= size):
        raise IndexError(f"one-hot index out of range for size {size}")

    out = np.zeros(size, dtype=weights.data.dtype)
    np.add.at(out, index, weights.data)

    return _result(out, (weights,), lambda g: (g[index],))


def dropout(x: Tensor, mask: Tensor) -> Tensor:
    """事前にサンプリングしたマスク（定数）を掛ける。"""
    _require_same_shape("dropout", x, mask)
    return _result(x.data * mask.data, (x,), lambda g: (g * mask.data,))


def numerical_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """中心差分による勾配。tensorの値を一時的に書き換えるので、並行して使わないこと。"""
    grad = np.zeros_like(tensor.data)
    for index in np.ndindex(*tensor.shape):
        original = tensor.data[index]
        tensor.data[index] = original + step
        upper = loss_fn().item()
        tensor.data[index] = original - step
        lower = loss_fn().item()
        tensor.data[index] = original
        grad[index] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """要素ごとの相対誤差の最大値。分母にはfloorの下限を設ける。"""
    if analytic.size == 0:
        return 0.0
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denominator))


def gradient_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-5) -> dict[str, float]:
    """解析的な勾配と中心差分の勾配を比較し、パラメータごとの最大相対誤差を返す。"""
    for tensor in params.values():
        tensor.zero_grad()

    with Tape():
        loss = loss_fn()
    backward(loss)

    errors = {}
    for name, tensor in params.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        errors[name] = relative_error(analytic, numerical_gradient(loss_fn, tensor, step))
        logger.debug("gradient check %s: max relative error %.3e", name, errors[name])
    return errors
