from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    concat,
    dropout,
    embedding_lookup,
    get_default_dtype,
    matmul,
    mul,
    sigmoid,
    slice_,
    softmax,
    stack,
    tanh,
)

logger = logging.getLogger(__name__)

EMBEDDING_INIT_RANGE = 0.1
FORGET_BIAS = 1.0


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], limit: float) -> Tensor:
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(get_default_dtype()), requires_grad=True)


def _zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)


@dataclass
class LstmCellParams:
    """LSTMセルのパラメータ。

    weightは[入力+隠れ状態]から4ゲート分（入力・忘却・候補・出力の順）への射影。
    """

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[1] % 4 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError("lstm params", self.weight.shape, self.bias.shape)
        if self.weight.shape[0] <= self.hidden_size:
            raise DimensionError("lstm params", self.weight.shape)

    @property
    def hidden_size(self) -> int:
        return self.weight.shape[1] // 4

    @property
    def input_size(self) -> int:
        return self.weight.shape[0] - self.hidden_size

    @classmethod
    def initialize(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> LstmCellParams:
        if input_size < 1 or hidden_size < 1:
            raise ValueError(f"sizes must be positive: input={input_size}, hidden={hidden_size}")

        weight = _uniform(rng, (input_size + hidden_size, 4 * hidden_size), 1.0 / math.sqrt(hidden_size))
        bias = _zeros((4 * hidden_size,))
        bias.data[hidden_size : 2 * hidden_size] = FORGET_BIAS

        return cls(weight, bias)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class AttentionParams:
    """加法的注意（v^T tanh(W_e enc + W_d dec)）のパラメータ。"""

    w_e: Tensor
    w_d: Tensor
    v: Tensor

    def __post_init__(self):
        attn_dim = self.v.shape[0]
        if self.v.ndim != 1 or self.w_e.shape[-1] != attn_dim or self.w_d.shape[-1] != attn_dim:
            raise DimensionError("attention params", self.w_e.shape, self.w_d.shape, self.v.shape)

    @property
    def attn_dim(self) -> int:
        return self.v.shape[0]

    @classmethod
    def initialize(cls, enc_dim: int, dec_dim: int, attn_dim: int, rng: np.random.Generator) -> AttentionParams:
        # 入力次元で割り、tanhの手前の値がエンコーダやデコーダの次元に依らず同程度になるようにする
        return cls(
            w_e=_uniform(rng, (enc_dim, attn_dim), 1.0 / math.sqrt(enc_dim)),
            w_d=_uniform(rng, (dec_dim, attn_dim), 1.0 / math.sqrt(dec_dim)),
            v=_uniform(rng, (attn_dim,), 1.0 / math.sqrt(attn_dim)),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_e": self.w_e, f"{prefix}.w_d": self.w_d, f"{prefix}.v": self.v}


@dataclass
class EmbeddingParams:
    table: Tensor

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @classmethod
    def initialize(cls, vocab_size: int, dim: int, rng: np.random.Generator) -> EmbeddingParams:
        return cls(_uniform(rng, (vocab_size, dim), EMBEDDING_INIT_RANGE))

    def lookup(self, index: int) -> Tensor:
        return embedding_lookup(self.table, index)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.table": self.table}


def lstm_step(
    p: LstmCellParams, x: Tensor, h_prev: Tensor, c_prev: Tensor, h_mask: Tensor | None = None
) -> tuple[Tensor, Tensor]:
    """LSTMの1ステップ。h_maskは系列全体で共有するリカレントdropoutのマスク。"""
    hidden = p.hidden_size
    if x.shape != (p.input_size,) or h_prev.shape != (hidden,) or c_prev.shape != (hidden,):
        raise DimensionError("lstm_step", x.shape, h_prev.shape, c_prev.shape)

    if h_mask is not None:
        h_prev = dropout(h_prev, h_mask)

    z = add(matmul(concat([x, h_prev]), p.weight), p.bias)

    gate_in = sigmoid(slice_(z, 0, hidden))
    gate_forget = sigmoid(slice_(z, hidden, 2 * hidden))
    candidate = tanh(slice_(z, 2 * hidden, 3 * hidden))
    gate_out = sigmoid(slice_(z, 3 * hidden, 4 * hidden))

    c = add(mul(gate_forget, c_prev), mul(gate_in, candidate))
    h = mul(gate_out, tanh(c))
    return h, c


def zero_state(hidden_size: int) -> tuple[Tensor, Tensor]:
    dtype = get_default_dtype()
    return Tensor(np.zeros(hidden_size, dtype=dtype)), Tensor(np.zeros(hidden_size, dtype=dtype))


def lstm_run(
    p: LstmCellParams,
    xs: Sequence[Tensor],
    h0: Tensor | None = None,
    c0: Tensor | None = None,
    h_mask: Tensor | None = None,
) -> list[Tensor]:
    """系列全体にLSTMを適用し、各時刻の隠れ状態を返す。"""
    h, c = zero_state(p.hidden_size)
    h = h0 if h0 is not None else h
    c = c0 if c0 is not None else c

    outputs = []
    for x in xs:
        h, c = lstm_step(p, x, h, c, h_mask=h_mask)
        outputs.append(h)
    return outputs


def bilstm_encode(
    fwd: LstmCellParams,
    bwd: LstmCellParams,
    xs: Sequence[Tensor],
    fwd_mask: Tensor | None = None,
    bwd_mask: Tensor | None = None,
) -> list[Tensor]:
    """双方向LSTM。時刻iの出力は前向きと後ろ向きの隠れ状態の連結。"""
    if not xs:
        raise ValueError("bilstm_encode requires a non-empty sequence")

    forward = lstm_run(fwd, xs, h_mask=fwd_mask)
    backward = lstm_run(bwd, list(reversed(xs)), h_mask=bwd_mask)[::-1]

    return [concat([f, b]) for f, b in zip(forward, backward)]


def project_encoder(p: AttentionParams, enc: Tensor) -> Tensor:
    """W_e·enc_i を全位置についてまとめて計算する（デコードの各ステップで再利用）。"""
    return matmul(enc, p.w_e)


def attention_scores(
    p: AttentionParams,
    d_state: Tensor,
    enc_outs,
    pad_mask=None,
    projected: Tensor | None = None,
) -> Tensor:
    """a_i = v^T tanh(W_e enc_i + W_d dec) を計算し、マスク付きsoftmaxで正規化する。

    Args:
        enc_outs: エンコーダ出力（ベクトルの列、または[N×enc_dim]の行列）
        pad_mask: Trueの位置のみ注意の対象とする（省略時は全位置）
        projected: project_encoder()の計算済み結果
    """
    enc = enc_outs if isinstance(enc_outs, Tensor) else stack(list(enc_outs))
    if enc.ndim != 2 or enc.shape[0] == 0:
        raise ValueError("attention_scores requires non-empty encoder outputs")

    keys = projected if projected is not None else project_encoder(p, enc)
    query = matmul(d_state, p.w_d)
    scores = matmul(tanh(add(keys, query)), p.v)

    return softmax(scores, mask=pad_mask)


def variational_dropout(shape, rate: float, rng: np.random.Generator | None) -> Tensor:
    """系列ごとに一度だけサンプリングし、全時刻で使い回すdropoutマスク。
    保持された要素は1/(1-rate)倍される。
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1): {rate}")

    dtype = get_default_dtype()
    if rate == 0.0:
        return Tensor(np.ones(shape, dtype=dtype))

    keep = rng.random(shape) >= rate
    return Tensor((keep / (1.0 - rate)).astype(dtype))


def embedding_dropout_masks(
    indices: Sequence[int], dim: int, rate: float, rng: np.random.Generator
) -> dict[int, Tensor]:
    """単語（語彙インデックス）ごとに埋め込み行全体を落とすマスク。
    系列中に同じ単語が複数回現れても同じマスクを使う。
    """
    dtype = get_default_dtype()
    masks = {}
    for index in sorted(set(indices)):
        keep = variational_dropout((1,), rate, rng).data[0]
        masks[index] = Tensor(np.full(dim, keep, dtype=dtype))
    return masks
