from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint
from .corpus import EOS_INDEX, E2ERecord, Vocabulary
from .evaluation import muc5_score
from .layers import (
    AttentionParams,
    EmbeddingParams,
    LstmCellParams,
    attention_scores,
    bilstm_encode,
    embedding_dropout_masks,
    lstm_run,
    lstm_step,
    project_encoder,
    variational_dropout,
)
from .tensor import (
    Tensor,
    add_n,
    concat,
    cross_entropy,
    dropout,
    get_default_dtype,
    scale,
    stack,
    weighted_onehot_sum,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "pointer"
# 最大デコード長 = 入力長 + この値
DECODE_MARGIN = 5


@dataclass
class PointerModelConfig:
    """ポインタネットワークの構成。各次元はsize_multiplier倍して使う。"""

    fields: tuple[str, ...]
    embed_dim: int = 96
    encoder_hidden: int = 128
    decoder_hidden: int = 128
    attn_dim: int = 128
    size_multiplier: int = 1
    use_summarizer: bool = False
    embedding_dropout: float = 0.0
    recurrent_dropout: float = 0.0
    max_decode_len: int | None = None

    def __post_init__(self):
        self.fields = tuple(self.fields)
        if not self.fields or len(set(self.fields)) != len(self.fields):
            raise ValueError(f"fields must be non-empty and unique: {self.fields}")
        for name in ("embed_dim", "encoder_hidden", "decoder_hidden", "attn_dim", "size_multiplier"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("embedding_dropout", "recurrent_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.max_decode_len is not None and self.max_decode_len < 1:
            raise ValueError("max_decode_len must be positive")

    @classmethod
    def restaurant_variant(cls, fields: Sequence[str], dropout_rate: float = 0.3) -> PointerModelConfig:
        """パラメータの大きさを2倍にし、dropoutと要約LSTMを加えた構成。"""
        return cls(
            tuple(fields),
            size_multiplier=2,
            use_summarizer=True,
            embedding_dropout=dropout_rate,
            recurrent_dropout=dropout_rate,
        )

    @property
    def embed_size(self) -> int:
        return self.embed_dim * self.size_multiplier

    @property
    def encoder_size(self) -> int:
        return self.encoder_hidden * self.size_multiplier

    @property
    def decoder_size(self) -> int:
        return self.decoder_hidden * self.size_multiplier

    @property
    def attn_size(self) -> int:
        return self.attn_dim * self.size_multiplier

    def decode_limit(self, input_length: int) -> int:
        return self.max_decode_len if self.max_decode_len is not None else input_length + DECODE_MARGIN

    def to_dict(self) -> dict:
        obj = asdict(self)
        obj["fields"] = list(self.fields)
        if obj["max_decode_len"] is None:
            del obj["max_decode_len"]
        return obj

    @classmethod
    def from_dict(cls, obj: Mapping) -> PointerModelConfig:
        return cls(**{**obj, "fields": tuple(obj["fields"])})


@dataclass
class DecoderParams:
    embedding: EmbeddingParams
    start: Tensor
    lstm: LstmCellParams
    h0: Tensor
    c0: Tensor
    attention: AttentionParams
    summarizer: LstmCellParams | None = None

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        named = {}
        named.update(self.embedding.named_parameters(f"{prefix}.embedding"))
        named[f"{prefix}.start"] = self.start
        named.update(self.lstm.named_parameters(f"{prefix}.lstm"))
        named[f"{prefix}.h0"] = self.h0
        named[f"{prefix}.c0"] = self.c0
        named.update(self.attention.named_parameters(f"{prefix}.attention"))
        if self.summarizer is not None:
            named.update(self.summarizer.named_parameters(f"{prefix}.summarizer"))
        return named


@dataclass
class PointerModelParams:
    """共有エンコーダ（埋め込み＋双方向LSTM）とフィールドごとのデコーダ。"""

    embedding: EmbeddingParams
    encoder_fwd: LstmCellParams
    encoder_bwd: LstmCellParams
    decoders: dict[str, DecoderParams] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: PointerModelConfig, vocab_size: int, rng: np.random.Generator) -> PointerModelParams:
        embed, enc, dec, attn = config.embed_size, config.encoder_size, config.decoder_size, config.attn_size
        dtype = get_default_dtype()

        params = cls(
            embedding=EmbeddingParams.initialize(vocab_size, embed, rng),
            encoder_fwd=LstmCellParams.initialize(embed, enc, rng),
            encoder_bwd=LstmCellParams.initialize(embed, enc, rng),
        )

        for name in config.fields:
            decoder_input = embed + (dec if config.use_summarizer else 0)
            params.decoders[name] = DecoderParams(
                embedding=EmbeddingParams.initialize(vocab_size, embed, rng),
                start=Tensor(rng.uniform(-0.1, 0.1, size=embed).astype(dtype), requires_grad=True),
                lstm=LstmCellParams.initialize(decoder_input, dec, rng),
                h0=Tensor(np.zeros(dec, dtype=dtype), requires_grad=True),
                c0=Tensor(np.zeros(dec, dtype=dtype), requires_grad=True),
                attention=AttentionParams.initialize(2 * enc, dec, attn, rng),
                summarizer=LstmCellParams.initialize(2 * enc, dec, rng) if config.use_summarizer else None,
            )

        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        named.update(self.embedding.named_parameters("encoder.embedding"))
        named.update(self.encoder_fwd.named_parameters("encoder.fwd"))
        named.update(self.encoder_bwd.named_parameters("encoder.bwd"))
        for name, decoder in self.decoders.items():
            named.update(decoder.named_parameters(f"decoder.{name}"))
        return named


@dataclass
class LossDiagnostics:
    field_losses: dict[str, float] = field(default_factory=dict)
    distributions: dict[str, list[np.ndarray]] = field(default_factory=dict)
    attentions: dict[str, list[np.ndarray]] = field(default_factory=dict)


class _Dropout:
    """系列（レコード）ごとにサンプリングしたdropoutマスク。"""

    def __init__(self, config: PointerModelConfig, training: bool, rng: np.random.Generator | None):
        self.embedding_rate = config.embedding_dropout if training else 0.0
        self.recurrent_rate = config.recurrent_dropout if training else 0.0
        if (self.embedding_rate or self.recurrent_rate) and rng is None:
            raise ValueError("dropout during training requires a random generator")
        self._rng = rng

    def embedding_masks(self, indices: Sequence[int], dim: int) -> dict[int, Tensor] | None:
        if not self.embedding_rate:
            return None
        return embedding_dropout_masks(indices, dim, self.embedding_rate, self._rng)

    def recurrent_mask(self, hidden: int) -> Tensor | None:
        if not self.recurrent_rate:
            return None
        return variational_dropout((hidden,), self.recurrent_rate, self._rng)


@dataclass
class _Encoding:
    indices: list[int]
    enc: Tensor
    rows: list[Tensor]
    pad_mask: np.ndarray


def encode(
    params: PointerModelParams, config: PointerModelConfig, indices: Sequence[int], masks: _Dropout
) -> _Encoding:
    indices = list(indices)
    rows = [params.embedding.lookup(index) for index in indices]

    embedding_masks = masks.embedding_masks(indices, config.embed_size)
    if embedding_masks is not None:
        rows = [dropout(row, embedding_masks[index]) for row, index in zip(rows, indices)]

    outputs = bilstm_encode(
        params.encoder_fwd,
        params.encoder_bwd,
        rows,
        fwd_mask=masks.recurrent_mask(config.encoder_size),
        bwd_mask=masks.recurrent_mask(config.encoder_size),
    )
    # バッチサイズ1ではパディングは無いが、カンマとEOSを含めて全位置が注意の対象
    return _Encoding(indices, stack(outputs), outputs, np.ones(len(indices), dtype=bool))


class _DecoderRun:
    """1フィールド分のデコーダ。step()を呼ぶたびに注意の重みを1つ返す。"""

    def __init__(self, decoder: DecoderParams, config: PointerModelConfig, encoding: _Encoding, masks: _Dropout):
        self._decoder = decoder
        self._encoding = encoding
        self._keys = project_encoder(decoder.attention, encoding.enc)
        self._masks = masks
        self._embed_size = config.embed_size
        self._h_mask = masks.recurrent_mask(config.decoder_size)
        self._embedding_masks: dict[int, Tensor | None] = {}
        self._summary = None
        if decoder.summarizer is not None:
            summary_mask = masks.recurrent_mask(config.decoder_size)
            self._summary = lstm_run(decoder.summarizer, encoding.rows, h_mask=summary_mask)[-1]
        self._h, self._c = decoder.h0, decoder.c0

    def step(self, previous: int | None) -> Tensor:
        if previous is None:
            x = self._decoder.start
        else:
            x = self._decoder.embedding.lookup(previous)
            if previous not in self._embedding_masks:
                sampled = self._masks.embedding_masks([previous], self._embed_size)
                self._embedding_masks[previous] = sampled[previous] if sampled is not None else None
            if self._embedding_masks[previous] is not None:
                x = dropout(x, self._embedding_masks[previous])

        if self._summary is not None:
            x = concat([x, self._summary])

        self._h, self._c = lstm_step(self._decoder.lstm, x, self._h, self._c, h_mask=self._h_mask)
        return attention_scores(
            self._decoder.attention, self._h, self._encoding.enc, self._encoding.pad_mask, projected=self._keys
        )


def output_distribution(attention: Tensor, input_indices: Sequence[int], vocab_size: int) -> Tensor:
    """o = Σ_i att_i x_i（x_iはone-hot）。同じ単語の位置の重みは合算される。"""
    return weighted_onehot_sum(attention, input_indices, vocab_size)


def sequence_loss(distributions: Sequence[Tensor], target_indices: Sequence[int]) -> Tensor:
    """(1/M) Σ_j -log o_j[y_j]。Mは終端のEOSを含む目標系列の長さ。"""
    if len(distributions) != len(target_indices) or not distributions:
        raise ValueError(f"{len(distributions)} distributions for {len(target_indices)} targets")
    terms = [cross_entropy(dist, target) for dist, target in zip(distributions, target_indices)]
    return scale(add_n(terms), 1.0 / len(terms))


def forward_loss(
    params: PointerModelParams,
    config: PointerModelConfig,
    record: E2ERecord,
    vocab: Vocabulary,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, LossDiagnostics]:
    """教師強制で全デコーダを走らせ、フィールドごとの系列損失の和を返す。"""
    missing = [name for name in config.fields if name not in record.targets]
    if missing:
        raise ValueError(f"record has no target for fields {missing}")

    masks = _Dropout(config, training, rng)
    encoding = encode(params, config, vocab.encode(record.input_tokens), masks)
    diagnostics = LossDiagnostics()
    field_losses = []

    for name in config.fields:
        targets = vocab.encode(record.targets[name]) + [EOS_INDEX]
        run = _DecoderRun(params.decoders[name], config, encoding, masks)

        distributions, attentions = [], []
        for previous in [None] + targets[:-1]:
            attention = run.step(previous)
            attentions.append(attention)
            distributions.append(output_distribution(attention, encoding.indices, len(vocab)))

        loss = sequence_loss(distributions, targets)
        field_losses.append(loss)

        diagnostics.field_losses[name] = loss.item()
        diagnostics.distributions[name] = [dist.data for dist in distributions]
        diagnostics.attentions[name] = [attention.data for attention in attentions]

    return add_n(field_losses), diagnostics


def decode(
    params: PointerModelParams, config: PointerModelConfig, input_tokens: Sequence[str], vocab: Vocabulary
) -> dict[str, tuple[str, ...]]:
    """各フィールドについて、最初のEOSまで（最大decode_limit回）argmaxで単語を選ぶ。
    同じ確率の場合は語彙インデックスの小さい方を選ぶ。
    """
    input_tokens = tuple(input_tokens)
    masks = _Dropout(config, training=False, rng=None)
    encoding = encode(params, config, vocab.encode(input_tokens), masks)
    indices = np.asarray(encoding.indices)
    limit = config.decode_limit(len(input_tokens))

    outputs = {}
    for name in config.fields:
        run = _DecoderRun(params.decoders[name], config, encoding, masks)
        previous = None
        words = []

        for _ in range(limit):
            attention = run.step(previous)
            best = int(np.argmax(output_distribution(attention, encoding.indices, len(vocab)).data))
            if best == EOS_INDEX:
                break

            # 出力は入力中の表層形（UNKの場合も元の単語を返す）
            positions = np.flatnonzero(indices == best)
            words.append(input_tokens[positions[np.argmax(attention.data[positions])]])
            previous = best

        outputs[name] = tuple(words)

    return outputs


def save_checkpoint(
    params: PointerModelParams, config: PointerModelConfig, vocab: Vocabulary, path: str | os.PathLike
) -> None:
    header = {"kind": CHECKPOINT_KIND, "config": config.to_dict(), "vocabulary": list(vocab.tokens)}
    checkpoint.write_container(path, header, params.named_parameters())


def load_checkpoint(path: str | os.PathLike) -> tuple[PointerModelParams, PointerModelConfig, Vocabulary]:
    header, arrays = checkpoint.read_container(path, kind=CHECKPOINT_KIND)

    config = PointerModelConfig.from_dict(header["config"])
    vocab = Vocabulary(header["vocabulary"])
    params = PointerModelParams.initialize(config, len(vocab), np.random.default_rng(0))
    checkpoint.assign(params.named_parameters(), arrays)

    return params, config, vocab


class PointerModel:
    """エンコーダ・デコーダのパラメータと構成・語彙をまとめたもの。"""

    kind = CHECKPOINT_KIND

    def __init__(self, params: PointerModelParams, config: PointerModelConfig, vocab: Vocabulary):
        self._params = params
        self._config = config
        self._vocab = vocab

    def __repr__(self):
        return f"{self.__class__.__name__}(fields={list(self._config.fields)!r}, vocab={len(self._vocab)})"

    @classmethod
    def initialize(cls, config: PointerModelConfig, vocab: Vocabulary, rng: np.random.Generator) -> PointerModel:
        return cls(PointerModelParams.initialize(config, len(vocab), rng), config, vocab)

    @property
    def params(self) -> PointerModelParams:
        return self._params

    @property
    def config(self) -> PointerModelConfig:
        return self._config

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    def fields(self) -> tuple[str, ...]:
        return self._config.fields

    def named_parameters(self) -> dict[str, Tensor]:
        return self._params.named_parameters()

    def forward_loss(
        self, record: E2ERecord, training: bool = False, rng: np.random.Generator | None = None
    ) -> tuple[Tensor, LossDiagnostics]:
        return forward_loss(self._params, self._config, record, self._vocab, training, rng)

    def loss(self, record: E2ERecord, training: bool, rng: np.random.Generator | None) -> Tensor:
        return self.forward_loss(record, training, rng)[0]

    def decode(self, input_tokens: Sequence[str]) -> dict[str, tuple[str, ...]]:
        return decode(self._params, self._config, input_tokens, self._vocab)

    def validate(self, records: Sequence[E2ERecord]) -> float:
        """検証データのマイクロ平均F1。"""
        predictions = [self.decode(record.input_tokens) for record in records]
        return muc5_score(predictions, [record.targets for record in records]).micro.f1

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> PointerModel:
        return cls(*load_checkpoint(path))

    def write_to_file(self, path: str | os.PathLike) -> PointerModel:
        save_checkpoint(self._params, self._config, self._vocab, path)
        return self
