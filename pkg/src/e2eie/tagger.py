from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint
from .corpus import BioSentence, FieldSchema, Vocabulary, e2e_fields
from .evaluation import chunk_f1
from .layers import EmbeddingParams, LstmCellParams, bilstm_encode, lstm_run
from .tensor import Tensor, add, add_n, cross_entropy, get_default_dtype, matmul, scale, softmax

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "baseline"


@dataclass
class TaggerConfig:
    """ベースライン（双方向LSTM＋前向きLSTM＋線形射影）の構成。"""

    labels: tuple[str, ...]
    embed_dim: int = 128
    hidden: int = 128
    layer2_hidden: int = 128

    def __post_init__(self):
        self.labels = tuple(self.labels)
        if "O" not in self.labels:
            raise ValueError("label set must include 'O'")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate labels: {self.labels}")
        for name in ("embed_dim", "hidden", "layer2_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_sentences(cls, sentences: Sequence[BioSentence], **kwargs) -> TaggerConfig:
        """学習データに現れる全ラベル（と'O'）からラベル集合を作る。"""
        labels = {"O"} | {label for sentence in sentences for label in sentence.labels}
        return cls(tuple(sorted(labels)), **kwargs)

    def to_dict(self) -> dict:
        return {**asdict(self), "labels": list(self.labels)}

    @classmethod
    def from_dict(cls, obj: Mapping) -> TaggerConfig:
        return cls(**{**obj, "labels": tuple(obj["labels"])})


@dataclass
class TaggerParams:
    embedding: EmbeddingParams
    layer1_fwd: LstmCellParams
    layer1_bwd: LstmCellParams
    layer2: LstmCellParams
    projection: Tensor
    projection_bias: Tensor

    @classmethod
    def initialize(cls, config: TaggerConfig, vocab_size: int, rng: np.random.Generator) -> TaggerParams:
        limit = 1.0 / np.sqrt(config.layer2_hidden)
        dtype = get_default_dtype()
        return cls(
            embedding=EmbeddingParams.initialize(vocab_size, config.embed_dim, rng),
            layer1_fwd=LstmCellParams.initialize(config.embed_dim, config.hidden, rng),
            layer1_bwd=LstmCellParams.initialize(config.embed_dim, config.hidden, rng),
            layer2=LstmCellParams.initialize(2 * config.hidden, config.layer2_hidden, rng),
            projection=Tensor(
                rng.uniform(-limit, limit, size=(config.layer2_hidden, len(config.labels))).astype(dtype),
                requires_grad=True,
            ),
            projection_bias=Tensor(np.zeros(len(config.labels), dtype=dtype), requires_grad=True),
        )

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        named.update(self.embedding.named_parameters("embedding"))
        named.update(self.layer1_fwd.named_parameters("layer1.fwd"))
        named.update(self.layer1_bwd.named_parameters("layer1.bwd"))
        named.update(self.layer2.named_parameters("layer2"))
        named["projection.weight"] = self.projection
        named["projection.bias"] = self.projection_bias
        return named


def label_distributions(params: TaggerParams, vocab: Vocabulary, tokens: Sequence[str]) -> list[Tensor]:
    """各トークンのラベル分布。"""
    rows = [params.embedding.lookup(index) for index in vocab.encode(tokens)]
    layer1 = bilstm_encode(params.layer1_fwd, params.layer1_bwd, rows)
    layer2 = lstm_run(params.layer2, layer1)
    return [softmax(add(matmul(h, params.projection), params.projection_bias)) for h in layer2]


def tag(params: TaggerParams, config: TaggerConfig, vocab: Vocabulary, tokens: Sequence[str]) -> tuple[str, ...]:
    """トークンごとにargmaxでラベルを選ぶ（構造的なデコードはしない）。"""
    if not tokens:
        return ()
    return tuple(config.labels[int(np.argmax(dist.data))] for dist in label_distributions(params, vocab, tokens))


def tagger_loss(params: TaggerParams, config: TaggerConfig, vocab: Vocabulary, sentence: BioSentence) -> Tensor:
    """正解ラベルの負の対数尤度のトークン平均。"""
    label_index = {label: index for index, label in enumerate(config.labels)}
    unknown = sorted(set(sentence.labels) - set(label_index))
    if unknown:
        raise ValueError(f"labels outside the label set: {unknown}")

    distributions = label_distributions(params, vocab, sentence.tokens)
    terms = [cross_entropy(dist, label_index[label]) for dist, label in zip(distributions, sentence.labels)]
    return scale(add_n(terms), 1.0 / len(terms))


def baseline_to_e2e(
    tokens: Sequence[str], predicted_labels: Sequence[str], schema: FieldSchema
) -> dict[str, tuple[str, ...]]:
    """予測したBIOラベルから、E2Eデータセットと同じ手順でフィールドの値を作る。"""
    return e2e_fields(tuple(tokens), predicted_labels, schema)


class Tagger:
    kind = CHECKPOINT_KIND

    def __init__(self, params: TaggerParams, config: TaggerConfig, vocab: Vocabulary):
        self._params = params
        self._config = config
        self._vocab = vocab

    def __repr__(self):
        return f"{self.__class__.__name__}(labels={len(self._config.labels)}, vocab={len(self._vocab)})"

    @classmethod
    def initialize(cls, config: TaggerConfig, vocab: Vocabulary, rng: np.random.Generator) -> Tagger:
        return cls(TaggerParams.initialize(config, len(vocab), rng), config, vocab)

    @property
    def params(self) -> TaggerParams:
        return self._params

    @property
    def config(self) -> TaggerConfig:
        return self._config

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    def named_parameters(self) -> dict[str, Tensor]:
        return self._params.named_parameters()

    def tag(self, tokens: Sequence[str]) -> tuple[str, ...]:
        return tag(self._params, self._config, self._vocab, tokens)

    def tagger_loss(self, sentence: BioSentence) -> Tensor:
        return tagger_loss(self._params, self._config, self._vocab, sentence)

    def loss(self, sentence: BioSentence, training: bool, rng: np.random.Generator | None) -> Tensor:
        return self.tagger_loss(sentence)

    def validate(self, sentences: Sequence[BioSentence]) -> float:
        """検証データのチャンク単位F1。"""
        return chunk_f1([self.tag(sentence.tokens) for sentence in sentences], sentences).f1

    def extract(self, tokens: Sequence[str], schema: FieldSchema) -> dict[str, tuple[str, ...]]:
        return baseline_to_e2e(tokens, self.tag(tokens), schema)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> Tagger:
        header, arrays = checkpoint.read_container(path, kind=CHECKPOINT_KIND)

        config = TaggerConfig.from_dict(header["config"])
        vocab = Vocabulary(header["vocabulary"])
        params = TaggerParams.initialize(config, len(vocab), np.random.default_rng(0))
        checkpoint.assign(params.named_parameters(), arrays)

        return cls(params, config, vocab)

    def write_to_file(self, path: str | os.PathLike) -> Tagger:
        header = {"kind": CHECKPOINT_KIND, "config": self._config.to_dict(), "vocabulary": list(self._vocab.tokens)}
        checkpoint.write_container(path, header, self.named_parameters())
        return self
