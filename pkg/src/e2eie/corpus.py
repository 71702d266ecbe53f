from __future__ import annotations

import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import toml

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
EOS = "<eos>"
COMMA = ","
RESERVED_TOKENS = (PAD, UNK, EOS, COMMA)
PAD_INDEX, UNK_INDEX, EOS_INDEX, COMMA_INDEX = range(len(RESERVED_TOKENS))

RECORD_FORMAT_VERSION = 1
SCHEMA_FORMAT_VERSION = 1

DATASETS = ("atis", "restaurant", "movie")
# 各データセットで想定されるフィールド数（ATISは出現頻度の上位10ラベル）
DATASET_FIELD_COUNTS = {"atis": 10, "restaurant": 8, "movie": 12}

_BIO_LABEL = re.compile(r"^(O|[BI]-\S+)$")


class CorpusFormatError(ValueError):
    def __init__(self, path: str | os.PathLike, line_number: int, message: str):
        self.path = str(path)
        self.line_number = line_number
        self.message = message
        super().__init__(f"{self.path}:{line_number}: {message}")


class BioFormatError(CorpusFormatError):
    pass


class RecordFormatError(CorpusFormatError):
    pass


def is_bio_label(label: str) -> bool:
    return _BIO_LABEL.match(label) is not None


def numbered_lines(
    path: str | os.PathLike, error: type[CorpusFormatError] = CorpusFormatError
) -> Iterator[tuple[int, str]]:
    """ファイルを1行ずつUTF-8として読み、（行番号, 行）を返す。

    デコードできない行があればその行番号を付けてerrorを送出する。
    """
    with Path(path).expanduser().open(mode="rb") as f:
        for line_number, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise error(path, line_number, f"invalid UTF-8 at byte {e.start}: {raw[e.start : e.end]!r}") from e
            yield line_number, line


@dataclass(frozen=True)
class BioSentence:
    tokens: tuple[str, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.tokens) != len(self.labels):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.labels)} labels")
        for label in self.labels:
            if not is_bio_label(label):
                raise ValueError(f"not a BIO label: {label!r}")

    def __len__(self) -> int:
        return len(self.tokens)


class Chunk(NamedTuple):
    field: str
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class FieldSchema:
    """抽出対象のフィールド（順序付き）。"""

    dataset: str
    fields: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if len(set(self.fields)) != len(self.fields):
            raise ValueError(f"duplicate field names: {self.fields}")

    def __len__(self) -> int:
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    def __contains__(self, name: object) -> bool:
        return name in self.fields

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> FieldSchema:
        with Path(path).expanduser().resolve().open(mode="r", encoding="utf-8") as f:
            obj = toml.load(f)

        if obj.get("version") != SCHEMA_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported schema version {obj.get('version')!r}")
        return cls(obj["dataset"], tuple(obj["fields"]))

    def write_to_file(self, path: str | os.PathLike, *, mkdir: bool = False) -> FieldSchema:
        path = Path(path).expanduser().resolve()

        if mkdir:
            path.parent.mkdir(parents=True, exist_ok=True)

        with path.open(mode="w", encoding="utf-8") as f:
            toml.dump({"version": SCHEMA_FORMAT_VERSION, "dataset": self.dataset, "fields": list(self.fields)}, f)

        return self


@dataclass
class E2ERecord:
    """E2Eの学習・評価データ1件。

    input_tokensはカンマを先頭に、EOSを末尾に付加済みのトークン列。
    targetsはフィールド名から値（トークン列、空も可）への写像。
    """

    input_tokens: tuple[str, ...]
    targets: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        self.input_tokens = tuple(self.input_tokens)
        self.targets = {name: tuple(value) for name, value in self.targets.items()}

    def to_dict(self) -> dict:
        return {
            "version": RECORD_FORMAT_VERSION,
            "input": list(self.input_tokens),
            "fields": {name: list(value) for name, value in self.targets.items()},
        }


class Vocabulary:
    """トークンとインデックスの相互変換。先頭の4つは予約記号（PAD, UNK, EOS, カンマ）。"""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")

        self._tokens = tokens
        self._index = {token: index for index, token in enumerate(tokens)}

    def __repr__(self):
        return f"{self.__class__.__name__}(size={len(self)})"

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def index(self, token: str) -> int:
        return self._index.get(token, UNK_INDEX)

    def token(self, index: int) -> str:
        return self._tokens[index]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index(token) for token in tokens]


def read_bio(path: str | os.PathLike) -> list[BioSentence]:
    """CoNLL形式（1行に「トークン ラベル」、空行で文の区切り）のファイルを読み込む。"""
    sentences = []
    tokens: list[str] = []
    labels: list[str] = []

    for line_number, line in numbered_lines(path, BioFormatError):
        columns = line.split()

        if not columns:
            if tokens:
                sentences.append(BioSentence(tuple(tokens), tuple(labels)))
                tokens, labels = [], []
            continue

        if len(columns) != 2:
            raise BioFormatError(path, line_number, f"expected 2 columns, got {len(columns)}")
        if not is_bio_label(columns[1]):
            raise BioFormatError(path, line_number, f"not a BIO label: {columns[1]!r}")

        tokens.append(columns[0])
        labels.append(columns[1])

    if tokens:
        sentences.append(BioSentence(tuple(tokens), tuple(labels)))

    logger.info("read %d sentences from %s", len(sentences), path)
    return sentences


def chunk_spans(labels: Sequence[str]) -> list[tuple[str, int, int]]:
    """BIOラベル列からチャンクの（フィールド名, 開始, 終了）を取り出す。終了位置は含まない。

    I-Xが同じ種類のB-X/I-Xに続かない場合は、新しいチャンクの開始とみなす（conllevalと同じ）。
    """
    spans = []
    current = None

    for position, label in enumerate(labels):
        tag, name = label[0], label[2:]

        if tag == "O" or tag == "B" or current is None or current[0] != name:
            if current is not None:
                spans.append((current[0], current[1], position))
                current = None
            if tag != "O":
                current = (name, position)

    if current is not None:
        spans.append((current[0], current[1], len(labels)))

    return spans


def chunk_bio(sentence: BioSentence) -> list[Chunk]:
    return [Chunk(name, sentence.tokens[start:stop]) for name, start, stop in chunk_spans(sentence.labels)]


def labels_from_chunks(length: int, spans: Iterable[tuple[str, int, int]]) -> list[str]:
    """chunk_spans()の逆変換。"""
    labels = ["O"] * length
    for name, start, stop in spans:
        labels[start] = f"B-{name}"
        for position in range(start + 1, stop):
            labels[position] = f"I-{name}"
    return labels


def prepare_input(tokens: Sequence[str]) -> tuple[str, ...]:
    """先頭にカンマ、末尾にEOSを付加する。"""
    return (COMMA,) + tuple(tokens) + (EOS,)


def strip_input(tokens: Sequence[str]) -> tuple[str, ...]:
    """prepare_input()の逆変換。"""
    tokens = tuple(tokens)
    if tokens[:1] == (COMMA,):
        tokens = tokens[1:]
    if tokens[-1:] == (EOS,):
        tokens = tokens[:-1]
    return tokens


def e2e_fields(tokens: Sequence[str], labels: Sequence[str], schema: FieldSchema) -> dict[str, tuple[str, ...]]:
    """BIOラベルをチャンクに分け、フィールドごとに出現順でカンマ区切りに連結する。
    スキーマにないフィールドのチャンクは捨てる。
    """
    values: dict[str, list[str]] = {name: [] for name in schema.fields}

    for name, start, stop in chunk_spans(labels):
        if name not in values:
            continue
        if values[name]:
            values[name].append(COMMA)
        values[name].extend(tokens[start:stop])

    return {name: tuple(value) for name, value in values.items()}


def to_e2e(sentences: Iterable[BioSentence], schema: FieldSchema) -> list[E2ERecord]:
    return [
        E2ERecord(prepare_input(sentence.tokens), e2e_fields(sentence.tokens, sentence.labels, schema))
        for sentence in sentences
    ]


def field_frequencies(sentences: Iterable[BioSentence]) -> Counter:
    return Counter(chunk.field for sentence in sentences for chunk in chunk_bio(sentence))


def select_schema(sentences: Sequence[BioSentence], dataset: str) -> FieldSchema:
    """学習データのチャンク出現頻度からスキーマを決める。
    ATISは上位10件、restaurant/movieは全フィールド（頻度の降順、同数は辞書順）。
    """
    if dataset not in DATASETS:
        raise ValueError(f"unknown dataset {dataset!r}, expected one of {DATASETS}")
    if not sentences:
        raise ValueError("cannot select a schema from an empty training set")

    counts = field_frequencies(sentences)
    ranked = sorted(counts, key=lambda name: (-counts[name], name))

    if dataset == "atis":
        ranked = ranked[: DATASET_FIELD_COUNTS["atis"]]

    if len(ranked) != DATASET_FIELD_COUNTS[dataset]:
        logger.warning(
            "%s schema has %d fields (expected %d for the reference corpus)",
            dataset,
            len(ranked),
            DATASET_FIELD_COUNTS[dataset],
        )

    return FieldSchema(dataset, tuple(ranked))


def _tokens_of(item) -> Sequence[str]:
    if isinstance(item, E2ERecord):
        return item.input_tokens
    if isinstance(item, BioSentence):
        return item.tokens
    return item


def build_vocab(records: Iterable, min_count: int = 1) -> Vocabulary:
    """入力トークンから語彙を作る。min_count未満のトークンは語彙に含めない（UNKになる）。
    並び順は出現回数の降順、同数は辞書順。
    """
    counts = Counter(token for item in records for token in _tokens_of(item) if token not in RESERVED_TOKENS)
    kept = sorted((token for token, count in counts.items() if count >= min_count), key=lambda t: (-counts[t], t))

    logger.debug("vocabulary: %d kept of %d distinct tokens", len(kept), len(counts))
    return Vocabulary(RESERVED_TOKENS + tuple(kept))


def field_statistics(records: Iterable[E2ERecord]) -> Counter:
    """フィールドごとの値が空でないレコード数。"""
    return Counter(name for record in records for name, value in record.targets.items() if value)


def write_records(records: Iterable[E2ERecord], path: str | os.PathLike, *, mkdir: bool = False) -> int:
    """E2Eレコードを1行1件のJSONで書き出す。"""
    path = Path(path).expanduser().resolve()

    if mkdir:
        path.parent.mkdir(parents=True, exist_ok=True)

    count = 0
    with path.open(mode="w", encoding="utf-8") as f:
        for record in records:
            print(json.dumps(record.to_dict(), ensure_ascii=False), file=f)
            count += 1

    return count


def parse_record(obj: Mapping, path: str | os.PathLike = "<record>", line_number: int = 0) -> E2ERecord:
    if not isinstance(obj, Mapping):
        raise RecordFormatError(path, line_number, "record must be an object")
    if obj.get("version", RECORD_FORMAT_VERSION) != RECORD_FORMAT_VERSION:
        raise RecordFormatError(path, line_number, f"unsupported record version {obj.get('version')!r}")

    tokens = obj.get("input")
    fields = obj.get("fields", {})
    if not isinstance(tokens, list) or not all(isinstance(token, str) for token in tokens):
        raise RecordFormatError(path, line_number, "'input' must be a list of strings")
    if not isinstance(fields, Mapping) or not all(isinstance(value, list) for value in fields.values()):
        raise RecordFormatError(path, line_number, "'fields' must map field names to lists of strings")

    return E2ERecord(tuple(tokens), {name: tuple(value) for name, value in fields.items()})


def read_records(path: str | os.PathLike) -> list[E2ERecord]:
    records = []

    for line_number, line in numbered_lines(path, RecordFormatError):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise RecordFormatError(path, line_number, f"invalid JSON: {e.msg}") from e
        records.append(parse_record(obj, path, line_number))

    return records


def schema_of(records: Sequence[E2ERecord], dataset: str = "unknown") -> FieldSchema:
    """レコードファイルのフィールド順からスキーマを復元する。"""
    if not records:
        raise ValueError("cannot infer a schema from an empty record file")
    return FieldSchema(dataset, tuple(records[0].targets))
