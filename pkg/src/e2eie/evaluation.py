from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import BioSentence, chunk_spans
from .rng import BOOTSTRAP, derive_rng

logger = logging.getLogger(__name__)

DEFAULT_RESAMPLES = 10_000

FieldMap = Mapping[str, Sequence[str]]


class AlignmentError(ValueError):
    pass


def precision_recall_f1(true_positives: int, spurious: int, missing: int) -> tuple[float, float, float]:
    """分母が0の場合は0とする。"""
    guessed = true_positives + spurious
    expected = true_positives + missing
    precision = true_positives / guessed if guessed else 0.0
    recall = true_positives / expected if expected else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class FieldCounts:
    true_positives: int = 0
    spurious: int = 0
    missing: int = 0

    def __add__(self, other: FieldCounts) -> FieldCounts:
        return FieldCounts(
            self.true_positives + other.true_positives,
            self.spurious + other.spurious,
            self.missing + other.missing,
        )

    @property
    def precision(self) -> float:
        return precision_recall_f1(self.true_positives, self.spurious, self.missing)[0]

    @property
    def recall(self) -> float:
        return precision_recall_f1(self.true_positives, self.spurious, self.missing)[1]

    @property
    def f1(self) -> float:
        return precision_recall_f1(self.true_positives, self.spurious, self.missing)[2]

    def to_dict(self) -> dict:
        return {
            "true_positives": self.true_positives,
            "spurious": self.spurious,
            "missing": self.missing,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class EvalReport:
    """MUC-5の集計結果（フィールドごと、およびマイクロ平均）。"""

    fields: dict[str, FieldCounts] = field(default_factory=dict)
    records: int = 0

    @property
    def micro(self) -> FieldCounts:
        return sum(self.fields.values(), FieldCounts())

    def to_dict(self) -> dict:
        return {
            "records": self.records,
            "fields": {name: counts.to_dict() for name, counts in self.fields.items()},
            "micro": self.micro.to_dict(),
        }

    def to_text(self) -> str:
        width = max([len("micro")] + [len(name) for name in self.fields])
        lines = [f"{'field':<{width}}  {'TP':>6}  {'SPU':>6}  {'MIS':>6}  {'P':>6}  {'R':>6}  {'F1':>6}"]

        rows = list(self.fields.items()) + [("micro", self.micro)]
        for name, c in rows:
            lines.append(
                f"{name:<{width}}  {c.true_positives:>6}  {c.spurious:>6}  {c.missing:>6}"
                f"  {c.precision:6.4f}  {c.recall:6.4f}  {c.f1:6.4f}"
            )

        lines.append(f"records: {self.records}")
        return "\n".join(lines)


def score_field(prediction: Sequence[str], gold: Sequence[str]) -> FieldCounts:
    """部分一致なしのMUC-5判定。空と空の組は何も数えない。"""
    prediction, gold = tuple(prediction), tuple(gold)

    if gold:
        if prediction == gold:
            return FieldCounts(true_positives=1)
        return FieldCounts(spurious=1 if prediction else 0, missing=1)
    return FieldCounts(spurious=1 if prediction else 0)


def _check_schema(prediction: FieldMap, gold: FieldMap, index: int) -> None:
    if set(prediction) != set(gold):
        raise AlignmentError(f"record {index}: fields {sorted(prediction)} do not match gold fields {sorted(gold)}")


def muc5_score(predictions: Sequence[FieldMap], gold: Sequence[FieldMap]) -> EvalReport:
    if len(predictions) != len(gold):
        raise AlignmentError(f"{len(predictions)} predictions for {len(gold)} gold records")

    report = EvalReport(records=len(gold))
    if gold:
        report.fields = {name: FieldCounts() for name in gold[0]}

    for index, (prediction, expected) in enumerate(zip(predictions, gold)):
        _check_schema(prediction, expected, index)
        for name, value in expected.items():
            report.fields[name] = report.fields.get(name, FieldCounts()) + score_field(prediction[name], value)

    return report


def _record_counts(predictions: Sequence[FieldMap], gold: Sequence[FieldMap]) -> np.ndarray:
    """レコードごとの（TP, spurious, missing）を全フィールドで合計した配列 [N×3]。"""
    counts = np.zeros((len(gold), 3), dtype=np.int64)
    for index, (prediction, expected) in enumerate(zip(predictions, gold)):
        _check_schema(prediction, expected, index)
        total = sum((score_field(prediction[name], value) for name, value in expected.items()), FieldCounts())
        counts[index] = (total.true_positives, total.spurious, total.missing)
    return counts


def _micro_f1(counts: np.ndarray) -> float:
    return precision_recall_f1(*(int(value) for value in counts))[2]


@dataclass
class ChunkScore:
    """conlleval相当のチャンク単位の評価。"""

    precision: float
    recall: float
    f1: float
    correct_chunks: int
    guessed_chunks: int
    gold_chunks: int
    token_accuracy: float


def _labels_of(item) -> Sequence[str]:
    return item.labels if isinstance(item, BioSentence) else item


def chunk_f1(predicted: Sequence, gold: Sequence) -> ChunkScore:
    """境界と種類が完全に一致したチャンクのみ正解とするF1。"""
    if len(predicted) != len(gold):
        raise AlignmentError(f"{len(predicted)} predicted sentences for {len(gold)} gold sentences")

    correct = guessed = expected = 0
    correct_tokens = tokens = 0

    for index, (prediction, reference) in enumerate(zip(predicted, gold)):
        prediction, reference = _labels_of(prediction), _labels_of(reference)
        if len(prediction) != len(reference):
            raise AlignmentError(f"sentence {index}: {len(prediction)} predicted labels for {len(reference)} tokens")

        guessed_spans = set(chunk_spans(prediction))
        gold_spans = set(chunk_spans(reference))

        correct += len(guessed_spans & gold_spans)
        guessed += len(guessed_spans)
        expected += len(gold_spans)
        correct_tokens += sum(p == r for p, r in zip(prediction, reference))
        tokens += len(reference)

    precision, recall, f1 = precision_recall_f1(correct, guessed - correct, expected - correct)
    return ChunkScore(precision, recall, f1, correct, guessed, expected, correct_tokens / tokens if tokens else 0.0)


@dataclass
class SignificanceResult:
    resamples: int
    p: float
    better: str
    f1_a: float
    f1_b: float

    def to_dict(self) -> dict:
        return {"resamples": self.resamples, "p": self.p, "better": self.better, "f1_a": self.f1_a, "f1_b": self.f1_b}


def _paired_counts(pred_a, pred_b, gold) -> tuple[np.ndarray, np.ndarray]:
    if not gold:
        raise AlignmentError("significance test requires a non-empty test set")
    if not len(pred_a) == len(pred_b) == len(gold):
        raise AlignmentError(f"misaligned inputs: {len(pred_a)}, {len(pred_b)} and {len(gold)} records")
    return _record_counts(pred_a, gold), _record_counts(pred_b, gold)


def bootstrap_significance(
    pred_a: Sequence[FieldMap],
    pred_b: Sequence[FieldMap],
    gold: Sequence[FieldMap],
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 42,
) -> SignificanceResult:
    """対応のあるブートストラップ検定。

    テストセット全体でマイクロF1の高い方（同点ならA）を「良い方」とし、
    復元抽出した同じ添字集合で両者を評価して、良い方が厳密に下回る割合をpとする。
    """
    if resamples < 1:
        raise ValueError(f"resamples must be positive: {resamples}")

    counts_a, counts_b = _paired_counts(pred_a, pred_b, gold)
    f1_a, f1_b = _micro_f1(counts_a.sum(axis=0)), _micro_f1(counts_b.sum(axis=0))
    better, worse = (counts_a, counts_b) if f1_a >= f1_b else (counts_b, counts_a)

    rng = derive_rng(seed, BOOTSTRAP)
    size = len(gold)
    losses = 0
    for _ in range(resamples):
        sample = rng.integers(0, size, size=size)
        if _micro_f1(better[sample].sum(axis=0)) < _micro_f1(worse[sample].sum(axis=0)):
            losses += 1

    result = SignificanceResult(resamples, losses / resamples, "A" if f1_a >= f1_b else "B", f1_a, f1_b)
    logger.info("bootstrap: better=%s p=%.4f (%d resamples)", result.better, result.p, resamples)
    return result


def exhaustive_significance(
    pred_a: Sequence[FieldMap], pred_b: Sequence[FieldMap], gold: Sequence[FieldMap]
) -> SignificanceResult:
    """全ての添字多重集合を多項係数で重み付けして列挙した、ブートストラップの厳密なp。
    n^n通りの抽出に相当するので、ごく小さなテストセットにのみ使う。
    """
    counts_a, counts_b = _paired_counts(pred_a, pred_b, gold)
    f1_a, f1_b = _micro_f1(counts_a.sum(axis=0)), _micro_f1(counts_b.sum(axis=0))
    better, worse = (counts_a, counts_b) if f1_a >= f1_b else (counts_b, counts_a)

    size = len(gold)
    total = size**size
    losing_weight = 0
    for multiset in itertools.combinations_with_replacement(range(size), size):
        sample = list(multiset)
        if _micro_f1(better[sample].sum(axis=0)) < _micro_f1(worse[sample].sum(axis=0)):
            multiplicity = Counter(multiset).values()
            losing_weight += math.factorial(size) // math.prod(math.factorial(m) for m in multiplicity)

    return SignificanceResult(total, losing_weight / total, "A" if f1_a >= f1_b else "B", f1_a, f1_b)
