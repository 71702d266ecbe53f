from __future__ import annotations

import numpy as np
import pytest

from e2eie.evaluation import (
    AlignmentError,
    EvalReport,
    FieldCounts,
    bootstrap_significance,
    chunk_f1,
    exhaustive_significance,
    muc5_score,
    precision_recall_f1,
    score_field,
)
from e2eie.samples import ATIS_SAMPLE

# (予測, 正解, (TP, spurious, missing))
MUC5_CASES = [
    ((), (), (0, 0, 0)),
    (("a",), ("a",), (1, 0, 0)),
    (("a", "b"), ("a", "b"), (1, 0, 0)),
    (("a",), (), (0, 1, 0)),
    ((), ("a",), (0, 0, 1)),
    (("a",), ("b",), (0, 1, 1)),
    (("a",), ("a", "b"), (0, 1, 1)),
    (("a", "b"), ("a",), (0, 1, 1)),
    (("b", "a"), ("a", "b"), (0, 1, 1)),
    (("a", ",", "b"), ("a", ",", "b"), (1, 0, 0)),
    (("a", ",", "b"), ("b", ",", "a"), (0, 1, 1)),
    (("a",), ("a", ",", "b"), (0, 1, 1)),
    ((",",), (), (0, 1, 0)),
    (("st.", "louis"), ("st.", "louis"), (1, 0, 0)),
    (("st.",), ("st.", "louis"), (0, 1, 1)),
    (("louis",), ("st.", "louis"), (0, 1, 1)),
    (("A",), ("a",), (0, 1, 1)),
    (("a", "a"), ("a",), (0, 1, 1)),
    ((), ("a", ",", "b"), (0, 0, 1)),
    (("x", "y", "z"), (), (0, 1, 0)),
]


@pytest.mark.parametrize("prediction, gold, expected", MUC5_CASES)
def test_score_field(prediction, gold, expected):
    counts = score_field(prediction, gold)
    assert (counts.true_positives, counts.spurious, counts.missing) == expected


def test_muc5_table_pooled():
    predictions = [{"f": prediction} for prediction, _, _ in MUC5_CASES]
    gold = [{"f": value} for _, value, _ in MUC5_CASES]
    micro = muc5_score(predictions, gold).micro

    expected = np.sum([counts for _, _, counts in MUC5_CASES], axis=0)
    assert (micro.true_positives, micro.spurious, micro.missing) == tuple(expected)


def test_precision_recall_f1():
    assert precision_recall_f1(0, 0, 0) == (0.0, 0.0, 0.0)
    p, r, f = precision_recall_f1(3, 1, 2)
    assert (p, r) == (0.75, 0.6)
    assert f == pytest.approx(2 * 0.75 * 0.6 / 1.35)


class TestMuc5Score:
    def test_gold_against_gold(self):
        gold = [{"fromloc": ("tacoma",), "toloc": ("st.", "louis", ",", "detroit"), "time": ()}]
        report = muc5_score(gold, gold)
        assert report.micro.f1 == 1.0
        assert report.fields["time"] == FieldCounts()
        assert report.records == 1

    def test_per_field(self):
        gold = [{"a": ("x",), "b": ("y",)}, {"a": ("z",), "b": ()}]
        prediction = [{"a": ("x",), "b": ()}, {"a": ("q",), "b": ("y",)}]
        report = muc5_score(prediction, gold)
        assert report.fields["a"] == FieldCounts(1, 1, 1)
        assert report.fields["b"] == FieldCounts(0, 1, 1)
        assert report.micro == FieldCounts(1, 2, 2)

    def test_misaligned(self):
        with pytest.raises(AlignmentError):
            muc5_score([{"a": ()}], [])
        with pytest.raises(AlignmentError):
            muc5_score([{"a": ()}], [{"b": ()}])

    def test_empty(self):
        report = muc5_score([], [])
        assert report.micro.f1 == 0.0
        assert report.records == 0

    def test_report_output(self):
        report = muc5_score([{"a": ("x",)}], [{"a": ("x",)}])
        text = report.to_text()
        assert text.splitlines()[0].split() == ["field", "TP", "SPU", "MIS", "P", "R", "F1"]
        assert text.splitlines()[-2].split()[0] == "micro"
        assert text.splitlines()[-1] == "records: 1"

        obj = report.to_dict()
        assert obj["micro"]["f1"] == 1.0
        assert obj["fields"]["a"]["true_positives"] == 1
        assert isinstance(report, EvalReport)


def _conlleval_counts(predicted, gold):
    """conllevalの判定（B/I/Oのみ）をそのまま移植したもの。文の間は境界（O）を挟む。"""

    def split(label):
        return (label[0], label[2:]) if label != "O" else ("O", "")

    def end_of_chunk(prev, tag, prev_type, type_):
        return (
            (prev in "BI" and tag in "BO")
            or (prev != "O" and prev_type != type_)
        )

    def start_of_chunk(prev, tag, prev_type, type_):
        return tag == "B" or (prev == "O" and tag == "I") or (tag != "O" and prev_type != type_)

    correct = found_correct = found_guessed = 0
    in_correct = False
    last_c, last_ct, last_g, last_gt = "O", "", "O", ""

    pairs = []
    for p_sentence, g_sentence in zip(predicted, gold):
        pairs.extend(zip(p_sentence, g_sentence))
        pairs.append(("O", "O"))

    for p_label, g_label in pairs:
        g, gt = split(g_label)
        p, pt = split(p_label)

        end_c = end_of_chunk(last_c, g, last_ct, gt)
        end_g = end_of_chunk(last_g, p, last_gt, pt)
        start_c = start_of_chunk(last_c, g, last_ct, gt)
        start_g = start_of_chunk(last_g, p, last_gt, pt)

        if in_correct:
            if end_c and end_g and last_gt == last_ct:
                in_correct = False
                correct += 1
            elif end_c != end_g or pt != gt:
                in_correct = False

        if start_c and start_g and pt == gt:
            in_correct = True
        found_correct += start_c
        found_guessed += start_g

        last_c, last_ct, last_g, last_gt = g, gt, p, pt

    return correct, found_guessed, found_correct


def _random_labels(rng: np.random.Generator, length: int) -> list[str]:
    choices = ["O", "B-a", "I-a", "B-b", "I-b"]
    return [choices[int(rng.integers(len(choices)))] for _ in range(length)]


class TestChunkF1:
    def test_matches_conlleval(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            lengths = rng.integers(1, 10, size=int(rng.integers(1, 5)))
            gold = [_random_labels(rng, n) for n in lengths]
            predicted = [_random_labels(rng, n) for n in lengths]

            score = chunk_f1(predicted, gold)
            correct, guessed, expected = _conlleval_counts(predicted, gold)
            assert (score.correct_chunks, score.guessed_chunks, score.gold_chunks) == (correct, guessed, expected)
            f1 = precision_recall_f1(correct, guessed - correct, expected - correct)[2]
            assert round(score.f1, 4) == round(f1, 4)

    def test_perfect(self):
        score = chunk_f1([ATIS_SAMPLE.labels], [ATIS_SAMPLE])
        assert score.f1 == 1.0
        assert score.token_accuracy == 1.0

    def test_boundary_error(self):
        score = chunk_f1([["B-a", "O", "O"]], [["B-a", "I-a", "O"]])
        assert score.correct_chunks == 0
        assert score.f1 == 0.0
        assert score.token_accuracy == pytest.approx(2 / 3)

    def test_misaligned(self):
        with pytest.raises(AlignmentError):
            chunk_f1([["O"]], [["O", "O"]])
        with pytest.raises(AlignmentError):
            chunk_f1([["O"]], [])


TOY_GOLD = [{"f": ("a",)}, {"f": ("b",)}, {"f": ("c",)}, {"f": ("d",)}, {"f": ("e",)}]
TOY_A = [{"f": ("a",)}, {"f": ("b",)}, {"f": ("c",)}, {"f": ()}, {"f": ("x",)}]
TOY_B = [{"f": ("a",)}, {"f": ("y",)}, {"f": ()}, {"f": ("d",)}, {"f": ()}]


class TestSignificance:
    def test_identical_systems(self):
        result = bootstrap_significance(TOY_GOLD, TOY_GOLD, TOY_GOLD, resamples=100)
        # 同点はAを良い方とし、厳密に下回ることはない
        assert result.better == "A"
        assert result.p == 0.0

    def test_better_is_decided_on_the_full_set(self):
        result = bootstrap_significance(TOY_B, TOY_A, TOY_GOLD, resamples=200)
        assert result.better == "B"
        assert result.f1_b > result.f1_a

    def test_deterministic(self):
        a = bootstrap_significance(TOY_A, TOY_B, TOY_GOLD, resamples=500, seed=3)
        b = bootstrap_significance(TOY_A, TOY_B, TOY_GOLD, resamples=500, seed=3)
        assert a == b

    def test_matches_exhaustive_enumeration(self):
        exact = exhaustive_significance(TOY_A, TOY_B, TOY_GOLD)
        sampled = bootstrap_significance(TOY_A, TOY_B, TOY_GOLD, resamples=20_000, seed=7)

        assert exact.resamples == 5**5
        assert 0.0 < exact.p < 1.0
        assert sampled.better == exact.better
        assert sampled.p == pytest.approx(exact.p, abs=0.015)

    def test_p_does_not_increase_as_a_improves(self):
        # Aの誤りを1件ずつ正解に置き換える（常にAが良い方）
        steps = [
            [{"f": ("a",)}, {"f": ("b",)}, {"f": ()}, {"f": ()}, {"f": ("x",)}],
            TOY_A,
            [{"f": ("a",)}, {"f": ("b",)}, {"f": ("c",)}, {"f": ("d",)}, {"f": ("x",)}],
            TOY_GOLD,
        ]
        exact = [exhaustive_significance(a, TOY_B, TOY_GOLD) for a in steps]
        sampled = [bootstrap_significance(a, TOY_B, TOY_GOLD, resamples=2000, seed=5) for a in steps]

        assert all(result.better == "A" for result in exact + sampled)
        for results in (exact, sampled):
            p = [result.p for result in results]
            assert p == sorted(p, reverse=True)
            assert p[0] > p[-1] == 0.0

    def test_misaligned(self):
        with pytest.raises(AlignmentError):
            bootstrap_significance(TOY_A, TOY_B[:4], TOY_GOLD)
        with pytest.raises(AlignmentError):
            bootstrap_significance([], [], [])

    def test_invalid_resamples(self):
        with pytest.raises(ValueError):
            bootstrap_significance(TOY_A, TOY_B, TOY_GOLD, resamples=0)

    def test_to_dict(self):
        result = bootstrap_significance(TOY_A, TOY_B, TOY_GOLD, resamples=10)
        assert set(result.to_dict()) == {"resamples", "p", "better", "f1_a", "f1_b"}
