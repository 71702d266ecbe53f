from __future__ import annotations

import logging
import traceback
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .corpus import (
    BioSentence,
    E2ERecord,
    build_vocab,
    chunk_bio,
    chunk_spans,
    labels_from_chunks,
    prepare_input,
    to_e2e,
)
from .evaluation import bootstrap_significance, exhaustive_significance, muc5_score
from .pointer import PointerModel, PointerModelConfig, output_distribution
from .rng import INIT, derive_rng
from .samples import ATIS_SAMPLE, ATIS_SCHEMA, MOVIE_SAMPLE, RESTAURANT_SAMPLE, synthetic_corpus
from .tagger import Tagger, TaggerConfig
from .tensor import Tensor, default_dtype, gradient_check, softmax

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-3
PROBABILITY_TOLERANCE = 1e-6


class CheckFailure(AssertionError):
    pass


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


_CHECKS: dict[str, Callable[[np.random.Generator], str]] = {}


def check(name: str):
    """セルフチェックとして登録する。関数は成功時に短い説明を返し、失敗時はCheckFailureを送出する。"""

    def decorator(func: Callable[[np.random.Generator], str]):
        _CHECKS[name] = func
        return func

    return decorator


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise CheckFailure(message)


def _toy_record() -> E2ERecord:
    return E2ERecord(prepare_input(("from", "boston", "to")), {"fromloc": ("boston",), "toloc": ()})


def _worst(errors: dict[str, float]) -> tuple[str, float]:
    name = max(errors, key=errors.get)
    return name, errors[name]


@check("gradient.pointer")
def _check_pointer_gradient(rng: np.random.Generator) -> str:
    record = _toy_record()
    with default_dtype(np.float64):
        config = PointerModelConfig(("fromloc", "toloc"), embed_dim=3, encoder_hidden=3, decoder_hidden=3, attn_dim=3)
        model = PointerModel.initialize(config, build_vocab([record]), rng)
        errors = gradient_check(lambda: model.loss(record, False, None), model.named_parameters())

    name, worst = _worst(errors)
    _expect(worst < GRADIENT_TOLERANCE, f"{name}: relative error {worst:.2e}")
    return f"{len(errors)} tensors, max relative error {worst:.2e}"


@check("gradient.pointer-summarizer")
def _check_summarizer_gradient(rng: np.random.Generator) -> str:
    record = _toy_record()
    with default_dtype(np.float64):
        config = PointerModelConfig(
            ("fromloc", "toloc"), embed_dim=2, encoder_hidden=2, decoder_hidden=2, attn_dim=2, use_summarizer=True
        )
        model = PointerModel.initialize(config, build_vocab([record]), rng)
        errors = gradient_check(lambda: model.loss(record, False, None), model.named_parameters())

    name, worst = _worst(errors)
    _expect(worst < GRADIENT_TOLERANCE, f"{name}: relative error {worst:.2e}")
    return f"{len(errors)} tensors, max relative error {worst:.2e}"


@check("gradient.tagger")
def _check_tagger_gradient(rng: np.random.Generator) -> str:
    sentence = BioSentence(("from", "boston", "to"), ("O", "B-fromloc", "O"))
    with default_dtype(np.float64):
        config = TaggerConfig(("B-fromloc", "O"), embed_dim=3, hidden=3, layer2_hidden=3)
        tagger = Tagger.initialize(config, build_vocab([sentence]), rng)
        errors = gradient_check(lambda: tagger.tagger_loss(sentence), tagger.named_parameters())

    name, worst = _worst(errors)
    _expect(worst < GRADIENT_TOLERANCE, f"{name}: relative error {worst:.2e}")
    return f"{len(errors)} tensors, max relative error {worst:.2e}"


@check("softmax.masked")
def _check_softmax(rng: np.random.Generator) -> str:
    for _ in range(200):
        n = int(rng.integers(1, 12))
        masked = rng.random(n) < 0.3
        masked[int(rng.integers(n))] = False
        probabilities = softmax(Tensor(rng.normal(scale=10.0, size=n)), ~masked).data

        _expect(abs(probabilities.sum() - 1.0) < PROBABILITY_TOLERANCE, f"sum {probabilities.sum()}")
        _expect(np.all(probabilities[masked] == 0.0), "mass on masked position")
    return "200 random vectors"


@check("pointer.distribution")
def _check_output_distribution(rng: np.random.Generator) -> str:
    for _ in range(200):
        n, vocab_size = int(rng.integers(1, 10)), int(rng.integers(5, 15))
        indices = rng.integers(0, vocab_size, size=n).tolist()
        attention = softmax(Tensor(rng.normal(size=n)))
        distribution = output_distribution(attention, indices, vocab_size).data

        _expect(abs(distribution.sum() - 1.0) < PROBABILITY_TOLERANCE, f"sum {distribution.sum()}")
        absent = sorted(set(range(vocab_size)) - set(indices))
        _expect(np.all(distribution[absent] == 0.0), "mass on a word type absent from the input")
    return "200 random attentions"


@check("muc5.oracle")
def _check_muc5(rng: np.random.Generator) -> str:
    gold = [{"a": ("x",), "b": (), "c": ("y", "z")}]
    prediction = [{"a": ("x",), "b": ("q",), "c": ("y",)}]
    micro = muc5_score(prediction, gold).micro

    _expect(
        (micro.true_positives, micro.spurious, micro.missing) == (1, 2, 1),
        f"counts {(micro.true_positives, micro.spurious, micro.missing)}",
    )
    _expect(muc5_score(gold, gold).micro.f1 == 1.0, "gold against itself is not 1.0")
    return "hand-counted record"


@check("corpus.samples")
def _check_samples(rng: np.random.Generator) -> str:
    _expect(
        chunk_bio(RESTAURANT_SAMPLE) == [("Rating", ("2", "start")), ("Amenity", ("inside", "dining"))],
        "restaurant sample chunks",
    )
    _expect(
        chunk_bio(MOVIE_SAMPLE) == [("ACTOR", ("elvis",)), ("PLOT", ("set", "in", "hawaii"))],
        "movie sample chunks",
    )

    (record,) = to_e2e([ATIS_SAMPLE], ATIS_SCHEMA)
    _expect(record.targets["fromloc"] == ("tacoma",), f"fromloc {record.targets['fromloc']}")
    _expect(record.targets["toloc"] == ("st.", "louis", ",", "detroit"), f"toloc {record.targets['toloc']}")
    _expect(record.targets["cost_relative"] == ("cheapest",), f"cost_relative {record.targets['cost_relative']}")
    return "restaurant, movie and ATIS samples"


@check("corpus.roundtrip")
def _check_roundtrip(rng: np.random.Generator) -> str:
    for sentence in synthetic_corpus(200, rng):
        spans = chunk_spans(sentence.labels)
        _expect(tuple(labels_from_chunks(len(sentence), spans)) == sentence.labels, f"round trip of {sentence}")
    return "200 synthetic sentences"


@check("bootstrap.exhaustive")
def _check_bootstrap(rng: np.random.Generator) -> str:
    gold = [{"f": ("a",)}, {"f": ("b",)}, {"f": ("c",)}, {"f": ("d",)}, {"f": ("e",)}]
    pred_a = [{"f": ("a",)}, {"f": ("b",)}, {"f": ("c",)}, {"f": ()}, {"f": ("x",)}]
    pred_b = [{"f": ("a",)}, {"f": ("y",)}, {"f": ()}, {"f": ("d",)}, {"f": ()}]

    exact = exhaustive_significance(pred_a, pred_b, gold)
    sampled = bootstrap_significance(pred_a, pred_b, gold, resamples=5000, seed=int(rng.integers(2**31)))

    _expect(exact.better == sampled.better, f"better {exact.better} != {sampled.better}")
    _expect(abs(exact.p - sampled.p) < 0.03, f"bootstrap p {sampled.p:.4f} vs exact {exact.p:.4f}")
    return f"exact p {exact.p:.4f}, bootstrap p {sampled.p:.4f}"


def check_names() -> list[str]:
    return list(_CHECKS)


def run_selfcheck(seed: int = 42, names: list[str] | None = None) -> list[CheckResult]:
    """登録済みのチェックを順に実行する。例外は失敗として記録し、残りのチェックは続行する。"""
    results = []

    for name in names if names is not None else check_names():
        try:
            detail = _CHECKS[name](derive_rng(seed, INIT))
            results.append(CheckResult(name, True, detail))
        except CheckFailure as e:
            results.append(CheckResult(name, False, str(e)))
        except Exception as e:
            logger.debug("selfcheck %s raised\n%s", name, traceback.format_exc())
            results.append(CheckResult(name, False, f"{type(e).__name__}: {e}"))

        logger.info("selfcheck %s: %s", name, "ok" if results[-1].passed else "FAILED")

    return results
