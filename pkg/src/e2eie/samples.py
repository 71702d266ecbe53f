"""動作確認・テスト用の小さなデータ。

実データ（ATIS、MITコーパス）はこのパッケージには含めない。
"""

from __future__ import annotations

import logging

import numpy as np

from .corpus import BioSentence, FieldSchema

logger = logging.getLogger(__name__)

RESTAURANT_SAMPLE = BioSentence(
    ("2", "start", "restaurants", "with", "inside", "dining"),
    ("B-Rating", "I-Rating", "O", "O", "B-Amenity", "I-Amenity"),
)

MOVIE_SAMPLE = BioSentence(
    ("show", "me", "films", "elvis", "films", "set", "in", "hawaii"),
    ("O", "O", "O", "B-ACTOR", "O", "B-PLOT", "I-PLOT", "I-PLOT"),
)

ATIS_SAMPLE = BioSentence(
    ("cheapest", "airfare", "from", "tacoma", "to", "st.", "louis", "and", "detroit"),
    ("B-cost_relative", "O", "O", "B-fromloc", "O", "B-toloc", "I-toloc", "O", "B-toloc"),
)

ATIS_SCHEMA = FieldSchema(
    "atis",
    (
        "fromloc",
        "toloc",
        "airline_name",
        "cost_relative",
        "period_of_day",
        "time",
        "time_relative",
        "day_name",
        "day_number",
        "month_name",
    ),
)

SYNTHETIC_FIELDS = ("fromloc", "toloc", "day_name", "airline_name")

_CITIES = (("boston",), ("denver",), ("tacoma",), ("detroit",), ("st.", "louis"), ("new", "york"), ("dallas",))
_DAYS = (("monday",), ("tuesday",), ("friday",), ("sunday",))
_AIRLINES = (("delta",), ("united",), ("american", "airlines"))


def _chunk(words: tuple[str, ...], name: str) -> list[tuple[str, str]]:
    return [(word, ("B-" if position == 0 else "I-") + name) for position, word in enumerate(words)]


def _pick(rng: np.random.Generator, choices: tuple, exclude: tuple | None = None) -> tuple[str, ...]:
    candidates = [choice for choice in choices if choice != exclude]
    return candidates[int(rng.integers(len(candidates)))]


def synthetic_sentence(rng: np.random.Generator) -> BioSentence:
    """航空券の問い合わせ風の文を1つ作る。toloc は2つになることがある。"""
    pairs: list[tuple[str, str]] = [("show", "O"), ("me", "O")]

    if rng.random() < 0.5:
        pairs += _chunk(_pick(rng, _AIRLINES), "airline_name")
    pairs.append(("flights", "O"))

    origin = _pick(rng, _CITIES)
    destination = _pick(rng, _CITIES, exclude=origin)
    pairs += [("from", "O")] + _chunk(origin, "fromloc")
    pairs += [("to", "O")] + _chunk(destination, "toloc")

    if rng.random() < 0.3:
        pairs += [("and", "O")] + _chunk(_pick(rng, _CITIES, exclude=destination), "toloc")
    if rng.random() < 0.5:
        pairs += [("on", "O")] + _chunk(_pick(rng, _DAYS), "day_name")

    tokens, labels = zip(*pairs)
    return BioSentence(tokens, labels)


def synthetic_corpus(size: int, rng: np.random.Generator) -> list[BioSentence]:
    if size < 0:
        raise ValueError(f"size must be non-negative: {size}")
    return [synthetic_sentence(rng) for _ in range(size)]


def synthetic_schema() -> FieldSchema:
    return FieldSchema("synthetic", SYNTHETIC_FIELDS)
