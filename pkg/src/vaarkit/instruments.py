"""Questionnaire catalog (Privacy / PSA / AoDS) and dimension-level aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

LIKERT_MIN = 1
LIKERT_MAX = 7

PRIVACY = "Privacy"
PSA = "PSA"
AODS = "AoDS"
KINDS = (PRIVACY, PSA, AODS)

DIMENSIONS = {
    PRIVACY: ("Control", "Awareness", "Collection"),
    PSA: ("PSA",),
    AODS: ("SacrificePrivacy", "PastAcceptance", "FutureWillingness"),
}
DIMENSION_KIND = {dim: kind for kind, dims in DIMENSIONS.items() for dim in dims}

# Observed-variable order used by the SEM and the dataset files.
OBSERVED_ORDER = (
    "Awareness",
    "Control",
    "Collection",
    "PSA",
    "SacrificePrivacy",
    "PastAcceptance",
    "FutureWillingness",
)

CATALOG_FIELDS = ("id", "dimension", "questionnaire", "text")


class CatalogError(ValueError):
    """Raised when an external catalog file cannot be loaded."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


class ScoreSetError(ValueError):
    """Raised when a score map does not match a questionnaire's item ids."""

    def __init__(self, message: str, item_id: str):
        super().__init__(f"{message}: {item_id}")
        self.item_id = item_id


def check_likert(value) -> int:
    """Return ``value`` as an int if it is an integral score in [1, 7]."""
    if isinstance(value, bool) or not float(value).is_integer():
        raise ValueError(f"Likert score must be integral, got {value!r}")
    v = int(value)
    if not LIKERT_MIN <= v <= LIKERT_MAX:
        raise ValueError(f"Likert score must be in [1, 7], got {value!r}")
    return v


@dataclass(frozen=True)
class Item:
    id: str
    text: str
    dimension: str


@dataclass(frozen=True)
class Questionnaire:
    kind: str
    dimensions: tuple[str, ...]
    items: tuple[Item, ...]

    @property
    def item_ids(self) -> tuple[str, ...]:
        return tuple(item.id for item in self.items)

    def dimension_items(self, dimension: str) -> tuple[Item, ...]:
        return tuple(item for item in self.items if item.dimension == dimension)


@dataclass(frozen=True)
class DimensionScores:
    """Per-dimension means of one questionnaire step, with the item scores kept."""

    kind: str
    means: dict[str, float]
    items: dict[str, int]

    @property
    def composite(self) -> float:
        # unweighted mean of dimension means, not of items
        return sum(self.means.values()) / len(self.means)


@dataclass(frozen=True)
class QuestionnaireCatalog:
    questionnaires: tuple[Questionnaire, ...]

    def __post_init__(self):
        seen = set()
        for item in self.items:
            if item.id in seen:
                raise CatalogError(f"duplicate item id {item.id!r}")
            seen.add(item.id)

    def __getitem__(self, kind: str) -> Questionnaire:
        for q in self.questionnaires:
            if q.kind == kind:
                return q
        raise KeyError(kind)

    @property
    def items(self) -> tuple[Item, ...]:
        return tuple(item for q in self.questionnaires for item in q.items)

    def item(self, item_id: str) -> Item:
        for item in self.items:
            if item.id == item_id:
                return item
        raise KeyError(item_id)

    def kind_of(self, item_id: str) -> str:
        return DIMENSION_KIND[self.item(item_id).dimension]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CATALOG_FIELDS)
        for q in self.questionnaires:
            for item in q.items:
                writer.writerow([item.id, item.dimension, q.kind, item.text])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


_BUILTIN = {
    "Control": [
        ("C1", "Consumer online privacy is really a matter of consumers' right to exercise control and autonomy over decisions about how their information is collected, used, and shared."),
        ("C2", "Consumer control of personal information lies at the heart of consumer privacy."),
        ("C3", "I believe that online privacy is invaded when control is lost or unwillingly reduced as a result of a marketing transaction."),
    ],
    "Awareness": [
        ("A1", "Companies seeking information online should disclose the way the data are collected, processed, and used."),
        ("A2", "A good consumer online privacy policy should have a clear and conspicuous disclosure."),
        ("A3", "It is very important to me that I am aware and knowledgeable about how my personal information will be used."),
    ],
    "Collection": [
        ("COL1", "It usually bothers me when online companies ask me for personal information."),
        ("COL2", "When online companies ask me for personal information, I sometimes think twice before providing it."),
        ("COL3", "It bothers me to give personal information to so many online companies."),
        ("COL4", "I'm concerned that online companies are collecting too much personal information about me."),
    ],
    "PSA": [
        ("PSA1", "I am pleased to help my friends/colleagues in their activities."),
        ("PSA2", "I share the things that I have with my friends."),
        ("PSA3", "I try to help others."),
        ("PSA4", "I am available for volunteer activities to help those who are in need."),
        ("PSA5", "I am empathic with those who are in need."),
        ("PSA6", "I help immediately those who are in need."),
        ("PSA7", "I do what I can to help others avoid getting into trouble."),
        ("PSA8", "I intensely feel what others feel."),
        ("PSA9", "I am willing to make my knowledge and abilities available to others."),
        ("PSA10", "I try to console those who are sad."),
        ("PSA11", "I easily lend money or other things."),
        ("PSA12", "I easily put myself in the shoes of those who are in discomfort."),
        ("PSA13", "I try to be close to and take care of those who are in need."),
        ("PSA14", "I easily share with friends any good opportunity that comes to me."),
        ("PSA15", "I spend time with those friends who feel lonely."),
        ("PSA16", "I immediately sense my friends’ discomfort even when it is not directly communicated to me."),
    ],
    "SacrificePrivacy": [
        ("SP1", "Governments have the right to limit people’s privacy and impose surveillance for the protection of public health."),
        ("SP2", "I am willing to sacrifice my privacy and accept surveillance for the sake of public health."),
    ],
    "PastAcceptance": [
        ("PA1", "I installed an app on my mobile phone that monitors information about my movements."),
        ("PA2", "I installed an app on my mobile phone that monitors information about my physical contacts."),
        ("PA3", "I wore a bracelet that monitors information about my movements."),
        ("PA4", "I wore a bracelet that monitors information about my physical contacts."),
        ("PA5", "I wore a bracelet that monitors information about my health."),
        ("PA6", "I allowed institutions to access my medical records."),
        ("PA7", "I allowed venues to measure my temperature before entry."),
    ],
    "FutureWillingness": [
        ("FW1", "I would install an app on my mobile phone that monitors information about my movements."),
        ("FW2", "I would install an app on my mobile phone that monitors information about my physical contacts."),
        ("FW3", "I would wear a bracelet that monitors information about my movements."),
        ("FW4", "I would wear a bracelet that monitors information about my physical contacts."),
        ("FW5", "I would wear a bracelet that monitors information about my health."),
        ("FW6", "I would allow institutions to access my medical records."),
        ("FW7", "I would allow venues to measure my temperature before entry."),
    ],
}


def _assemble(records: Iterable[tuple[str, str, str, str]]) -> QuestionnaireCatalog:
    by_kind: dict[str, list[Item]] = {kind: [] for kind in KINDS}
    for item_id, dimension, kind, text in records:
        by_kind[kind].append(Item(item_id, text, dimension))
    return QuestionnaireCatalog(
        tuple(Questionnaire(kind, DIMENSIONS[kind], tuple(by_kind[kind])) for kind in KINDS)
    )


def _builtin_records():
    for dimension, items in _BUILTIN.items():
        for item_id, text in items:
            yield item_id, dimension, DIMENSION_KIND[dimension], text


_DEFAULT_CATALOG = _assemble(_builtin_records())


def load_catalog(path: str | Path | None = None) -> QuestionnaireCatalog:
    """Return the built-in catalog, or parse an override file.

    The override is a CSV file with header ``id,dimension,questionnaire,text``,
    one record per item. A reverse-scoring column is rejected: no item in
    these instruments is reverse keyed.
    """
    if path is None:
        return _DEFAULT_CATALOG
    return parse_catalog(Path(path).read_text(encoding="utf-8"))


def parse_catalog(text: str) -> QuestionnaireCatalog:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CatalogError("empty catalog file", line=1) from None
    lowered = [h.lower() for h in header]
    for col in lowered:
        if col.startswith("reverse"):
            raise CatalogError("reverse-scored items are not supported", line=1, field=col)
    missing = [f for f in CATALOG_FIELDS if f not in lowered]
    if missing:
        raise CatalogError("missing column", line=1, field=missing[0])
    idx = {f: lowered.index(f) for f in CATALOG_FIELDS}

    records = []
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise CatalogError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        rec = {f: row[i].strip() for f, i in idx.items()}
        if not rec["id"]:
            raise CatalogError("empty item id", line=lineno, field="id")
        if rec["id"] in seen:
            raise CatalogError(f"duplicate item id {rec['id']!r}", line=lineno, field="id")
        if rec["questionnaire"] not in KINDS:
            raise CatalogError(f"unknown questionnaire {rec['questionnaire']!r}", line=lineno, field="questionnaire")
        if rec["dimension"] not in DIMENSIONS[rec["questionnaire"]]:
            raise CatalogError(f"unknown dimension {rec['dimension']!r}", line=lineno, field="dimension")
        if not rec["text"]:
            raise CatalogError("empty item text", line=lineno, field="text")
        seen.add(rec["id"])
        records.append((rec["id"], rec["dimension"], rec["questionnaire"], rec["text"]))

    catalog = _assemble(records)
    for q in catalog.questionnaires:
        for dim in q.dimensions:
            if not q.dimension_items(dim):
                raise CatalogError(f"dimension {dim!r} has no items", field="dimension")
    return catalog


def dimension_means(scores: Mapping[str, int], q: Questionnaire) -> DimensionScores:
    """Average item scores within each dimension of ``q``.

    ``scores`` must hold exactly the item ids of ``q``; a missing or extra id
    raises :class:`ScoreSetError`.
    """
    expected = set(q.item_ids)
    for item_id in scores:
        if item_id not in expected:
            raise ScoreSetError("unexpected item id", item_id)
    for item_id in q.item_ids:
        if item_id not in scores:
            raise ScoreSetError("missing item id", item_id)
    items = {item_id: check_likert(scores[item_id]) for item_id in q.item_ids}
    means = {}
    for dim in q.dimensions:
        vals = [items[item.id] for item in q.dimension_items(dim)]
        means[dim] = sum(vals) / len(vals)
    return DimensionScores(q.kind, means, items)
