"""Parsing and validation of strict ``QUESTION_ID: SCORE`` replies."""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .instruments import LIKERT_MAX, LIKERT_MIN

_LINE = re.compile(r"^\s*([A-Za-z0-9_]+)\s*:\s*(\S+)\s*$")
_NUMBER = re.compile(r"^[-+]?\d+(?:\.\d+)?$")

HARD_ISSUES = frozenset({"Duplicate", "Range", "Missing"})


@dataclass(frozen=True)
class Issue:
    line: int  # 0 for issues not tied to a line (Missing)
    kind: str
    detail: str = ""

    @property
    def hard(self) -> bool:
        return self.kind in HARD_ISSUES


@dataclass
class ParseOutcome:
    scores: dict[str, int] = field(default_factory=dict)
    issues: list[Issue] = field(default_factory=list)

    @property
    def hard_issues(self) -> list[Issue]:
        return [i for i in self.issues if i.hard]

    @property
    def ok(self) -> bool:
        return not self.hard_issues


def parse_scores(reply: str, expected_ids: Sequence[str]) -> ParseOutcome:
    """Parse a reply against the ordered item ids of the prompt it answers.

    Ids match case-insensitively; a bare number ``k`` in ``1..len(expected_ids)``
    maps to the k-th prompt item. Blank lines are ignored and other lines are
    kept as soft issues. Conflicting duplicates, out-of-range or fractional
    scores and missing ids are hard issues that fail the parse.
    """
    if not expected_ids:
        raise ValueError("expected_ids must be non-empty")
    by_lower = {item_id.lower(): item_id for item_id in expected_ids}
    outcome = ParseOutcome()
    conflicted: set[str] = set()

    for lineno, raw in enumerate(reply.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        m = _LINE.match(line)
        if m is None:
            outcome.issues.append(Issue(lineno, "Unparsed", line[:80]))
            continue
        token, value_text = m.group(1), m.group(2)
        item_id = by_lower.get(token.lower())
        if item_id is None and token.isdigit() and 1 <= int(token) <= len(expected_ids):
            item_id = expected_ids[int(token) - 1]
        if item_id is None:
            outcome.issues.append(Issue(lineno, "UnknownId", token))
            continue
        if not _NUMBER.match(value_text):
            outcome.issues.append(Issue(lineno, "Range", f"{item_id}={value_text}"))
            conflicted.add(item_id)
            continue
        value = float(value_text)
        if not value.is_integer() or not LIKERT_MIN <= value <= LIKERT_MAX:
            outcome.issues.append(Issue(lineno, "Range", f"{item_id}={value_text}"))
            conflicted.add(item_id)
            continue
        score = int(value)
        if item_id in outcome.scores:
            if outcome.scores[item_id] != score:
                outcome.issues.append(Issue(lineno, "Duplicate", item_id))
                conflicted.add(item_id)
            else:
                outcome.issues.append(Issue(lineno, "Repeated", item_id))
            continue
        outcome.scores[item_id] = score

    for item_id in conflicted:
        outcome.scores.pop(item_id, None)
    missing = [i for i in expected_ids if i not in outcome.scores and i not in conflicted]
    if missing:
        outcome.issues.append(Issue(0, "Missing", ",".join(missing)))
    return outcome


def format_scores(scores: Mapping[str, int]) -> str:
    """Render a score map in canonical reply form, one ``ID: SCORE`` per line."""
    return "".join(f"{item_id}: {int(score)}\n" for item_id, score in scores.items())


def strictness_report(runset: Iterable) -> dict[str, dict]:
    """Per-backend format compliance for a collection of session records.

    Returns ``{backend: {"overall": rate, "steps": {kind: rate}, "sessions": n}}``;
    a step no session reached reports ``None`` (NA).
    """
    records = list(runset)
    if not records:
        raise ValueError("runset must be non-empty")
    sessions = defaultdict(int)
    parsed = defaultdict(int)
    step_total = defaultdict(lambda: defaultdict(int))
    step_ok = defaultdict(lambda: defaultdict(int))
    kinds_seen = defaultdict(list)
    for rec in records:
        sessions[rec.backend] += 1
        all_ok = bool(rec.steps) and all(s.ok for s in rec.steps) and rec.status == "complete"
        parsed[rec.backend] += all_ok
        for kind in rec.order:
            if kind not in kinds_seen[rec.backend]:
                kinds_seen[rec.backend].append(kind)
        for step in rec.steps:
            step_total[rec.backend][step.kind] += 1
            step_ok[rec.backend][step.kind] += step.ok

    report = {}
    for backend, n in sessions.items():
        steps = {}
        for kind in kinds_seen[backend]:
            total = step_total[backend][kind]
            steps[kind] = step_ok[backend][kind] / total if total else None
        report[backend] = {"overall": parsed[backend] / n, "steps": steps, "sessions": n}
    return report
