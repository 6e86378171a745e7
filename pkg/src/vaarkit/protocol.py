"""Prompt construction, context-carrying sessions and campaign orchestration."""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping, Sequence

from .instruments import (
    AODS,
    KINDS,
    OBSERVED_ORDER,
    PRIVACY,
    PSA,
    DimensionScores,
    Questionnaire,
    QuestionnaireCatalog,
    dimension_means,
    load_catalog,
)
from .parser import parse_scores

SCHEMA_VERSION = 1

FRAMING = (
    "You are participating in a research study about human behavior and attitudes. "
    "As a participant, please respond to the following statements based on how you "
    "would typically behave or think."
)
SCALE_BLOCK = "\n".join([
    "RESPONSE SCALE (1-7):",
    "1 = Strongly Disagree / Never true for me",
    "2 = Disagree / Rarely true for me",
    "3 = Slightly Disagree / Occasionally true for me",
    "4 = Neutral / Sometimes true for me",
    "5 = Slightly Agree / Often true for me",
    "6 = Agree / Usually true for me",
    "7 = Strongly Agree / Always true for me",
])
FORMAT_BLOCK = "\n".join([
    "RESPONSE FORMAT REQUIREMENTS:",
    "- For each statement, provide ONLY the question number followed by your rating",
    "- Use this exact format: [NUMBER]: [RATING]",
    '- Example: "1: 5" or "2: 3" or "3: 7"',
    "- Provide one response per line",
    "- Do not include any explanations, reasoning, or additional text",
    "- Ensure all ratings are integers between 1 and 7.",
])
VARIANTS = {
    "baseline": None,
    "weak_consistency": "Treat each statement independently and do not assume consistency across different statements.",
    "strong_consistency": "Try to answer in a way that is internally consistent across all statements.",
}
MODES = ("contextual", "stateless")
MAIN_ORDER = (PRIVACY, PSA, AODS)
_ABBREV = {PRIVACY: "P", PSA: "PSA", AODS: "A"}


def order_variants() -> list[tuple[str, str, str]]:
    """The main order followed by the three alternative evaluation orders."""
    return [
        (PRIVACY, PSA, AODS),
        (PSA, PRIVACY, AODS),
        (AODS, PRIVACY, PSA),
        (AODS, PSA, PRIVACY),
    ]


def order_label(order: Sequence[str]) -> str:
    return "->".join(_ABBREV[k] for k in order)


def parse_order(text: str | Sequence[str]) -> tuple[str, ...]:
    """Accept a kind sequence or a label such as ``"A->P->PSA"``."""
    if not isinstance(text, str):
        return tuple(text)
    back = {v: k for k, v in _ABBREV.items()}
    parts = [p.strip() for p in text.replace("→", "->").split("->")]
    return tuple(back.get(p, p) for p in parts)


@dataclass(frozen=True)
class ProtocolConfig:
    order: tuple[str, ...] = MAIN_ORDER
    temperature: float = 0.7
    n_runs: int = 100
    history_depth: int = 3
    mode: str = "contextual"
    variant: str = "baseline"
    retries: int = 2
    parallelism: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "order", parse_order(self.order))
        if sorted(self.order) != sorted(KINDS):
            raise ValueError(f"order must be a permutation of {KINDS}, got {self.order}")
        if not self.temperature >= 0:
            raise ValueError("temperature must be >= 0")
        if int(self.n_runs) < 1:
            raise ValueError("n_runs must be positive")
        if int(self.history_depth) < 0:
            raise ValueError("history_depth must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {tuple(VARIANTS)}")
        if int(self.retries) < 0 or int(self.parallelism) < 1:
            raise ValueError("retries must be >= 0 and parallelism >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["order"] = list(self.order)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ProtocolConfig":
        return cls(**d)


@dataclass
class SessionState:
    run_id: int = 0
    seed: int = 0
    completed_steps: list[tuple[str, DimensionScores]] = field(default_factory=list)

    def completed_kinds(self) -> list[str]:
        return [k for k, _ in self.completed_steps]


def history_block(state: SessionState, depth: int) -> str:
    if depth <= 0 or not state.completed_steps:
        return ""
    lines = ["Previous conversation:"]
    for kind, ds in state.completed_steps[-depth:]:
        lines.append(f"{kind}: " + ", ".join(f"{dim}={mean:.2f}" for dim, mean in ds.means.items()))
    return "\n".join(lines)


def build_prompt(state: SessionState, q: Questionnaire, config: ProtocolConfig | None = None) -> str:
    """Full single-turn prompt for questionnaire ``q`` given the session so far."""
    config = config or ProtocolConfig()
    if q.kind in state.completed_kinds():
        raise ValueError(f"{q.kind} was already completed in this session")
    fmt = FORMAT_BLOCK
    extra = VARIANTS[config.variant]
    if extra:
        fmt += "\n" + extra
    blocks = [FRAMING, SCALE_BLOCK, fmt]
    if config.mode == "contextual":
        hist = history_block(state, config.history_depth)
        if hist:
            blocks.append(hist)
    blocks.append("STATEMENTS:\n" + "\n".join(f"{item.id}: {item.text}" for item in q.items))
    return "\n\n".join(blocks) + "\n"


# ---------------------------------------------------------------------------
# records


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class StepRecord:
    kind: str
    prompt: str
    replies: list[str] = field(default_factory=list)
    scores: dict[str, int] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)
    issues: list[list] = field(default_factory=list)  # [line, kind, detail] of the last attempt
    ok: bool = False
    error: str = ""
    failure: str = ""  # "backend" or "parse" when not ok

    @property
    def reply(self) -> str:
        return self.replies[-1] if self.replies else ""


@dataclass
class SessionRecord:
    record_id: str
    backend: str
    cell: str
    run: int
    seed: int
    config: dict
    order: list[str]
    steps: list[StepRecord] = field(default_factory=list)
    status: str = "complete"  # complete | parse_failed | backend_failed
    failed_step: str | None = None
    started: str = ""
    finished: str = ""
    item: str | None = None  # stateless probes only
    schema: int = SCHEMA_VERSION

    @property
    def complete(self) -> bool:
        return self.status == "complete"

    @property
    def mode(self) -> str:
        return self.config.get("mode", "contextual")

    def step(self, kind: str) -> StepRecord:
        for s in self.steps:
            if s.kind == kind:
                return s
        raise KeyError(kind)

    def dimension_values(self) -> dict[str, float]:
        out = {}
        for s in self.steps:
            out.update(s.means)
        return out

    def observed_row(self) -> list[float] | None:
        """The 7 dimension means in model order, or None if incomplete."""
        if not self.complete:
            return None
        vals = self.dimension_values()
        if any(d not in vals for d in OBSERVED_ORDER):
            return None
        return [vals[d] for d in OBSERVED_ORDER]

    def scale_scores(self) -> dict[str, float]:
        """Composite per questionnaire: unweighted mean of its dimension means."""
        return {s.kind: sum(s.means.values()) / len(s.means) for s in self.steps if s.ok and s.means}

    def to_dict(self, timestamps: bool = True) -> dict:
        d = asdict(self)
        if not timestamps:
            d.pop("started")
            d.pop("finished")
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SessionRecord":
        d = dict(d)
        if d.get("schema", SCHEMA_VERSION) > SCHEMA_VERSION:
            raise ValueError(f"record schema {d['schema']} is newer than supported {SCHEMA_VERSION}")
        d["steps"] = [StepRecord(**s) for s in d.get("steps", [])]
        return cls(**d)


def _record_id(cell: str, mode: str, run: int, item: str | None = None) -> str:
    rid = f"{cell}/{mode}/r{run:04d}"
    return f"{rid}/{item}" if item else rid


def _run_step(backend, prompt: str, q: Questionnaire, config: ProtocolConfig, seed: int) -> StepRecord:
    step = StepRecord(q.kind, prompt)
    for _ in range(int(config.retries) + 1):
        try:
            reply = backend.answer(prompt, config.temperature, seed)
        except Exception as exc:  # backend errors end the session
            step.error = f"{type(exc).__name__}: {exc}"
            step.failure = "backend"
            return step
        step.replies.append(reply)
        outcome = parse_scores(reply, q.item_ids)
        step.issues = [[i.line, i.kind, i.detail] for i in outcome.issues]
        if outcome.ok:
            step.scores = dict(outcome.scores)
            step.means = dict(dimension_means(outcome.scores, q).means)
            step.ok = True
            return step
    step.error = "reply could not be parsed within the retry budget"
    step.failure = "parse"
    return step


def _status(step: StepRecord) -> str:
    return "backend_failed" if step.failure == "backend" else "parse_failed"


def run_session(backend, config: ProtocolConfig, order: Sequence[str] | None = None, *,
                run: int = 0, seed: int | None = None, cell: str | None = None,
                catalog: QuestionnaireCatalog | None = None) -> SessionRecord:
    """Administer the questionnaires in ``order`` within one session."""
    catalog = catalog or load_catalog()
    order = parse_order(order) if order is not None else config.order
    if sorted(order) != sorted(KINDS):
        raise ValueError(f"order must be a permutation of {KINDS}")
    seed = config.seed + run if seed is None else seed
    cell = cell if cell is not None else getattr(backend, "name", "")
    snapshot = config.to_dict()
    snapshot["order"] = list(order)
    rec = SessionRecord(_record_id(cell, config.mode, run), getattr(backend, "name", ""), cell, run, seed,
                        snapshot, list(order), started=_now())
    state = SessionState(run, seed)
    for kind in order:
        q = catalog[kind]
        step = _run_step(backend, build_prompt(state, q, config), q, config, seed)
        rec.steps.append(step)
        if not step.ok:
            rec.status = _status(step)
            rec.failed_step = kind
            break
        state.completed_steps.append((kind, DimensionScores(kind, step.means, step.scores)))
    rec.finished = _now()
    return rec


class CampaignError(RuntimeError):
    def __init__(self, message: str, runset: "RunSet"):
        super().__init__(message)
        self.runset = runset


class RunSet(list):
    """Session records of one campaign, ordered by run index."""

    @property
    def completed(self) -> list[SessionRecord]:
        return [r for r in self if r.complete]

    @property
    def failed(self) -> list[SessionRecord]:
        return [r for r in self if not r.complete]

    def error_report(self) -> dict:
        by = {}
        for r in self.failed:
            key = f"{r.status}@{r.failed_step}"
            by[key] = by.get(key, 0) + 1
        return {"sessions": len(self), "complete": len(self.completed), "failures": by}


class _Sink:
    def __init__(self, store):
        self.store = store
        self.lock = threading.Lock()

    def __call__(self, rec):
        if self.store is not None:
            with self.lock:
                self.store.append(rec)


def _execute(jobs, parallelism: int, sink) -> RunSet:
    def run(job):
        rec = job()
        sink(rec)
        return rec

    if parallelism <= 1:
        out = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            out = list(pool.map(run, jobs))
    return RunSet(out)


def run_campaign(backend, config: ProtocolConfig, *, cell: str | None = None, store=None,
                 skip: Iterable[str] = (), catalog: QuestionnaireCatalog | None = None,
                 require_success: bool = True) -> RunSet:
    """``n_runs`` independent sessions, seeded ``config.seed + run``.

    Records whose id is in ``skip`` are not rerun. Each finished record is
    appended to ``store`` (any object with ``append``) under a lock.
    """
    catalog = catalog or load_catalog()
    cell = cell if cell is not None else getattr(backend, "name", "")
    skip = set(skip)
    jobs = []
    for run in range(int(config.n_runs)):
        if _record_id(cell, config.mode, run) in skip:
            continue
        jobs.append(lambda run=run: run_session(backend, config, run=run, cell=cell, catalog=catalog))
    runset = _execute(jobs, int(config.parallelism), _Sink(store))
    if require_success and jobs and not runset.completed:
        raise CampaignError(f"no session completed for {cell!r}: {runset.error_report()}", runset)
    return runset


def stateless_probe(backend, config: ProtocolConfig, *, cell: str | None = None, store=None,
                    skip: Iterable[str] = (), catalog: QuestionnaireCatalog | None = None) -> RunSet:
    """Ask every catalog item in its own fresh session, ``n_runs`` rounds."""
    if config.mode != "stateless":
        raise ValueError("stateless_probe requires mode='stateless'")
    catalog = catalog or load_catalog()
    cell = cell if cell is not None else getattr(backend, "name", "")
    items = catalog.items
    skip = set(skip)
    empty = SessionState()
    jobs = []
    for rnd in range(int(config.n_runs)):
        for k, item in enumerate(items):
            rid = _record_id(cell, "stateless", rnd, item.id)
            if rid in skip:
                continue
            kind = catalog.kind_of(item.id)
            q = Questionnaire(kind, (item.dimension,), (item,))
            seed = config.seed + rnd * len(items) + k

            def job(rid=rid, q=q, seed=seed, rnd=rnd, item=item):
                rec = SessionRecord(rid, getattr(backend, "name", ""), cell, rnd, seed, config.to_dict(),
                                    [q.kind], started=_now(), item=item.id)
                step = _run_step(backend, build_prompt(empty, q, config), q, config, seed)
                rec.steps.append(step)
                if not step.ok:
                    rec.status = _status(step)
                    rec.failed_step = q.kind
                rec.finished = _now()
                return rec

            jobs.append(job)
    return _execute(jobs, int(config.parallelism), _Sink(store))
