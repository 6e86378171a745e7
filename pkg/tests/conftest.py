from __future__ import annotations

import numpy as np
import pytest

from vaarkit.parser import format_scores
from vaarkit.respondents import prompt_item_ids, presets, sample_observed
from vaarkit.sem import GroupDataset


class ConstantBackend:
    """Answers every item with the same score."""

    def __init__(self, score: int = 4, name: str = "const"):
        self.score = score
        self.name = name

    def answer(self, prompt, temperature, seed):
        return format_scores({i: self.score for i in prompt_item_ids(prompt)})


class FailingBackend:
    """Wraps another backend and raises for selected seeds."""

    def __init__(self, inner, bad_seeds, name="flaky"):
        self.inner = inner
        self.bad_seeds = set(bad_seeds)
        self.name = name
        self.calls = 0

    def answer(self, prompt, temperature, seed):
        self.calls += 1
        if seed in self.bad_seeds:
            raise ConnectionError("injected fault")
        return self.inner.answer(prompt, temperature, seed)


class GarbageBackend:
    name = "garbage"

    def __init__(self):
        self.calls = 0

    def answer(self, prompt, temperature, seed):
        self.calls += 1
        return "I would rather not answer these questions."


def aligned_dataset(n=300, seed=0, label="aligned"):
    return GroupDataset(label, sample_observed(presets()["aligned"], n, np.random.default_rng(seed)))


@pytest.fixture(scope="session")
def aligned_big():
    return aligned_dataset(2000, seed=11)


@pytest.fixture(scope="session")
def aligned_fit(aligned_big):
    from vaarkit.sem import attach_scaling, fit_single_group, robust_se

    fit = fit_single_group(aligned_big)
    robust_se(fit)
    attach_scaling(fit)
    return fit


# -- acceptance reporting ------------------------------------------------------
# Tests marked ``acceptance(n, "title")`` are rolled up into one line per
# criterion in the terminal summary. An expected failure counts as FAIL.

_ACCEPTANCE: dict[int, dict] = {}
_INFO: dict[int, list[str]] = {}


@pytest.fixture
def measured(request):
    """Record a measured quantity shown next to the criterion's summary line."""
    num = request.node.get_closest_marker("acceptance").args[0]
    return lambda text: _INFO.setdefault(num, []).append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        num, title = mark.args
        entry = _ACCEPTANCE.setdefault(num, {"title": title, "ok": True, "notes": []})
        failed = not rep.passed or hasattr(rep, "wasxfail")
        if failed:
            entry["ok"] = False
            reason = getattr(rep, "wasxfail", "") or (rep.longreprtext.strip().splitlines() or [""])[-1]
            entry["notes"].append(f"{item.name}: {reason}"[:160])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[num]
        line = f"criterion {num:>2} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if _INFO.get(num):
            line += "  (" + ", ".join(_INFO[num]) + ")"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
