from __future__ import annotations

import difflib
import json
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from vaarkit.instruments import DimensionScores, load_catalog
from vaarkit.protocol import (
    MAIN_ORDER,
    VARIANTS,
    ProtocolConfig,
    SessionRecord,
    SessionState,
    build_prompt,
    order_label,
    order_variants,
    parse_order,
    run_campaign,
    run_session,
    stateless_probe,
)
from vaarkit.respondents import EchoBackend, SyntheticRespondent, presets

from .conftest import ConstantBackend, FailingBackend, GarbageBackend

CAT = load_catalog()
SNAP = Path(__file__).parent / "snapshots"


def privacy_state(value=6.0):
    means = {"Control": value, "Awareness": value, "Collection": value}
    return SessionState(completed_steps=[("Privacy", DimensionScores("Privacy", means, {}))])


def test_empty_state_prompt():
    prompt = build_prompt(SessionState(), CAT["Privacy"])
    assert "Previous conversation" not in prompt
    body = prompt.split("STATEMENTS:\n")[1].strip().splitlines()
    assert len(body) == 10 and body[0].startswith("C1: ")
    for block in ("RESPONSE SCALE (1-7):", "RESPONSE FORMAT REQUIREMENTS:", "Use this exact format: [NUMBER]: [RATING]"):
        assert block in prompt


def test_history_line():
    prompt = build_prompt(privacy_state(), CAT["PSA"])
    assert "Previous conversation:\nPrivacy: Control=6.00, Awareness=6.00, Collection=6.00\n" in prompt


def test_repeat_questionnaire_rejected():
    with pytest.raises(ValueError):
        build_prompt(privacy_state(), CAT["Privacy"])


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_prompt_snapshots(variant):
    got = build_prompt(privacy_state(), CAT["PSA"], ProtocolConfig(variant=variant))
    assert got == (SNAP / f"psa_{variant}.txt").read_text()


@pytest.mark.parametrize("variant", ["weak_consistency", "strong_consistency"])
def test_variant_adds_one_line(variant):
    base = build_prompt(privacy_state(), CAT["PSA"]).splitlines()
    other = build_prompt(privacy_state(), CAT["PSA"], ProtocolConfig(variant=variant)).splitlines()
    diff = [d for d in difflib.ndiff(base, other) if d[:1] in "+-"]
    assert diff == ["+ " + VARIANTS[variant]]
    at = other.index(VARIANTS[variant])
    assert other[at - 1].startswith("- Ensure all ratings are integers")


def test_history_depth_bound():
    steps = [(k, DimensionScores(k, {f"d{k}{i}": 4.0}, {})) for i, k in enumerate(("A", "B", "C", "D"))]
    state = SessionState(completed_steps=steps)
    from vaarkit.protocol import history_block

    block = history_block(state, 3).splitlines()
    assert block[0] == "Previous conversation:" and [l.split(":")[0] for l in block[1:]] == ["B", "C", "D"]
    assert history_block(state, 0) == ""


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(order_variants()), st.integers(0, 3), st.integers(0, 10_000))
def test_history_in_session_prompts(order, depth, seed):
    cfg = ProtocolConfig(order=order, history_depth=depth)
    rec = run_session(SyntheticRespondent("s", presets()["aligned"]), cfg, seed=seed)
    for i, step in enumerate(rec.steps):
        hist = step.prompt.split("Previous conversation:\n")
        if i == 0 or depth == 0:
            assert len(hist) == 1
            continue
        lines = hist[1].split("\n\n")[0].splitlines()
        assert len(lines) == min(i, depth, 3)
        assert [l.split(":")[0] for l in lines] == list(order[:i])[-len(lines):]


def test_synthetic_session_complete():
    rec = run_session(SyntheticRespondent("s", presets()["aligned"]), ProtocolConfig())
    assert rec.complete and [s.kind for s in rec.steps] == list(MAIN_ORDER)
    assert sum(len(s.scores) for s in rec.steps) == len(CAT.items)
    assert len(rec.observed_row()) == 7


def test_order_respected():
    order = ("AoDS", "Privacy", "PSA")
    rec = run_session(SyntheticRespondent("s", presets()["aligned"]), ProtocolConfig(), order)
    assert [s.kind for s in rec.steps] == list(order) and rec.order == list(order)
    assert order_label(order) == "A->P->PSA"


def test_garbage_fails_first_step_with_retries():
    be = GarbageBackend()
    rec = run_session(be, ProtocolConfig(retries=2))
    assert rec.status == "parse_failed" and rec.failed_step == "Privacy" and len(rec.steps) == 1
    assert be.calls == 3 and len(rec.steps[0].replies) == 3
    assert rec.observed_row() is None


def test_retry_resends_identical_prompt():
    prompts = []

    class Flaky:
        name = "flaky"

        def answer(self, prompt, temperature, seed):
            prompts.append(prompt)
            return "nonsense" if len(prompts) == 1 else ConstantBackend(5).answer(prompt, temperature, seed)

    rec = run_session(Flaky(), ProtocolConfig())
    assert rec.complete and prompts[0] == prompts[1]


def test_echo_backend_never_parses():
    rec = run_session(EchoBackend(), ProtocolConfig())
    assert rec.status == "parse_failed"


def test_campaign_with_failing_run():
    cfg = ProtocolConfig(n_runs=3, seed=10)
    be = FailingBackend(ConstantBackend(4), bad_seeds={12})
    rs = run_campaign(be, cfg)
    assert len(rs.completed) == 2 and len(rs.failed) == 1
    assert rs[2].status == "backend_failed" and "injected" in rs[2].steps[0].error
    assert rs.error_report()["failures"] == {"backend_failed@Privacy": 1}


def test_campaign_all_failed_raises():
    from vaarkit.protocol import CampaignError

    with pytest.raises(CampaignError) as exc:
        run_campaign(GarbageBackend(), ProtocolConfig(n_runs=2))
    assert len(exc.value.runset) == 2


def test_campaign_seeds_and_parallel_equivalence():
    be = SyntheticRespondent("s", presets()["aligned"])
    seq = run_campaign(be, ProtocolConfig(n_runs=12, seed=7))
    par = run_campaign(be, ProtocolConfig(n_runs=12, seed=7, parallelism=4))
    assert [r.seed for r in seq] == list(range(7, 19))

    def strip(r):
        d = r.to_dict(timestamps=False)
        d["config"].pop("parallelism")
        return d

    assert [strip(r) for r in seq] == [strip(r) for r in par]


@pytest.mark.parametrize("t", [0.1, 0.7, 1.0])
def test_temperature_sweep(t):
    seen = set()

    class Rec(ConstantBackend):
        def answer(self, prompt, temperature, seed):
            seen.add(temperature)
            return super().answer(prompt, temperature, seed)

    rs = run_campaign(Rec(), ProtocolConfig(n_runs=2, temperature=t))
    assert seen == {t} and rs[0].config["temperature"] == t


def test_skip_ids():
    be = ConstantBackend(4)
    first = run_campaign(be, ProtocolConfig(n_runs=4), cell="c")
    again = run_campaign(be, ProtocolConfig(n_runs=4), cell="c", skip={r.record_id for r in first[:3]})
    assert [r.run for r in again] == [3]


def test_stateless_probe():
    cfg = ProtocolConfig(mode="stateless", n_runs=3, seed=100)
    rs = stateless_probe(ConstantBackend(4), cfg)
    n = len(CAT.items)
    assert len(rs) == 3 * n and all(r.complete for r in rs)
    assert all("Previous conversation" not in r.steps[0].prompt for r in rs)
    assert rs[n + 2].seed == 100 + n + 2 and rs[n + 2].item == CAT.items[2].id
    with pytest.raises(ValueError):
        stateless_probe(ConstantBackend(4), ProtocolConfig())


def test_record_round_trip():
    rec = run_session(SyntheticRespondent("s", presets()["aligned"]), ProtocolConfig(), cell="x")
    back = SessionRecord.from_dict(json.loads(json.dumps(rec.to_dict())))
    assert back == rec and back.record_id == "x/contextual/r0000"
    d = rec.to_dict()
    d["schema"] = 99
    with pytest.raises(ValueError):
        SessionRecord.from_dict(d)


def test_order_variants():
    orders = order_variants()
    assert len(orders) == 4 and orders[0] == MAIN_ORDER
    stress = [o for o in orders[1:] if o[0] == "AoDS"]
    assert len(stress) == 2
    assert all(sorted(o) == sorted(MAIN_ORDER) for o in orders)
    assert parse_order("A->P->PSA") == ("AoDS", "Privacy", "PSA")


def test_config_validation():
    for bad in ({"order": ("Privacy", "Privacy", "AoDS")}, {"temperature": -1}, {"n_runs": 0},
                {"history_depth": -1}, {"mode": "x"}, {"variant": "x"}):
        with pytest.raises(ValueError):
            ProtocolConfig(**bad)
