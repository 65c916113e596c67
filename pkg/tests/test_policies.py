from __future__ import annotations

import json

import pytest

from drad.entities import EntitySpan
from drad.gateway import MockBranch, MockGateway, MockScript, NoMatchingBranch, prompt_sha256
from drad.policies import (
    EmptyQuery,
    Policy,
    PolicyKind,
    PromptTemplate,
    build_correction_prompt,
    count_retrievals,
    formulate_query,
    run_policy,
    truncate_at,
)
from drad.retrieval import Passage, PassageHit, build_index
from drad.trace import GenerationTrace

import synthetic
from synthetic import split_tokens, wire

TEN = GenerationTrace.from_pieces((f"t{i} ", 0.9) for i in range(1, 11))


def _span(s, e, trace=TEN):
    return EntitySpan(s, e, trace.tokens[s].char_start, trace.tokens[e - 1].char_end, "NAME", trace.text_of(s, e))


def _trace(text):
    return GenerationTrace.from_pieces((t, 0.9) for t in split_tokens(text))


# --------------------------------------------------------------------------- query window

def test_query_window_symmetric():
    # entity is the 4th and 5th token (1-based); m=2 keeps two tokens on each side
    assert formulate_query(TEN, _span(3, 5), 2) == "t2 t3 t6 t7"


def test_query_window_strict_right_bound():
    # literal right bound: m tokens counted from the entity's first token
    assert formulate_query(TEN, _span(3, 5), 2, strict=True) == "t2 t3 t6"
    assert formulate_query(TEN, _span(3, 6), 2, strict=True) == "t2 t3"


def test_query_window_clamps():
    assert formulate_query(TEN, _span(0, 1), 3) == "t2 t3 t4"
    assert formulate_query(TEN, _span(9, 10), 3) == "t7 t8 t9"
    assert formulate_query(TEN, _span(4, 5), 50) == "t1 t2 t3 t4 t6 t7 t8 t9 t10"


def test_query_window_errors():
    only = GenerationTrace.from_pieces([("Paris", 0.2)])
    with pytest.raises(EmptyQuery):
        formulate_query(only, _span(0, 1, only), 3)
    with pytest.raises(ValueError):
        formulate_query(TEN, _span(3, 5), 0)


# --------------------------------------------------------------------------- truncation / prompt

def test_truncate_at():
    trace = _trace("He was born in Paris in 1950")
    assert [t.text for t in trace.tokens][4] == "Paris "
    assert truncate_at(trace, _span(4, 5, trace)) == "He was born in "
    assert truncate_at(trace, _span(0, 1, trace)) == ""
    last = len(trace.tokens) - 1
    assert truncate_at(trace, _span(last, last + 1, trace)) == "He was born in Paris in "


def _hit(text, rank, pid=None):
    return PassageHit(Passage(pid or f"p#{rank}", "p", text, len(text.split())), 1.0, rank)


def test_correction_prompt_layout():
    assert build_correction_prompt("PRE ", [], "Q: x\nA: ", "partial") == "PRE Q: x\nA: partial"
    hits = [_hit("one", 1), _hit("two", 2), _hit("three", 3)]
    prompt = build_correction_prompt("PRE\n", hits, "Q\n", "")
    assert prompt == "PRE\nContext [1]: one\nContext [2]: two\nContext [3]: three\n\nQ\n"
    dup = build_correction_prompt("", [_hit("same", 1), _hit("same", 2)], "Q", "")
    assert dup.count("same") == 2


# --------------------------------------------------------------------------- policies

def test_drad_end_to_end(clinton_index, clinton_llm):
    run = run_policy(synthetic.CLINTON_QUESTION, PolicyKind(Policy.DRAD), clinton_llm, clinton_index)
    assert run.final_text == "Bill Clinton was born in Arkansas."
    assert count_retrievals(run) == 1
    inv = run.retrieval_invocations[0]
    assert inv.trigger_token_index == 5
    assert inv.query == "Bill Clinton was born in ."
    assert inv.hit_ids[0] == "Bill_Clinton#0"
    assert len(run.revisions) == 1
    rev = run.revisions[0]
    assert (rev.sentence_index, rev.before, rev.after) == (
        0, "Bill Clinton was born in Georgia.", "Bill Clinton was born in Arkansas.")
    assert "Bill Clinton was born in Georgia."[: rev.truncated_at] == "Bill Clinton was born in "
    assert [s["revised"] for s in run.sentences] == [True]
    assert run.stop_reason == "natural"
    flagged = [d["surface"] for d in run.detections if d["is_hallucination"]]
    assert flagged == ["Georgia"]
    json.loads(run.to_json())


def test_nor_and_srr(clinton_index, clinton_llm):
    nor = run_policy(synthetic.CLINTON_QUESTION, PolicyKind(Policy.NOR), clinton_llm)
    assert nor.retrieval_invocations == () and count_retrievals(nor) == 0
    assert nor.final_text == "Bill Clinton was born in Georgia."
    srr = run_policy(synthetic.CLINTON_QUESTION, PolicyKind(Policy.SRR), clinton_llm, clinton_index)
    assert count_retrievals(srr) == 1
    assert srr.retrieval_invocations[0].query == synthetic.CLINTON_QUESTION
    assert srr.final_text == "Bill Clinton was born in Arkansas."


def test_tpr(clinton_index, clinton_llm):
    run = run_policy(synthetic.CLINTON_QUESTION, PolicyKind(Policy.TPR), clinton_llm, clinton_index)
    assert count_retrievals(run) == 1
    inv = run.retrieval_invocations[0]
    assert (inv.trigger_token_index, inv.query) == (0, "Bill Clinton was born in .")
    assert run.final_text == "Bill Clinton was born in Arkansas."


def test_flr_four_sentences(tmp_path):
    idx = build_index([Passage("a#0", "a", "alpha beta", 2)], tmp_path / "i")
    llm = MockGateway(MockScript((MockBranch("Question:", wire("One is here. Two is here. Three is here. Four.")),)))
    run = run_policy("q?", PolicyKind(Policy.FLR), llm, idx)
    assert count_retrievals(run) == 4
    assert [i.query for i in run.retrieval_invocations] == [
        "One is here.", "Two is here.", "Three is here.", "Four."]
    assert run.final_text == "One is here. Two is here. Three is here. Four."
    assert all(s["revised"] for s in run.sentences)


def test_index_required():
    llm = MockGateway(synthetic.clinton_script())
    with pytest.raises(ValueError):
        run_policy("q", PolicyKind(Policy.DRAD), llm, None)
    with pytest.raises(ValueError):
        run_policy("q", PolicyKind(Policy.NOR), llm, None, budget=0)


def test_budget_stops_run(clinton_index, clinton_llm):
    run = run_policy(synthetic.CLINTON_QUESTION, PolicyKind(Policy.DRAD), clinton_llm, clinton_index, budget=3)
    assert run.stop_reason == "budget"
    assert run.token_budget_used == 3
    assert run.final_text == "Bill Clinton was "


def test_gateway_failure_keeps_partial_run(clinton_index):
    # only the uncorrected branch exists, so the correction request has no match
    template = PromptTemplate()
    first_prompt = template.preamble + template.task_prompt(synthetic.CLINTON_QUESTION)
    llm = MockGateway(MockScript((MockBranch(f"sha256:{prompt_sha256(first_prompt)}",
                                             wire("Bill Clinton was born in Georgia.", {"Georgia": 0.1})),)))
    with pytest.raises(NoMatchingBranch) as info:
        run_policy(synthetic.CLINTON_QUESTION, PolicyKind(Policy.DRAD), llm, clinton_index, template=template)
    partial = info.value.partial_run
    assert partial.stop_reason == "error"
    assert count_retrievals(partial) == 1
    assert partial.final_text == "Bill Clinton was born in "


def test_prefix_before_cut_is_preserved(qa_index, qa_llm):
    for name, true, wrong in synthetic.PEOPLE:
        if not wrong:
            continue
        run = run_policy(f"Where was {name} born?", PolicyKind(Policy.DRAD), qa_llm, qa_index)
        first = run.revisions[0]
        original = synthetic.qa_answer(name, wrong)
        assert run.final_text[: first.truncated_at] == original[: first.truncated_at]
        assert run.final_text == synthetic.qa_answer(name, true)


@pytest.mark.parametrize("output", ["Kestrel Bay", "Kestrel Bay."])
def test_entity_query_falls_back_to_question(tmp_path, output):
    # the window around a lone entity is empty or bare punctuation
    idx = build_index([Passage("a#0", "a", "Castwick facts", 2)], tmp_path / "i")
    llm = MockGateway(MockScript((MockBranch("Question:", wire(output, {"Kestrel": 0.1, "Bay": 0.1})),)))
    run = run_policy("Which town?", PolicyKind(Policy.DRAD, m=2), llm, idx)
    assert [i.query for i in run.retrieval_invocations] == ["Which town?"]
    assert run.final_text == output


def test_single_revision_per_sentence(tmp_path):
    # the corrected branch is still hallucinated; the sentence must not be revised again
    idx = build_index([Passage("a#0", "a", "Georgia Arkansas born", 3)], tmp_path / "i")
    llm = MockGateway(MockScript((MockBranch("Question:", wire("He was born in Georgia.", {"Georgia": 0.1})),)))
    run = run_policy("Where?", PolicyKind(Policy.DRAD), llm, idx)
    assert count_retrievals(run) == 1
    assert [r.sentence_index for r in run.revisions] == [0]
    assert run.final_text == "He was born in Georgia."
