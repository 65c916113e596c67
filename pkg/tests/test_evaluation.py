from __future__ import annotations

import json
import random

import pytest

from drad.evaluation import (
    DegenerateLabels,
    LabeledPassage,
    QaExample,
    ScorerConfig,
    auc,
    evaluate_detection,
    evaluate_policy,
    extract_answer,
    load_detection_dataset,
    load_qa_dataset,
    qa_metrics,
)
from drad.gateway import MockBranch, MockGateway, MockScript
from drad.policies import Policy, PolicyKind
from drad.scoring import Pooling
from drad.trace import dump_traces

import synthetic
from oracles import auc_reference
from synthetic import wire


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.5, 0.5], [1, 0]) == 0.5
    assert auc([0.1, 0.9], [1, 0]) == 0.0


def test_auc_matches_pairwise_count():
    rng = random.Random(3)
    scores = [rng.choice([0.1, 0.2, 0.3, rng.random()]) for _ in range(20)]
    labels = [i % 2 for i in range(20)]
    assert auc(scores, labels) == pytest.approx(auc_reference(scores, labels), abs=1e-12)


def test_auc_errors():
    with pytest.raises(DegenerateLabels):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc([0.1], [1, 0])


@pytest.mark.parametrize("output,mode,expected", [
    ("Bill was born there, so the answer is Arkansas.", "pattern", "Arkansas"),
    ("We checked, and the answer is yes.", "boolean", "yes"),
    ("The Answer is: no, never.", "boolean", "no"),
    ("no marker here", "pattern", ""),
    ("the answer is maybe", "boolean", ""),
    ("The answer is A. Then the answer is B.", "pattern", "B"),
])
def test_extract_answer(output, mode, expected):
    assert extract_answer(output, mode) == expected


def test_extract_answer_unknown_mode():
    with pytest.raises(ValueError):
        extract_answer("the answer is x", "regex")


def test_qa_metrics_examples():
    m = qa_metrics("The Arkansas", ["Arkansas"])
    assert (m["em"], m["f1"]) == (1.0, 1.0)
    m = qa_metrics("Paris France", ["Paris"])
    assert (m["precision"], m["recall"]) == (0.5, 1.0)
    assert m["f1"] == pytest.approx(2 / 3, abs=1e-15)
    m = qa_metrics("", ["x"])
    assert (m["em"], m["f1"]) == (0.0, 0.0)
    # the best-F1 gold answer supplies precision and recall
    m = qa_metrics("new york city", ["york", "new york city"])
    assert (m["em"], m["f1"], m["precision"], m["recall"]) == (1.0, 1.0, 1.0, 1.0)


def _two_example_setup():
    data = [QaExample("a", "Capital of France?", ("Paris",)), QaExample("b", "Capital of Peru?", ("Lima",))]
    script = MockScript((
        MockBranch("France", wire("So the answer is Paris.")),
        MockBranch("Peru", wire("So the answer is Lima.")),
    ))
    return data, MockGateway(script)


def test_evaluate_policy_nor_and_srr(tmp_path):
    from drad.retrieval import Passage, build_index

    data, llm = _two_example_setup()
    idx = build_index([Passage("x#0", "x", "capital cities", 2)], tmp_path / "i")
    nor = evaluate_policy(data, PolicyKind(Policy.NOR), llm, None)
    assert nor.aggregates["em"] == 1.0 and nor.aggregates["mean_retrievals"] == 0.0
    srr = evaluate_policy(data, PolicyKind(Policy.SRR), llm, idx)
    assert srr.aggregates["mean_retrievals"] == 1.0
    assert srr.aggregates["accuracy"] == srr.aggregates["em"] == 1.0


def test_evaluate_policy_drad_vs_flr(qa_index, qa_llm):
    data = synthetic.qa_dataset()
    flr = evaluate_policy(data, PolicyKind(Policy.FLR), qa_llm, qa_index)
    drad = evaluate_policy(data, PolicyKind(Policy.DRAD), qa_llm, qa_index)
    assert flr.aggregates["mean_retrievals"] == 3.0
    assert drad.aggregates["mean_retrievals"] == 0.6
    assert drad.aggregates["mean_retrievals"] < flr.aggregates["mean_retrievals"]
    assert drad.aggregates["em"] >= flr.aggregates["em"]
    assert drad.aggregates["em"] == 1.0


def test_evaluate_policy_concurrency_is_deterministic(qa_index, qa_llm):
    data = synthetic.qa_dataset()
    serial = evaluate_policy(data, PolicyKind(Policy.DRAD), qa_llm, qa_index)
    parallel = evaluate_policy(data, PolicyKind(Policy.DRAD), qa_llm, qa_index, concurrency=4)
    assert serial.to_json() == parallel.to_json()


def test_evaluate_policy_counts_failures():
    data = [QaExample("a", "Capital of France?", ("Paris",)), QaExample("z", "unscripted", ("x",))]
    llm = MockGateway(MockScript((MockBranch("France", wire("So the answer is Paris.")),)))
    report = evaluate_policy(data, PolicyKind(Policy.NOR), llm, None)
    assert report.failed == 1
    assert report.aggregates["em"] == 1.0
    assert report.records[1]["error"].startswith("NoMatchingBranch")


def test_detection_separable():
    table = evaluate_detection(synthetic.separable_set())
    for name, value in table.items():
        assert value == 1.0, name


def test_detection_shuffled_near_chance():
    table = evaluate_detection(synthetic.shuffled_set())
    for name, value in table.items():
        assert abs(value - 0.5) <= 0.15, name
    # frozen value for the seeded shuffle, via the pairwise oracle
    passages = synthetic.shuffled_set()
    from drad.scoring import baseline_score
    ref = auc_reference([baseline_score(p.trace, "avg_prob") for p in passages], [p.label for p in passages])
    assert table["avg_prob"] == pytest.approx(ref, abs=1e-12)
    assert table["avg_prob"] == pytest.approx(0.5644, abs=1e-12)


def test_detection_entity_signal():
    table = evaluate_detection(synthetic.entity_signal_set(),
                               [ScorerConfig("rhd", "rhd", Pooling.AVERAGE), ScorerConfig("avg", "avg_prob")])
    assert table["rhd"] > table["avg"]


def test_detection_needs_both_labels():
    trace = synthetic.trace_of("a b")
    with pytest.raises(DegenerateLabels):
        evaluate_detection([LabeledPassage("a b", trace, 1)])


def test_dataset_loaders(tmp_path):
    qa = tmp_path / "qa.jsonl"
    qa.write_text(json.dumps({"id": "x", "question": "q?", "answers": ["a", "b"]}) + "\n"
                  + json.dumps({"question": "r?", "answers": "c"}) + "\n")
    loaded = load_qa_dataset(qa)
    assert loaded[0] == QaExample("x", "q?", ("a", "b"))
    assert loaded[1].gold_answers == ("c",) and loaded[1].id == "1"

    det = tmp_path / "det.jsonl"
    dump_traces([synthetic.trace_of("Anna left.")], det)
    rec = json.loads(det.read_text())
    rec["label"] = 1
    det.write_text(json.dumps(rec) + "\n")
    (p,) = load_detection_dataset(det)
    assert p.label == 1 and p.text == "Anna left."
