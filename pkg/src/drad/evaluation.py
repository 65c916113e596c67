"""Detection AUC, QA metrics and dataset-level evaluation of policies."""
from __future__ import annotations

import json
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .entities import Recognizer, RuleRecognizer
from .gateway import GatewayError, LlmGateway
from .policies import PolicyKind, PromptTemplate, run_policy
from .retrieval import IndexHandle
from .scoring import BASELINES, DetectionConfig, Pooling, baseline_score, score_passage, score_passage_entropy
from .trace import GenerationTrace, read_traces


class DegenerateLabels(ValueError):
    pass


@dataclass(frozen=True)
class LabeledPassage:
    text: str
    trace: GenerationTrace
    label: int

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class QaExample:
    id: str
    question: str
    gold_answers: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.gold_answers:
            raise ValueError(f"example {self.id!r} has no gold answers")


# --------------------------------------------------------------------------- AUC


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties count one half."""
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs both positive and negative labels")
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    # midranks for tied scores
    rank_sum = 0.0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        midrank = (i + j + 2) / 2.0
        rank_sum += midrank * sum(1 for t in order[i : j + 1] if labels[t] == 1)
        i = j + 1
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# --------------------------------------------------------------------------- QA

DEFAULT_MARKER = "the answer is"


def extract_answer(output: str, mode: str = "pattern", marker: str = DEFAULT_MARKER) -> str:
    at = output.lower().rfind(marker.lower())
    if at == -1:
        return ""
    answer = output[at + len(marker):].strip().split("\n", 1)[0].strip()
    answer = answer.rstrip(".!?;:,").strip()
    if mode == "pattern":
        return answer
    if mode == "boolean":
        low = answer.lower()
        if re.search(r"\byes\b", low):
            return "yes"
        if re.search(r"\bno\b", low):
            return "no"
        return ""
    raise ValueError(f"unknown extraction mode {mode!r}")


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in set(string.punctuation))
    s = re.sub(r"\b(a|an|the)\b", " ", s)
    return " ".join(s.split())


def qa_metrics(prediction: str, gold_answers: Sequence[str]) -> dict[str, float]:
    if not gold_answers:
        raise ValueError("gold_answers must be non-empty")
    pred = normalize_answer(prediction)
    pred_toks = pred.split()
    em = float(any(pred == normalize_answer(g) for g in gold_answers))
    best = (-1.0, 0.0, 0.0)
    for gold in gold_answers:
        gold_toks = normalize_answer(gold).split()
        if not pred_toks or not gold_toks:
            same = float(pred_toks == gold_toks)
            cand = (same, same, same)
        else:
            common = sum((Counter(pred_toks) & Counter(gold_toks)).values())
            if common == 0:
                cand = (0.0, 0.0, 0.0)
            else:
                p = common / len(pred_toks)
                r = common / len(gold_toks)
                cand = (2 * p * r / (p + r), p, r)
        if cand[0] > best[0]:
            best = cand
    f1, precision, recall = best
    return {"em": em, "f1": f1, "precision": precision, "recall": recall}


# --------------------------------------------------------------------------- reports

AGGREGATES = ("em", "f1", "precision", "recall", "accuracy", "mean_retrievals")


@dataclass
class MetricReport:
    policy: str
    records: list[dict[str, Any]]
    aggregates: dict[str, float] = field(default_factory=dict)
    failed: int = 0

    @classmethod
    def from_records(cls, policy: str, records: list[dict[str, Any]]) -> MetricReport:
        ok = [r for r in records if not r.get("failed")]
        keys = {"em": "em", "f1": "f1", "precision": "precision", "recall": "recall",
                "accuracy": "accuracy", "mean_retrievals": "retrievals"}
        aggregates = {
            name: (sum(r[src] for r in ok) / len(ok) if ok else 0.0) for name, src in keys.items()
        }
        return cls(policy, records, aggregates, len(records) - len(ok))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


def load_qa_dataset(path: str | Path) -> list[QaExample]:
    out = []
    for i, rec in enumerate(read_traces(path)):
        answers = rec.get("answers", rec.get("gold_answers"))
        if isinstance(answers, str):
            answers = [answers]
        out.append(QaExample(str(rec.get("id", i)), rec["question"], tuple(answers)))
    return out


def load_detection_dataset(path: str | Path) -> list[LabeledPassage]:
    out = []
    for rec in read_traces(path):
        trace = GenerationTrace.from_record(rec)
        out.append(LabeledPassage(trace.text, trace, int(rec["label"])))
    return out


def evaluate_policy(
    dataset: Iterable[QaExample],
    policy: PolicyKind,
    llm: LlmGateway,
    index: IndexHandle | None,
    *,
    budget: int = 256,
    template: PromptTemplate | None = None,
    recognizer: Recognizer | None = None,
    answer_mode: str = "pattern",
    answer_marker: str = DEFAULT_MARKER,
    concurrency: int = 1,
    stop_sequences: Sequence[str] = (),
) -> MetricReport:
    """Run ``policy`` on every example and aggregate EM/F1/accuracy and retrieval counts.

    Gateway failures mark the example as failed; failed examples are kept in
    ``records`` but left out of the aggregates.
    """

    def one(ex: QaExample) -> dict[str, Any]:
        rec: dict[str, Any] = {"id": ex.id, "question": ex.question, "gold_answers": list(ex.gold_answers)}
        try:
            run = run_policy(ex.question, policy, llm, index, budget, template=template,
                             recognizer=recognizer, stop_sequences=stop_sequences)
        except GatewayError as exc:
            partial = exc.partial_run
            rec.update(failed=True, error=f"{type(exc).__name__}: {exc}",
                       retrievals=len(partial.retrieval_invocations) if partial else 0)
            return rec
        prediction = extract_answer(run.final_text, answer_mode, answer_marker)
        metrics = qa_metrics(prediction, ex.gold_answers)
        rec.update(
            failed=False,
            output=run.final_text,
            prediction=prediction,
            retrievals=len(run.retrieval_invocations),
            revisions=len(run.revisions),
            sentences=len(run.sentences),
            tokens=run.token_budget_used,
            accuracy=metrics["em"],
            **metrics,
        )
        return rec

    examples = list(dataset)
    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            records = list(pool.map(one, examples))
    else:
        records = [one(ex) for ex in examples]
    return MetricReport.from_records(policy.kind.value, records)


# --------------------------------------------------------------------------- detection


@dataclass(frozen=True)
class ScorerConfig:
    """One detector: ``rhd`` / ``rhd_entropy`` with a pooling, or a token baseline."""

    name: str
    kind: str
    pooling: Pooling = Pooling.AVERAGE

    def scorer(self, recognizer: Recognizer) -> Callable[[GenerationTrace], float]:
        if self.kind == "rhd":
            cfg = DetectionConfig(prob_pooling=self.pooling)
            return lambda t: score_passage(t, recognizer(t), cfg)
        if self.kind == "rhd_entropy":
            cfg = DetectionConfig(entropy_pooling=self.pooling)
            return lambda t: score_passage_entropy(t, recognizer(t), cfg)
        if self.kind in BASELINES:
            return lambda t: baseline_score(t, self.kind)
        raise ValueError(f"unknown detector kind {self.kind!r}")


def default_detectors() -> list[ScorerConfig]:
    out = [ScorerConfig(f"rhd_prob_{p.value}", "rhd", p) for p in Pooling]
    out += [ScorerConfig(f"rhd_entropy_{p.value}", "rhd_entropy", p) for p in Pooling]
    out += [ScorerConfig(b, b) for b in BASELINES]
    return out


def evaluate_detection(
    passages: Iterable[LabeledPassage],
    detectors: Sequence[ScorerConfig] | None = None,
    recognizer: Recognizer | None = None,
) -> dict[str, float]:
    """AUC of each detector over labelled passages, keyed by detector name."""
    passages = list(passages)
    labels = [p.label for p in passages]
    if len(passages) < 2 or len(set(labels)) < 2:
        raise DegenerateLabels("detection evaluation needs both labels present")
    recognizer = recognizer or RuleRecognizer()
    table = {}
    for det in detectors or default_detectors():
        score = det.scorer(recognizer)
        table[det.name] = auc([score(p.trace) for p in passages], labels)
    return table
