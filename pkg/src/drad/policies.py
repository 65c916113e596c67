"""Retrieval-timing policies and knowledge-injected self-correction.

Five policies share one runner:

``nor``   generate once, never retrieve.
``srr``   retrieve once with the question, then generate once.
``flr``   revise every sentence: retrieve with the sentence as query, regenerate it.
``tpr``   revise sentences containing a token below ``tpr_threshold``; the query is
          the sentence with those tokens removed.
``drad``  revise when a closed entity is judged hallucinated; the query is the
          window around the entity, output is cut at the entity's first token.

Every multi-round policy revises a given sentence at most once.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Sequence

from .entities import EntitySpan, EntityStream, Recognizer, RuleRecognizer
from .gateway import GatewayError, GenerationRequest, LlmGateway, StopGeneration
from .retrieval import IndexHandle, PassageHit, analyze
from .scoring import DetectionConfig, detect
from .trace import GenerationTrace, TokenEvent, SENTENCE_FINAL, segment_sentences, sentence_index_of

PROMPT_TEMPLATE_VERSION = 1


class EmptyQuery(ValueError):
    pass


class Policy(str, Enum):
    NOR = "nor"
    SRR = "srr"
    FLR = "flr"
    TPR = "tpr"
    DRAD = "drad"


@dataclass(frozen=True)
class PolicyKind:
    kind: Policy
    k: int = 3
    m: int = 10
    tpr_threshold: float = 0.4
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    strict_window: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Policy(self.kind))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0.0 <= self.tpr_threshold <= 1.0:
            raise ValueError("tpr_threshold must be in [0, 1]")


@dataclass(frozen=True)
class PromptTemplate:
    preamble: str = (
        "Answer the question. Where context passages are given, use them to correct "
        "and complete the answer.\n\n"
    )
    question_format: str = "Question: {question}\nAnswer: "
    few_shot: str = ""
    context_format: str = "Context [{n}]: {text}\n"
    context_separator: str = "\n"

    def task_prompt(self, question: str) -> str:
        return self.few_shot + self.question_format.format(question=question)


@dataclass(frozen=True)
class RetrievalInvocation:
    trigger_token_index: int
    query: str
    hit_ids: tuple[str, ...]


@dataclass(frozen=True)
class Revision:
    sentence_index: int
    before: str
    after: str
    truncated_at: int  # character offset in the output where regeneration started


@dataclass(frozen=True)
class PolicyRun:
    policy: str
    question: str
    final_text: str
    retrieval_invocations: tuple[RetrievalInvocation, ...]
    revisions: tuple[Revision, ...]
    token_budget_used: int
    stop_reason: str
    sentences: tuple[dict[str, Any], ...] = ()
    detections: tuple[dict[str, Any], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


def count_retrievals(run: PolicyRun) -> int:
    return len(run.retrieval_invocations)


# --------------------------------------------------------------------------- SEK pieces


def formulate_query(trace: GenerationTrace, span: EntitySpan, m: int, strict: bool = False) -> str:
    """Context window around a hallucinated entity, the entity itself left out.

    Takes up to ``m`` tokens before the span and up to ``m`` after it. With
    ``strict`` the right side ends at ``token_start + m`` instead, so long
    entities leave fewer (possibly zero) right-hand tokens.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    n = len(trace.tokens)
    if span.token_start == 0 and span.token_end >= n:
        raise EmptyQuery("trace has no tokens outside the entity")
    left = trace.text_of(max(0, span.token_start - m), span.token_start).strip()
    right_end = span.token_start + m + 1 if strict else span.token_end + m
    right = trace.text_of(span.token_end, min(n, right_end)).strip()
    return " ".join(part for part in (left, right) if part)


def truncate_at(trace: GenerationTrace, span: EntitySpan) -> str:
    return trace.text_of(0, span.token_start)


def build_correction_prompt(
    system_preamble: str,
    passages: Sequence[PassageHit],
    original_prompt: str,
    truncated_output: str,
    *,
    context_format: str = PromptTemplate.context_format,
    context_separator: str = PromptTemplate.context_separator,
) -> str:
    blocks = "".join(context_format.format(n=i, text=h.passage.text) for i, h in enumerate(passages, 1))
    if blocks:
        blocks += context_separator
    return system_preamble + blocks + original_prompt + truncated_output


# --------------------------------------------------------------------------- runner


@dataclass(frozen=True)
class _Trigger:
    cut: int
    query: str
    sentence_index: int


def _last_sentence_closed(trace: GenerationTrace) -> bool:
    # a trailing "." is only a boundary once the next character is known
    text = trace.tokens[-1].text
    stripped = text.rstrip()
    return bool(stripped) and stripped[-1] in SENTENCE_FINAL and len(stripped) < len(text)


class _Runner:
    def __init__(self, question: str, policy: PolicyKind, llm: LlmGateway, index: IndexHandle | None,
                 budget: int, template: PromptTemplate, recognizer: Recognizer,
                 stop_sequences: Sequence[str], top_logprobs: int, temperature: float):
        self.question = question
        self.policy = policy
        self.llm = llm
        self.index = index
        self.budget = budget
        self.template = template
        self.recognizer = recognizer
        self.stop_sequences = tuple(stop_sequences)
        self.top_logprobs = top_logprobs
        self.temperature = temperature
        self.original_prompt = template.task_prompt(question)
        self.events: list[TokenEvent] = []
        self.used = 0
        self.invocations: list[RetrievalInvocation] = []
        self.pending: list[tuple[int, str, int]] = []
        self.revised: set[int] = set()
        self.detections: list[dict[str, Any]] = []
        self.stop_reason = "natural"
        self._rewind: Callable[[int], None] | None = None

    def trace(self) -> GenerationTrace:
        return GenerationTrace.from_events(self.events)

    def prompt(self, hits: Sequence[PassageHit], truncated: str = "") -> str:
        return build_correction_prompt(
            self.template.preamble, hits, self.original_prompt, truncated,
            context_format=self.template.context_format,
            context_separator=self.template.context_separator,
        )

    def request(self, prompt: str) -> GenerationRequest:
        return GenerationRequest(prompt, self.budget - self.used, self.stop_sequences,
                                 self.top_logprobs, self.temperature)

    def retrieve(self, query: str, trigger: int) -> list[PassageHit]:
        hits = self.index.search(query, self.policy.k)
        self.invocations.append(RetrievalInvocation(trigger, query, tuple(h.passage.id for h in hits)))
        return hits

    def run(self) -> PolicyRun:
        kind = self.policy.kind
        if kind is Policy.NOR:
            self.single(self.prompt([]))
        elif kind is Policy.SRR:
            self.single(self.prompt(self.retrieve(self.question, 0)))
        else:
            self.multi(self.watcher())
        return self.result()

    def single(self, prompt: str) -> None:
        trace = self.llm.generate(self.request(prompt))
        self.events.extend(trace.tokens)
        self.used += len(trace.tokens)
        if self.used >= self.budget:
            self.stop_reason = "budget"

    def multi(self, watch: Callable[[GenerationTrace, bool], _Trigger | None]) -> None:
        prompt = self.prompt([])
        while self.used < self.budget:
            trigger: _Trigger | None = None

            def on_token(ev: TokenEvent) -> None:
                nonlocal trigger
                self.events.append(ev)
                self.used += 1
                trigger = watch(self.trace(), False)
                if trigger is not None:
                    raise StopGeneration

            self.llm.stream_generate(self.request(prompt), on_token)
            if trigger is None:
                if self.used >= self.budget:
                    break
                trigger = watch(self.trace(), True)
                if trigger is None:
                    return
            prompt = self.revise(trigger)
        self.stop_reason = "budget"

    def revise(self, trigger: _Trigger) -> str:
        trace = self.trace()
        sentence = segment_sentences(trace)[trigger.sentence_index]
        before = trace.text_of(sentence.token_start, sentence.token_end)
        truncated = trace.text_of(0, trigger.cut)
        hits = self.retrieve(trigger.query, trigger.cut)
        self.pending.append((trigger.sentence_index, before, len(truncated)))
        self.revised.add(trigger.sentence_index)
        del self.events[trigger.cut:]
        if self._rewind is not None:
            self._rewind(trigger.cut)
        return self.prompt(hits, truncated)

    def watcher(self) -> Callable[[GenerationTrace, bool], _Trigger | None]:
        kind = self.policy.kind
        if kind is Policy.DRAD:
            return self._drad_watcher()

        threshold = self.policy.tpr_threshold

        def watch(trace: GenerationTrace, final: bool) -> _Trigger | None:
            sentences = segment_sentences(trace)
            for j, s in enumerate(sentences):
                if j in self.revised:
                    continue
                if j == len(sentences) - 1 and not (final or _last_sentence_closed(trace)):
                    return None
                toks = trace.tokens[s.token_start : s.token_end]
                if kind is Policy.FLR:
                    query = trace.text_of(s.token_start, s.token_end).strip()
                elif any(t.probability < threshold for t in toks):
                    query = "".join(t.text for t in toks if t.probability >= threshold).strip()
                else:
                    continue
                return _Trigger(s.token_start, query if analyze(query) else self.question, j)
            return None

        return watch

    def _drad_watcher(self) -> Callable[[GenerationTrace, bool], _Trigger | None]:
        stream = EntityStream(self.recognizer)
        self._rewind = stream.rewind
        config = self.policy.detection

        def watch(trace: GenerationTrace, final: bool) -> _Trigger | None:
            for span in stream.closed(trace, final):
                verdict = detect(trace, span, config)
                self.detections.append({
                    "surface": span.surface,
                    "token_start": span.token_start,
                    "token_end": span.token_end,
                    "p_entity": verdict.entity_probability,
                    "h_entity": verdict.entity_entropy,
                    "is_hallucination": verdict.is_hallucination,
                })
                if not verdict.is_hallucination:
                    continue
                j = sentence_index_of(segment_sentences(trace), span.token_start)
                if j in self.revised:
                    continue
                try:
                    query = formulate_query(trace, span, self.policy.m, self.policy.strict_window)
                except EmptyQuery:
                    query = ""
                # a window of bare punctuation would retrieve nothing
                return _Trigger(span.token_start, query if analyze(query) else self.question, j)
            return None

        return watch

    def result(self) -> PolicyRun:
        trace = self.trace()
        sentences = segment_sentences(trace)
        revisions = []
        for j, before, cut in self.pending:
            after = trace.text_of(sentences[j].token_start, sentences[j].token_end) if j < len(sentences) else ""
            revisions.append(Revision(j, before, after, cut))
        return PolicyRun(
            policy=self.policy.kind.value,
            question=self.question,
            final_text=trace.text,
            retrieval_invocations=tuple(self.invocations),
            revisions=tuple(revisions),
            token_budget_used=self.used,
            stop_reason=self.stop_reason,
            sentences=tuple(
                {"token_start": s.token_start, "token_end": s.token_end, "revised": j in self.revised}
                for j, s in enumerate(sentences)
            ),
            detections=tuple(self.detections),
        )


def run_policy(
    question: str,
    policy: PolicyKind,
    llm: LlmGateway,
    index: IndexHandle | None = None,
    budget: int = 256,
    *,
    template: PromptTemplate | None = None,
    recognizer: Recognizer | None = None,
    stop_sequences: Sequence[str] = (),
    top_logprobs: int = 5,
    temperature: float = 0.0,
) -> PolicyRun:
    """Answer ``question`` under ``policy``; ends naturally or when ``budget`` tokens are spent.

    A :class:`GatewayError` is re-raised with the run so far on ``exc.partial_run``.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1 token")
    if policy.kind is not Policy.NOR and index is None:
        raise ValueError(f"policy {policy.kind.value!r} needs a retrieval index")
    runner = _Runner(question, policy, llm, index, budget, template or PromptTemplate(),
                     recognizer or RuleRecognizer(), stop_sequences, top_logprobs, temperature)
    try:
        return runner.run()
    except GatewayError as exc:
        runner.stop_reason = "error"
        exc.partial_run = runner.result()
        raise
