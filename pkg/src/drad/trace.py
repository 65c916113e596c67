"""Token-stream data model: token events, traces, alignment and sentence spans."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

SENTENCE_FINAL = ".!?"
_DIST_TOL = 1e-9


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class TokenEvent:
    index: int
    text: str
    probability: float
    top_alternatives: tuple[tuple[str, float], ...] = ()
    char_start: int = 0
    char_end: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"token {self.index}: probability {self.probability} outside [0, 1]")
        total = 0.0
        for _, p in self.top_alternatives:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"token {self.index}: alternative probability {p} outside [0, 1]")
            total += p
        if total > 1.0 + _DIST_TOL:
            raise ValueError(f"token {self.index}: alternatives sum to {total} > 1")

    @property
    def logprob(self) -> float:
        return math.log(self.probability) if self.probability > 0 else -math.inf


@dataclass(frozen=True)
class SentenceSpan:
    token_start: int
    token_end: int
    revised: bool = False


@dataclass(frozen=True)
class GenerationTrace:
    tokens: tuple[TokenEvent, ...] = ()
    text: str = ""

    def __post_init__(self) -> None:
        pos = 0
        for i, tok in enumerate(self.tokens):
            if tok.index != i:
                raise ValueError(f"token indices not contiguous at {i}")
            if tok.char_start != pos or self.text[tok.char_start:tok.char_end] != tok.text:
                raise ValueError(f"token {i} does not align with trace text")
            pos = tok.char_end
        if pos != len(self.text):
            raise ValueError("token texts do not cover the trace text")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_pieces(
        cls, pieces: Iterable[tuple[str, float] | tuple[str, float, Sequence[tuple[str, float]]]]
    ) -> GenerationTrace:
        """Build a trace from ``(text, probability[, alternatives])`` tuples."""
        items = [(p[0], p[1], tuple(tuple(a) for a in p[2]) if len(p) > 2 else ()) for p in pieces]
        texts = [t for t, _, _ in items]
        full = "".join(texts)
        spans = align_tokens(texts, full)
        tokens = tuple(
            TokenEvent(i, t, float(p), alts, s, e)
            for i, ((t, p, alts), (s, e)) in enumerate(zip(items, spans))
        )
        return cls(tokens, full)

    @classmethod
    def from_events(cls, events: Iterable[TokenEvent]) -> GenerationTrace:
        """Re-index events (e.g. collected from several streams) into one trace."""
        return cls.from_pieces((e.text, e.probability, e.top_alternatives) for e in events)

    def prefix(self, n: int) -> GenerationTrace:
        return GenerationTrace(self.tokens[:n], self.text[: self.tokens[n - 1].char_end] if n else "")

    @property
    def probabilities(self) -> list[float]:
        return [t.probability for t in self.tokens]

    def text_of(self, token_start: int, token_end: int) -> str:
        if token_start >= token_end:
            return ""
        return self.text[self.tokens[token_start].char_start : self.tokens[token_end - 1].char_end]

    # wire format -----------------------------------------------------------

    def to_record(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "tokens": [
                {
                    "text": t.text,
                    "logprob": t.logprob,
                    "top_alternatives": [
                        {"token": a, "logprob": math.log(p) if p > 0 else -math.inf}
                        for a, p in t.top_alternatives
                    ],
                }
                for t in self.tokens
            ],
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> GenerationTrace:
        """Parse one trace line; log-probabilities are exponentiated here."""
        pieces = []
        for tok in record.get("tokens", []):
            alts = tuple((a["token"], _prob(a["logprob"])) for a in tok.get("top_alternatives", []))
            pieces.append((tok["text"], _prob(tok["logprob"]), alts))
        trace = cls.from_pieces(pieces)
        if "text" in record and record["text"] != trace.text:
            raise AlignmentError("token texts do not reproduce the record text")
        return trace


def _prob(logprob: float) -> float:
    # wire logprobs occasionally come back as tiny positives
    return min(1.0, math.exp(logprob))


def align_tokens(token_texts: Sequence[str], full_text: str) -> list[tuple[int, int]]:
    """Map each token onto its half-open character span in ``full_text``."""
    spans = []
    pos = 0
    for i, tok in enumerate(token_texts):
        if not tok:
            raise AlignmentError(f"token {i} is empty")
        if not full_text.startswith(tok, pos):
            raise AlignmentError(f"token {i} {tok!r} does not match text at offset {pos}")
        spans.append((pos, pos + len(tok)))
        pos += len(tok)
    if pos != len(full_text):
        raise AlignmentError(f"text has {len(full_text) - pos} unmatched trailing characters")
    return spans


def ends_sentence(trace: GenerationTrace, i: int) -> bool:
    """True if a sentence boundary falls after token ``i``.

    The token must end in sentence-final punctuation (trailing whitespace inside
    the token is allowed) and be followed by whitespace or end of text.
    """
    tok = trace.tokens[i]
    stripped = tok.text.rstrip()
    if not stripped or stripped[-1] not in SENTENCE_FINAL:
        return False
    if len(stripped) < len(tok.text):
        return True
    return tok.char_end == len(trace.text) or trace.text[tok.char_end].isspace()


def segment_sentences(trace: GenerationTrace) -> list[SentenceSpan]:
    spans = []
    start = 0
    for i in range(len(trace.tokens)):
        if ends_sentence(trace, i):
            spans.append(SentenceSpan(start, i + 1))
            start = i + 1
    if start < len(trace.tokens):
        spans.append(SentenceSpan(start, len(trace.tokens)))
    return spans


def sentence_index_of(sentences: Sequence[SentenceSpan], token_index: int) -> int:
    for j, s in enumerate(sentences):
        if s.token_start <= token_index < s.token_end:
            return j
    raise IndexError(f"token {token_index} is not inside any sentence")


def read_traces(path: str | Path) -> Iterator[dict[str, Any]]:
    """Yield raw JSON records, one per non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc


def load_traces(path: str | Path) -> list[GenerationTrace]:
    return [GenerationTrace.from_record(r) for r in read_traces(path)]


def dump_traces(traces: Iterable[GenerationTrace], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace.to_record()) + "\n")
