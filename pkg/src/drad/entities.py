"""Named-entity spans over generation traces.

Two recognizer backends share one call signature, ``recognizer(trace) -> list[EntitySpan]``:

* :class:`RuleRecognizer` -- dependency-free capitalization / number / acronym rules.
* :class:`SidecarRecognizer` -- spans produced offline by any NER tool, stored as
  JSON lines keyed by the SHA-256 of the text.

:class:`EntityStream` wraps either backend for token-by-token use and only emits a
span once its right boundary is closed.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Collection, Iterable, Protocol

from .trace import SENTENCE_FINAL, GenerationTrace


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class EntitySpan:
    token_start: int
    token_end: int
    char_start: int
    char_end: int
    label: str
    surface: str


class Recognizer(Protocol):
    def __call__(self, trace: GenerationTrace) -> list[EntitySpan]: ...


def char_span_to_token_span(trace: GenerationTrace, char_start: int, char_end: int) -> tuple[int, int]:
    """Smallest token range whose characters cover ``[char_start, char_end)``."""
    if not 0 <= char_start < char_end <= len(trace.text):
        raise OutOfRange(f"character span ({char_start}, {char_end}) outside text of length {len(trace.text)}")
    first = last = None
    for tok in trace.tokens:
        if tok.char_end > char_start and first is None:
            first = tok.index
        if tok.char_start < char_end:
            last = tok.index
        else:
            break
    return first, last + 1


def spans_from_char_ranges(
    trace: GenerationTrace, ranges: Iterable[tuple[int, int, str]]
) -> list[EntitySpan]:
    """Map character-level mentions onto tokens; later mentions that collide on a token are dropped."""
    out: list[EntitySpan] = []
    for cs, ce, label in sorted(ranges):
        ts, te = char_span_to_token_span(trace, cs, ce)
        if out and ts < out[-1].token_end:
            continue
        out.append(EntitySpan(ts, te, cs, ce, label, trace.text[cs:ce]))
    return out


# --------------------------------------------------------------------------- rules

_WORD = re.compile(r"[^\W_]+(?:['’-][^\W_]+)*")
_NUMBER = re.compile(r"\d+(?:[.,]\d+)*")
_MONTHS = {
    "january", "february", "march", "april", "may", "june", "july",
    "august", "september", "october", "november", "december",
}
_CONNECTORS = {"of", "de", "da", "del", "van", "von", "der", "la", "le", "du", "bin"}
_LEADING_DETERMINERS = {"The", "A", "An"}
_NOT_ENTITIES = {"I"}


class RuleRecognizer:
    """Capitalized runs, all-caps acronyms and numbers/dates.

    A single capitalized word at the start of a sentence is ignored (it is
    usually just sentence case); multi-word runs and acronyms are kept wherever
    they occur.
    """

    def __init__(self, labels: Collection[str] | None = None):
        self.labels = frozenset(labels) if labels else None

    def __call__(self, trace: GenerationTrace) -> list[EntitySpan]:
        mentions = [m for m in self.find(trace.text) if self.labels is None or m[2] in self.labels]
        return spans_from_char_ranges(trace, mentions)

    def find(self, text: str) -> list[tuple[int, int, str]]:
        words = [(m.start(), m.end(), m.group()) for m in _WORD.finditer(text)]
        mentions: list[tuple[int, int, str]] = []
        i = 0
        while i < len(words):
            s, e, w = words[i]
            if _NUMBER.fullmatch(w):
                label = "DATE" if len(w) == 4 and w[:2] in ("10", "11", "12", "13", "14", "15", "16", "17", "18", "19", "20") else "CARDINAL"
                mentions.append((s, e, label))
                i += 1
                continue
            if not _is_capitalized(w):
                i += 1
                continue
            j = self._extend_run(text, words, i)
            run = words[i:j]
            while run and run[0][2] in _LEADING_DETERMINERS and len(run) > 1:
                run = run[1:]
            i = j
            if run[0][2].lower() in _MONTHS:
                start, end, label = self._date(text, words, words.index(run[0]), run)
                prev = mentions[-1] if mentions else None
                # day-first form: "4 July 1950"
                if prev and prev[2] == "CARDINAL" and prev[1] - prev[0] <= 2 and text[prev[1]:start] == " ":
                    start = mentions.pop()[0]
                mentions.append((start, end, label))
                continue
            if len(run) == 1:
                w = run[0][2]
                if w in _NOT_ENTITIES or w in _LEADING_DETERMINERS:
                    continue
                if _is_acronym(w):
                    mentions.append((run[0][0], run[0][1], "ORG"))
                    continue
                if _at_sentence_start(text, run[0][0]):
                    continue
            mentions.append((run[0][0], run[-1][1], "NAME"))
        # a month run may have swallowed a following number
        mentions.sort()
        merged: list[tuple[int, int, str]] = []
        for m in mentions:
            if merged and m[0] < merged[-1][1]:
                continue
            merged.append(m)
        return merged

    @staticmethod
    def _extend_run(text: str, words: list, i: int) -> int:
        j = i + 1
        while j < len(words):
            gap = text[words[j - 1][1] : words[j][0]]
            if gap != " ":
                break
            w = words[j][2]
            if _is_capitalized(w):
                j += 1
            elif w in _CONNECTORS and j + 1 < len(words) and _is_capitalized(words[j + 1][2]) \
                    and text[words[j][1] : words[j + 1][0]] == " ":
                j += 2
            else:
                break
        return j

    @staticmethod
    def _date(text: str, words: list, k: int, run: list) -> tuple[int, int, str]:
        # "March", "March 3", "March 3, 1990", "March 1990"
        start, end = run[0][0], run[0][1]
        k += 1
        if k < len(words) and text[end : words[k][0]] == " " and _NUMBER.fullmatch(words[k][2]):
            end = words[k][1]
            k += 1
            if k < len(words) and text[end : words[k][0]] in (", ", " ") and _NUMBER.fullmatch(words[k][2]) \
                    and len(words[k][2]) == 4:
                end = words[k][1]
        return start, end, "DATE"


def _is_capitalized(w: str) -> bool:
    return w[0].isupper()


def _is_acronym(w: str) -> bool:
    letters = [c for c in w if c.isalpha()]
    return len(letters) >= 2 and all(c.isupper() for c in letters)


def _at_sentence_start(text: str, pos: int) -> bool:
    k = pos - 1
    while k >= 0 and text[k] in " \t\n\"'(“":
        k -= 1
    if k < 0:
        return True
    return text[k] in SENTENCE_FINAL and k + 1 < pos and text[k + 1].isspace()


# --------------------------------------------------------------------------- sidecar


def text_sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class SidecarRecognizer:
    """Entity spans read from a JSON-lines file of precomputed annotations.

    Each line is ``{"text_sha256": ..., "entities": [{"char_start", "char_end", "label"}]}``.
    Texts without an annotation (e.g. partial text while streaming) are handed
    to ``fallback`` when one is given, otherwise they have no entities.
    """

    def __init__(
        self,
        annotations: dict[str, list[tuple[int, int, str]]],
        fallback: Callable[[GenerationTrace], list[EntitySpan]] | None = None,
        labels: Collection[str] | None = None,
    ):
        self.annotations = annotations
        self.fallback = fallback
        self.labels = frozenset(labels) if labels else None

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> SidecarRecognizer:
        annotations = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                annotations[rec["text_sha256"]] = [
                    (int(e["char_start"]), int(e["char_end"]), str(e["label"])) for e in rec["entities"]
                ]
        return cls(annotations, **kwargs)

    def __call__(self, trace: GenerationTrace) -> list[EntitySpan]:
        found = self.annotations.get(text_sha256(trace.text))
        if found is None:
            return self.fallback(trace) if self.fallback else []
        return spans_from_char_ranges(
            trace, [m for m in found if self.labels is None or m[2] in self.labels]
        )


def write_sidecar(path: str | Path, items: Iterable[tuple[str, Iterable[tuple[int, int, str]]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text, ents in items:
            rec = {
                "text_sha256": text_sha256(text),
                "entities": [{"char_start": s, "char_end": e, "label": lab} for s, e, lab in ents],
            }
            fh.write(json.dumps(rec) + "\n")


def recognize_entities(trace: GenerationTrace, recognizer: Recognizer | None = None) -> list[EntitySpan]:
    return (recognizer or RuleRecognizer())(trace)


# --------------------------------------------------------------------------- streaming


class EntityStream:
    """Incremental wrapper: feed the growing trace after each token.

    ``closed(trace)`` returns spans not seen before whose right boundary is
    settled, i.e. at least one later token exists or ``final`` is set.
    """

    def __init__(self, recognizer: Recognizer):
        self.recognizer = recognizer
        self._seen: set[tuple[int, int, int, int]] = set()

    def closed(self, trace: GenerationTrace, final: bool = False) -> list[EntitySpan]:
        fresh = []
        for span in self.recognizer(trace):
            if span.token_end >= len(trace) and not final:
                continue
            key = (span.token_start, span.token_end, span.char_start, span.char_end)
            if key not in self._seen:
                self._seen.add(key)
                fresh.append(span)
        return fresh

    def rewind(self, token_index: int) -> None:
        """Forget spans reaching past ``token_index`` (the output was truncated there)."""
        self._seen = {k for k in self._seen if k[1] <= token_index}
