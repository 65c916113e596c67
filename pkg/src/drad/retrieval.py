"""Passage corpus, BM25 inverted index and top-k search.

Documents are cut into passages of at most 100 whitespace tokens. The index is a
self-contained directory (``meta.json``, ``passages.jsonl``, ``postings.json``)
that is rebuilt in full on every build.
"""
from __future__ import annotations

import heapq
import json
import math
import os
import re
import shutil
import tempfile
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

PASSAGE_TOKENS = 100
K1 = 1.2
B = 0.75
INDEX_FORMAT = 1

_TERM = re.compile(r"[^\W_]+")


class IngestError(ValueError):
    pass


class DuplicateId(ValueError):
    pass


class IndexClosed(RuntimeError):
    pass


@dataclass(frozen=True)
class Passage:
    id: str
    doc_title: str
    text: str
    token_count: int


@dataclass(frozen=True)
class PassageHit:
    passage: Passage
    score: float
    rank: int


def analyze(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TERM.findall(text.lower())


def segment_corpus(
    documents: Iterable[tuple[str, str | bytes]], size: int = PASSAGE_TOKENS
) -> Iterator[Passage]:
    for title, body in documents:
        if isinstance(body, bytes):
            try:
                body = body.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise IngestError(f"document {title!r} is not valid UTF-8: {exc}") from exc
        words = body.split()
        for seq, start in enumerate(range(0, len(words), size)):
            chunk = words[start : start + size]
            yield Passage(f"{title}#{seq}", title, " ".join(chunk), len(chunk))


def read_corpus(path: str | Path) -> Iterator[tuple[str, str | bytes]]:
    """Yield ``(title, body)`` from a JSON-lines file or a directory of text files."""
    path = Path(path)
    if path.is_dir():
        for f in sorted(p for p in path.iterdir() if p.is_file()):
            yield f.stem, f.read_bytes()
        return
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from exc
            yield str(rec.get("id") or rec["title"]), rec["text"]


def bm25_idf(n_docs: int, df: int) -> float:
    # +1 inside the log keeps idf positive even for terms in most passages
    return math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)


def build_index(passages: Iterable[Passage], path: str | Path) -> IndexHandle:
    """Write a fresh index directory at ``path``, replacing any previous one."""
    path = Path(path)
    rows = []
    ids = set()
    postings: dict[str, list[list[int]]] = defaultdict(list)
    for doc, p in enumerate(passages):
        if p.id in ids:
            raise DuplicateId(f"duplicate passage id {p.id!r}")
        ids.add(p.id)
        terms = analyze(p.text)
        for term, tf in sorted(Counter(terms).items()):
            postings[term].append([doc, tf])
        rows.append({"id": p.id, "doc_title": p.doc_title, "text": p.text,
                     "token_count": p.token_count, "length": len(terms)})

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".drad-index-", dir=path.parent))
    try:
        with open(tmp / "passages.jsonl", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        with open(tmp / "postings.json", "w", encoding="utf-8") as fh:
            json.dump(postings, fh, sort_keys=True, ensure_ascii=False)
        meta = {"format": INDEX_FORMAT, "k1": K1, "b": B, "doc_count": len(rows)}
        (tmp / "meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except OSError:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return IndexHandle.open(path)


class IndexHandle:
    """Read-only view of a built index; safe for concurrent searches."""

    def __init__(self, passages: list[Passage], lengths: list[int],
                 postings: dict[str, list[tuple[int, int]]], k1: float = K1, b: float = B):
        self.passages = passages
        self.lengths = lengths
        self.postings = postings
        self.k1 = k1
        self.b = b
        self.avgdl = sum(lengths) / len(lengths) if lengths else 0.0
        self._closed = False

    @classmethod
    def open(cls, path: str | Path) -> IndexHandle:
        path = Path(path)
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
        if meta.get("format") != INDEX_FORMAT:
            raise ValueError(f"{path}: unsupported index format {meta.get('format')!r}")
        passages, lengths = [], []
        with open(path / "passages.jsonl", encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                passages.append(Passage(row["id"], row["doc_title"], row["text"], row["token_count"]))
                lengths.append(row["length"])
        with open(path / "postings.json", encoding="utf-8") as fh:
            postings = {t: [(d, tf) for d, tf in plist] for t, plist in json.load(fh).items()}
        return cls(passages, lengths, postings, meta["k1"], meta["b"])

    @property
    def doc_count(self) -> int:
        return len(self.passages)

    def close(self) -> None:
        self._closed = True

    def __enter__(self) -> IndexHandle:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def scores(self, query: str) -> dict[int, float]:
        """BM25 score of every passage sharing at least one term with ``query``.

        Repeated query terms contribute once per occurrence.
        """
        if self._closed:
            raise IndexClosed("index handle is closed")
        n = self.doc_count
        acc: dict[int, float] = defaultdict(float)
        for term in analyze(query):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = bm25_idf(n, len(plist))
            for doc, tf in plist:
                norm = self.k1 * (1.0 - self.b + self.b * self.lengths[doc] / self.avgdl)
                acc[doc] += idf * tf * (self.k1 + 1.0) / (tf + norm)
        return acc

    def search(self, query: str, k: int = 3) -> list[PassageHit]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        scored = self.scores(query)
        top = heapq.nsmallest(k, scored.items(), key=lambda kv: (-kv[1], self.passages[kv[0]].id))
        return [PassageHit(self.passages[doc], score, rank) for rank, (doc, score) in enumerate(top, 1)]


def search(index: IndexHandle, query: str, k: int = 3) -> list[PassageHit]:
    return index.search(query, k)
