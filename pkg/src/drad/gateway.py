"""Language-model backends that expose per-token log-probabilities.

``MockGateway`` replays scripted responses and is what the tests and the
offline CLI use. ``RemoteGateway`` talks to an HTTP endpoint speaking the
completions or chat-completions wire shape with ``logprobs`` enabled.

Both return :class:`~drad.trace.GenerationTrace` objects with linear
probabilities; wire log-probabilities are exponentiated on the way in.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Protocol, Sequence

import httpx

from .trace import GenerationTrace, TokenEvent

log = logging.getLogger(__name__)

# (text, logprob, ((alt_text, alt_logprob), ...))
WireToken = tuple[str, float, tuple[tuple[str, float], ...]]
OnToken = Callable[[TokenEvent], None]


class GatewayError(RuntimeError):
    partial_run: Any = None


class AuthError(GatewayError):
    pass


class RateLimited(GatewayError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class TransportError(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass


class NoMatchingBranch(GatewayError):
    pass


class StopGeneration(Exception):
    """Raised from an ``on_token`` callback to cancel the stream after that token."""


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = 256
    stop_sequences: tuple[str, ...] = ()
    top_logprobs: int = 5
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.top_logprobs < 0:
            raise ValueError("top_logprobs must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))


class LlmGateway(Protocol):
    def generate(self, request: GenerationRequest) -> GenerationTrace: ...

    def stream_generate(self, request: GenerationRequest, on_token: OnToken) -> GenerationTrace: ...


def _prob(logprob: float) -> float:
    return min(1.0, math.exp(logprob))


def _event(index: int, pos: int, tok: WireToken) -> TokenEvent:
    text, lp, alts = tok
    probs = [(a, _prob(alp)) for a, alp in alts]
    total = math.fsum(p for _, p in probs)
    if total > 1.0:
        # rounded wire values can overshoot slightly
        probs = [(a, p / total) for a, p in probs]
    return TokenEvent(index, text, _prob(lp), tuple(probs), pos, pos + len(text))


def _emit(tokens: Iterable[WireToken], on_token: OnToken | None) -> GenerationTrace:
    events: list[TokenEvent] = []
    pos = 0
    for tok in tokens:
        if not tok[0]:
            continue
        ev = _event(len(events), pos, tok)
        events.append(ev)
        pos = ev.char_end
        if on_token is not None:
            try:
                on_token(ev)
            except StopGeneration:
                break
    return GenerationTrace(tuple(events), "".join(e.text for e in events))


def apply_stops(tokens: Sequence[WireToken], stop_sequences: Sequence[str], max_tokens: int) -> list[WireToken]:
    """Cut a token list at the first stop sequence (exclusive) and at ``max_tokens``."""
    text = "".join(t[0] for t in tokens)
    cut = len(text)
    for stop in stop_sequences:
        if stop:
            at = text.find(stop)
            if at != -1:
                cut = min(cut, at)
    out: list[WireToken] = []
    pos = 0
    for tok in tokens:
        if pos >= cut or len(out) >= max_tokens:
            break
        keep = tok[0][: cut - pos]
        out.append((keep, tok[1], tok[2]) if keep != tok[0] else tok)
        pos += len(tok[0])
    return out


# --------------------------------------------------------------------------- mock


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class MockBranch:
    """One scripted response.

    ``matcher`` is a substring of the prompt, a list of substrings that must all
    occur, or ``"sha256:<hex>"`` for an exact prompt hash. With ``continuation`` on, a prompt that already ends with the
    first *j* response tokens is answered with the remaining tokens (largest
    such *j*), so the mock behaves like a fixed model continuing its own output.
    """

    matcher: str | tuple[str, ...]
    tokens: tuple[WireToken, ...]
    continuation: bool = True

    def __post_init__(self) -> None:
        if not isinstance(self.matcher, str):
            object.__setattr__(self, "matcher", tuple(self.matcher))

    def matches(self, prompt: str) -> bool:
        if isinstance(self.matcher, tuple):
            return all(m in prompt for m in self.matcher)
        if self.matcher.startswith("sha256:"):
            return prompt_sha256(prompt) == self.matcher[len("sha256:"):]
        return self.matcher in prompt

    def respond(self, prompt: str) -> tuple[WireToken, ...]:
        if not self.continuation:
            return self.tokens
        prefix = ""
        prefixes = [0]
        for j, tok in enumerate(self.tokens, 1):
            prefix += tok[0]
            if prompt.endswith(prefix):
                prefixes.append(j)
        return self.tokens[max(prefixes):]


@dataclass(frozen=True)
class MockScript:
    branches: tuple[MockBranch, ...] = field(default_factory=tuple)

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> MockScript:
        branches = []
        for b in data["branches"]:
            tokens = tuple(
                (t["text"], float(t["logprob"]),
                 tuple((a["token"], float(a["logprob"])) for a in t.get("top_alternatives", [])))
                for t in b["tokens"]
            )
            branches.append(MockBranch(b["match"], tokens, b.get("continuation", True)))
        return cls(tuple(branches))

    @classmethod
    def load(cls, path: str | Path) -> MockScript:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict[str, Any]:
        return {
            "branches": [
                {
                    "match": b.matcher if isinstance(b.matcher, str) else list(b.matcher),
                    "continuation": b.continuation,
                    "tokens": [
                        {"text": t, "logprob": lp,
                         "top_alternatives": [{"token": a, "logprob": alp} for a, alp in alts]}
                        for t, lp, alts in b.tokens
                    ],
                }
                for b in self.branches
            ]
        }


class MockGateway:
    """Deterministic scripted backend; first matching branch wins."""

    def __init__(self, script: MockScript):
        self.script = script

    def respond(self, prompt: str) -> tuple[WireToken, ...]:
        for branch in self.script.branches:
            if branch.matches(prompt):
                return branch.respond(prompt)
        raise NoMatchingBranch(f"no mock branch matches prompt ending {prompt[-60:]!r}")

    def generate(self, request: GenerationRequest) -> GenerationTrace:
        return self.stream_generate(request, None)

    def stream_generate(self, request: GenerationRequest, on_token: OnToken | None) -> GenerationTrace:
        tokens = apply_stops(self.respond(request.prompt), request.stop_sequences, request.max_tokens)
        return _emit(tokens, on_token)


# --------------------------------------------------------------------------- remote


def _completions_tokens(logprobs: dict[str, Any] | None, text: str) -> list[WireToken]:
    if not logprobs or logprobs.get("token_logprobs") is None:
        if text:
            raise MalformedResponse("response carries no logprobs")
        return []
    tops = logprobs.get("top_logprobs") or [None] * len(logprobs["tokens"])
    out = []
    for tok, lp, top in zip(logprobs["tokens"], logprobs["token_logprobs"], tops):
        alts = tuple(sorted((top or {}).items(), key=lambda kv: -kv[1]))
        out.append((tok, float(lp), alts))
    return out


def _chat_tokens(logprobs: dict[str, Any] | None, text: str) -> list[WireToken]:
    content = (logprobs or {}).get("content")
    if content is None:
        if text:
            raise MalformedResponse("response carries no logprobs")
        return []
    return [
        (c["token"], float(c["logprob"]),
         tuple((a["token"], float(a["logprob"])) for a in c.get("top_logprobs") or ()))
        for c in content
    ]


class RemoteGateway:
    """HTTP backend for completions / chat-completions endpoints with logprobs.

    The credential comes from ``api_key`` or the ``DRAD_API_KEY`` environment
    variable and is never logged or written to transcripts. ``request_log``
    records one entry per HTTP attempt.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key: str | None = None,
        api_style: str = "completions",
        max_retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        transcript_path: str | Path | None = None,
    ):
        if api_style not in ("completions", "chat"):
            raise ValueError(f"api_style must be 'completions' or 'chat', got {api_style!r}")
        self.endpoint = endpoint
        self.model = model
        self._api_key = api_key if api_key is not None else os.environ.get("DRAD_API_KEY")
        self.api_style = api_style
        self.max_retries = max_retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep
        self.clock = clock
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.request_log: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        self._cooldown_until = 0.0

    def __repr__(self) -> str:
        return f"RemoteGateway(endpoint={self.endpoint!r}, model={self.model!r}, api_style={self.api_style!r})"

    def _body(self, request: GenerationRequest, stream: bool) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "stream": stream,
        }
        if request.stop_sequences:
            body["stop"] = list(request.stop_sequences)
        if self.api_style == "chat":
            body["messages"] = [{"role": "user", "content": request.prompt}]
            body["logprobs"] = True
            if request.top_logprobs:
                body["top_logprobs"] = request.top_logprobs
        else:
            body["prompt"] = request.prompt
            body["logprobs"] = request.top_logprobs
        return body

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def _check(self, resp: httpx.Response) -> None:
        if resp.status_code in (401, 403):
            raise AuthError(f"endpoint rejected credential (HTTP {resp.status_code})")
        if resp.status_code == 429:
            ra = resp.headers.get("retry-after")
            try:
                retry_after = float(ra) if ra is not None else None
            except ValueError:
                retry_after = None
            raise RateLimited("rate limited (HTTP 429)", retry_after)
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}")

    def _with_retries(self, attempt_fn: Callable[[], GenerationTrace]) -> GenerationTrace:
        for attempt in range(1, self.max_retries + 2):
            # a 429 seen by any thread pauses every thread sharing this gateway
            with self._lock:
                wait = self._cooldown_until - self.clock()
            if wait > 0:
                self.sleep(wait)
            try:
                trace = attempt_fn()
            except RateLimited as exc:
                self._record(attempt, "rate_limited")
                if attempt > self.max_retries:
                    raise
                delay = exc.retry_after if exc.retry_after is not None else self.backoff * 2 ** (attempt - 1)
                with self._lock:
                    self._cooldown_until = max(self._cooldown_until, self.clock() + delay)
                log.warning("rate limited; retrying in %.2fs (attempt %d)", delay, attempt)
                continue
            except httpx.HTTPError as exc:
                self._record(attempt, "transport_error")
                raise TransportError(str(exc)) from exc
            except GatewayError as exc:
                self._record(attempt, type(exc).__name__)
                raise
            self._record(attempt, "ok")
            return trace
        raise AssertionError("unreachable")

    def _record(self, attempt: int, outcome: str) -> None:
        with self._lock:
            self.request_log.append({"attempt": attempt, "outcome": outcome})

    def _parse_tokens(self, choice: dict[str, Any]) -> list[WireToken]:
        if self.api_style == "chat":
            text = (choice.get("message") or choice.get("delta") or {}).get("content") or ""
            return _chat_tokens(choice.get("logprobs"), text)
        return _completions_tokens(choice.get("logprobs"), choice.get("text") or "")

    def generate(self, request: GenerationRequest) -> GenerationTrace:
        def attempt() -> GenerationTrace:
            resp = self.client.post(self.endpoint, json=self._body(request, False), headers=self._headers())
            self._check(resp)
            try:
                choice = resp.json()["choices"][0]
            except (ValueError, KeyError, IndexError) as exc:
                raise MalformedResponse(f"unexpected response shape: {exc}") from exc
            return self._finish(request, self._parse_tokens(choice), None)

        return self._with_retries(attempt)

    def stream_generate(self, request: GenerationRequest, on_token: OnToken) -> GenerationTrace:
        def attempt() -> GenerationTrace:
            with self.client.stream(
                "POST", self.endpoint, json=self._body(request, True), headers=self._headers()
            ) as resp:
                if resp.status_code >= 400:
                    resp.read()
                self._check(resp)
                # leaving the with-block closes the connection, which cancels the stream
                return self._finish(request, self._iter_sse(resp), on_token)

        return self._with_retries(attempt)

    def _iter_sse(self, resp: httpx.Response) -> Iterator[WireToken]:
        for line in resp.iter_lines():
            if not line.startswith("data:"):
                continue
            payload = line[len("data:"):].strip()
            if payload == "[DONE]":
                return
            try:
                choice = json.loads(payload)["choices"][0]
            except (ValueError, KeyError, IndexError) as exc:
                raise MalformedResponse(f"bad stream chunk: {exc}") from exc
            yield from self._parse_tokens(choice)

    def _finish(self, request: GenerationRequest, tokens: Iterable[WireToken], on_token: OnToken | None) -> GenerationTrace:
        trace = _emit(tokens, on_token)
        if self.transcript_path is not None:
            rec = {
                "prompt": request.prompt,
                "max_tokens": request.max_tokens,
                "stop": list(request.stop_sequences),
                "temperature": request.temperature,
                "response": trace.to_record(),
            }
            with self._lock, open(self.transcript_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        return trace
