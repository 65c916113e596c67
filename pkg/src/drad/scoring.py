"""Entity-level hallucination scoring and token-level baseline detectors.

All passage-level scores are oriented "higher = more likely hallucinated".
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Any, Sequence

from .entities import EntitySpan
from .trace import GenerationTrace, TokenEvent

_DIST_TOL = 1e-9
# residual mass at or below this is float rounding from summing the alternatives
_RESIDUAL_FLOOR = 1e-15


class EmptyInput(ValueError):
    pass


class InvalidDistribution(ValueError):
    pass


class Pooling(str, Enum):
    MAX = "max"
    MIN = "min"
    FIRST = "first"
    AVERAGE = "average"


@dataclass(frozen=True)
class DetectionConfig:
    theta1: float = 0.40
    theta2: float = math.log(50)
    prob_pooling: Pooling = Pooling.AVERAGE
    entropy_pooling: Pooling = Pooling.MAX
    entropy_enabled: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.theta1 <= 1.0:
            raise ValueError(f"theta1 must be in [0, 1], got {self.theta1}")
        if self.theta2 < 0:
            raise ValueError(f"theta2 must be >= 0, got {self.theta2}")
        object.__setattr__(self, "prob_pooling", Pooling(self.prob_pooling))
        object.__setattr__(self, "entropy_pooling", Pooling(self.entropy_pooling))


@dataclass(frozen=True)
class HallucinationVerdict:
    entity: EntitySpan
    entity_probability: float
    entity_entropy: float
    is_hallucination: bool

    def to_report(self, config: DetectionConfig) -> dict[str, Any]:
        return {
            "entity_surface": self.entity.surface,
            "token_start": self.entity.token_start,
            "token_end": self.entity.token_end,
            "p_entity": self.entity_probability,
            "h_entity": self.entity_entropy,
            "is_hallucination": self.is_hallucination,
            "theta1": config.theta1,
            "theta2": config.theta2,
        }


def pool(values: Sequence[float], method: Pooling | str) -> float:
    if not values:
        raise EmptyInput("cannot pool an empty list")
    method = Pooling(method)
    if method is Pooling.MAX:
        return max(values)
    if method is Pooling.MIN:
        return min(values)
    if method is Pooling.FIRST:
        return values[0]
    # clamp: rounding must not push the mean outside [min, max]
    mean = math.fsum(values) / len(values)
    return min(max(mean, min(values)), max(values))


def _span_tokens(trace: GenerationTrace, span: EntitySpan) -> Sequence[TokenEvent]:
    return trace.tokens[span.token_start : span.token_end]


def entity_probability(trace: GenerationTrace, span: EntitySpan, method: Pooling | str) -> float:
    return pool([t.probability for t in _span_tokens(trace, span)], method)


def token_entropy(event: TokenEvent) -> float:
    """Entropy (nats) of the token's observed alternatives plus one residual-mass term.

    The probability mass not covered by the alternatives is lumped into a single
    pseudo-token, so the result is a lower bound on the full-vocabulary entropy.
    A token with no alternatives is treated as a one-element distribution over
    its own sampled probability.
    """
    probs = [p for _, p in event.top_alternatives] or [event.probability]
    if any(p < 0 for p in probs):
        raise InvalidDistribution(f"negative probability in {probs}")
    total = math.fsum(probs)
    if total > 1.0 + _DIST_TOL:
        raise InvalidDistribution(f"probabilities sum to {total} > 1")
    residual = 1.0 - total
    if residual <= _RESIDUAL_FLOOR:
        residual = 0.0
    # equal probabilities are grouped and -ln p is taken as ln(1/p): for a uniform
    # distribution over k outcomes, k * fl(1/k) and 1 / fl(1/k) both round back
    # exactly, so the result is exactly ln k for small k
    counts = Counter(p for p in (*probs, residual) if p > 0)
    return math.fsum((n * p) * _neg_log(p) for p, n in counts.items())


def _neg_log(p: float) -> float:
    inv = 1.0 / p
    return math.log(inv) if math.isfinite(inv) else -math.log(p)


def entity_entropy(trace: GenerationTrace, span: EntitySpan, method: Pooling | str) -> float:
    return pool([token_entropy(t) for t in _span_tokens(trace, span)], method)


def is_hallucinated(p_entity: float, h_entity: float, config: DetectionConfig) -> bool:
    return p_entity < config.theta1 or (config.entropy_enabled and h_entity > config.theta2)


def detect(trace: GenerationTrace, span: EntitySpan, config: DetectionConfig) -> HallucinationVerdict:
    p = entity_probability(trace, span, config.prob_pooling)
    h = entity_entropy(trace, span, config.entropy_pooling)
    return HallucinationVerdict(span, p, h, is_hallucinated(p, h, config))


def score_passage(trace: GenerationTrace, entities: Sequence[EntitySpan], config: DetectionConfig) -> float:
    """Max over entities of ``1 - P(E)``; falls back to ``1 - min token probability``."""
    if entities:
        return max(1.0 - entity_probability(trace, e, config.prob_pooling) for e in entities)
    if not trace.tokens:
        return 0.0
    return 1.0 - min(trace.probabilities)


def score_passage_entropy(
    trace: GenerationTrace, entities: Sequence[EntitySpan], config: DetectionConfig
) -> float:
    """Entropy counterpart of :func:`score_passage`: max over entities of ``H(E)``."""
    if entities:
        return max(entity_entropy(trace, e, config.entropy_pooling) for e in entities)
    if not trace.tokens:
        return 0.0
    return max(token_entropy(t) for t in trace.tokens)


BASELINES = ("avg_prob", "min_prob", "avg_entropy", "max_entropy")


def baseline_score(trace: GenerationTrace, kind: str) -> float:
    if not trace.tokens:
        raise EmptyInput("trace has no tokens")
    if kind == "avg_prob":
        return 1.0 - pool(trace.probabilities, Pooling.AVERAGE)
    if kind == "min_prob":
        return 1.0 - pool(trace.probabilities, Pooling.MIN)
    if kind == "avg_entropy":
        return pool([token_entropy(t) for t in trace.tokens], Pooling.AVERAGE)
    if kind == "max_entropy":
        return pool([token_entropy(t) for t in trace.tokens], Pooling.MAX)
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
