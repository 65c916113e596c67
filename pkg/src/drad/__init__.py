"""Entity-level real-time hallucination detection with dynamic retrieval-augmented correction."""
from .entities import EntitySpan, EntityStream, RuleRecognizer, SidecarRecognizer, char_span_to_token_span, recognize_entities
from .evaluation import auc, evaluate_detection, evaluate_policy, extract_answer, qa_metrics
from .gateway import GenerationRequest, MockGateway, MockScript, RemoteGateway
from .policies import (
    Policy,
    PolicyKind,
    PolicyRun,
    PromptTemplate,
    build_correction_prompt,
    count_retrievals,
    formulate_query,
    run_policy,
    truncate_at,
)
from .retrieval import IndexHandle, Passage, PassageHit, build_index, search, segment_corpus
from .scoring import (
    DetectionConfig,
    HallucinationVerdict,
    Pooling,
    baseline_score,
    detect,
    entity_entropy,
    entity_probability,
    pool,
    score_passage,
    token_entropy,
)
from .trace import GenerationTrace, SentenceSpan, TokenEvent, align_tokens, segment_sentences

__version__ = "0.1.0"

__all__ = [
    "DetectionConfig",
    "EntitySpan",
    "EntityStream",
    "GenerationRequest",
    "GenerationTrace",
    "HallucinationVerdict",
    "IndexHandle",
    "MockGateway",
    "MockScript",
    "Passage",
    "PassageHit",
    "Policy",
    "PolicyKind",
    "PolicyRun",
    "Pooling",
    "PromptTemplate",
    "RemoteGateway",
    "RuleRecognizer",
    "SentenceSpan",
    "SidecarRecognizer",
    "TokenEvent",
    "align_tokens",
    "auc",
    "baseline_score",
    "build_correction_prompt",
    "build_index",
    "char_span_to_token_span",
    "count_retrievals",
    "detect",
    "entity_entropy",
    "entity_probability",
    "evaluate_detection",
    "evaluate_policy",
    "extract_answer",
    "formulate_query",
    "pool",
    "qa_metrics",
    "recognize_entities",
    "run_policy",
    "score_passage",
    "search",
    "segment_corpus",
    "segment_sentences",
    "token_entropy",
    "truncate_at",
]
