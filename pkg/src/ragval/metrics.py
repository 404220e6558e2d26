"""Embedding-based functionality metrics.

All four metric directions (query->context, answer->context, context->answer,
answer->query) are built from one primitive: the per-sentence profile of
maximum cosine similarity against the target set. Aggregations are the simple
mean, an explicit weighted mean, or the minimax (the worst-covered sentence).
The NLI variant of groundedness maps the entailment boundary distance through
a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .providers import EmbeddingVector, NliJudgment


class MetricError(Exception):
    pass


DEFAULT_FLAG_THRESHOLD = 0.5


@dataclass
class SentenceSet:
    """Sentences of one role (query/context/answer) with their embeddings."""

    role: str  # "query" | "context" | "answer"
    sentences: list[str]
    embeddings: np.ndarray  # len(sentences) x d, rows need not be unit norm
    model_id: str
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=float)
        if len(self.sentences) == 0:
            raise MetricError(f"empty {self.role} sentence set")
        if self.embeddings.shape[0] != len(self.sentences):
            raise MetricError("one embedding per sentence required")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if len(self.weights) != len(self.sentences):
                raise MetricError("weight length mismatch")
            if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
                raise MetricError("weights must be >= 0 and sum to 1")

    @classmethod
    def from_texts(cls, role: str, sentences: list[str], embedder,
                   weights=None) -> "SentenceSet":
        vecs = embedder.embed_batch(list(sentences))
        return cls(role=role, sentences=list(sentences),
                   embeddings=np.stack([v.as_array() for v in vecs]),
                   model_id=vecs[0].model_id, weights=weights)


@dataclass
class MetricScore:
    value: float
    aggregation: str  # "mean" | "weighted" | "minimax"
    per_sentence: list[dict] = field(default_factory=list)
    flagged: list[int] = field(default_factory=list)
    detail: dict = field(default_factory=dict)


def cosine_similarity(u: EmbeddingVector, v: EmbeddingVector) -> float:
    if u.model_id != v.model_id:
        raise MetricError(f"cannot compare embeddings from {u.model_id} and {v.model_id}")
    if u.dim != v.dim:
        raise MetricError("embedding dimension mismatch")
    a, b = u.as_array(), v.as_array()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise MetricError("cosine similarity undefined for zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def _similarity_matrix(source: SentenceSet, target: SentenceSet) -> np.ndarray:
    if source.model_id != target.model_id:
        raise MetricError("sentence sets embedded with different models")
    a, b = source.embeddings, target.embeddings
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise MetricError("zero-norm embedding in sentence set")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def max_sim_profile(source: SentenceSet, target: SentenceSet) -> list[dict]:
    """For each source sentence: its best cosine match over the target set.

    Argmax ties break to the lowest target index.
    """
    sims = _similarity_matrix(source, target)
    profile = []
    for i in range(sims.shape[0]):
        j = int(np.argmax(sims[i]))
        profile.append({"index": i, "sentence": source.sentences[i],
                        "s_max": float(sims[i, j]), "argmax": j})
    return profile


def aggregate(values: list[float], kind: str, weights=None) -> float:
    if kind == "mean":
        return float(np.mean(values))
    if kind == "weighted":
        if weights is None:
            raise MetricError("weighted aggregation requires weights")
        w = np.asarray(weights, dtype=float)
        if len(w) != len(values):
            raise MetricError("weight length mismatch")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise MetricError("weights must be >= 0 and sum to 1")
        return float(np.dot(w, values))
    if kind == "minimax":
        return float(np.min(values))
    raise MetricError(f"unknown aggregation kind: {kind}")


def _profile_score(source: SentenceSet, target: SentenceSet, kind: str,
                   flag_threshold: float) -> MetricScore:
    profile = max_sim_profile(source, target)
    values = [p["s_max"] for p in profile]
    weights = source.weights if kind == "weighted" else None
    value = aggregate(values, kind, weights)
    flagged = [p["index"] for p in profile if p["s_max"] < flag_threshold]
    return MetricScore(value=value, aggregation=kind, per_sentence=profile, flagged=flagged)


def context_relevancy(query: SentenceSet, context: SentenceSet, kind: str = "mean",
                      flag_threshold: float = DEFAULT_FLAG_THRESHOLD) -> MetricScore:
    """How well the retrieved context addresses each query sentence."""
    if query.role != "query" or context.role != "context":
        raise MetricError("context_relevancy scores query against context")
    return _profile_score(query, context, kind, flag_threshold)


def groundedness_sim(answer: SentenceSet, context: SentenceSet,
                     flag_threshold: float = DEFAULT_FLAG_THRESHOLD) -> MetricScore:
    """Mean best-match support of each answer sentence by the context.

    The least-supported sentence index is reported in detail["least_grounded"];
    it and every sentence under the flag threshold are candidate fabrications.
    """
    if answer.role != "answer" or context.role != "context":
        raise MetricError("groundedness scores answer against context")
    score = _profile_score(answer, context, "mean", flag_threshold)
    values = [p["s_max"] for p in score.per_sentence]
    score.detail["least_grounded"] = int(np.argmin(values))
    return score


def groundedness_nli(answer: SentenceSet, context: SentenceSet, nli_provider,
                     flag_threshold: float = DEFAULT_FLAG_THRESHOLD,
                     premise_top_k: int = 3) -> MetricScore:
    """Sigmoid of the entailment boundary distance, averaged over sentences.

    Each answer sentence is the hypothesis; the context is the premise. When
    the context holds more than premise_top_k sentences, the premise is
    truncated to the top-k most similar context sentences for that hypothesis
    (recorded in detail["premise_truncated"]).
    """
    if answer.role != "answer" or context.role != "context":
        raise MetricError("groundedness scores answer against context")
    sims = _similarity_matrix(answer, context)
    truncated = len(context.sentences) > premise_top_k
    per_sentence = []
    sigmas = []
    for i, hyp in enumerate(answer.sentences):
        if truncated:
            top = np.argsort(-sims[i], kind="stable")[:premise_top_k]
            premise = " ".join(context.sentences[int(j)] for j in sorted(top))
        else:
            premise = " ".join(context.sentences)
        try:
            judgment: NliJudgment = nli_provider.nli_score(premise, hyp)
        except Exception as exc:
            raise MetricError(f"NLI provider failed on answer sentence {i}: {exc}") from exc
        d = judgment.boundary_distance
        s = sigmoid(d)
        sigmas.append(s)
        per_sentence.append({"index": i, "sentence": hyp, "s_max": s,
                             "distance": d, "logit": judgment.entailment_logit})
    flagged = [p["index"] for p in per_sentence if p["s_max"] < flag_threshold]
    return MetricScore(value=float(np.mean(sigmas)), aggregation="mean",
                       per_sentence=per_sentence, flagged=flagged,
                       detail={"premise_truncated": truncated,
                               "least_grounded": int(np.argmin(sigmas))})


def sigmoid(d: float) -> float:
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


def completeness_sim(context: SentenceSet, answer: SentenceSet, kind: str = "mean",
                     flag_threshold: float = DEFAULT_FLAG_THRESHOLD) -> MetricScore:
    """How well each context sentence is covered by the answer."""
    if context.role != "context" or answer.role != "answer":
        raise MetricError("completeness scores context coverage by the answer")
    if kind not in ("mean", "weighted"):
        raise MetricError("completeness_sim supports mean or weighted aggregation")
    return _profile_score(context, answer, kind, flag_threshold)


def completeness_wasserstein(context: SentenceSet, answer: SentenceSet) -> float:
    """Uniform-weight transport cost between context and answer sentences.

    The ground metric is cosine distance 1 - sim; the value is the mean of
    all pairwise distances (lower = the answer tracks the context's
    information distribution more closely). Range [0, 2]; symmetric in its
    arguments.
    """
    sims = _similarity_matrix(context, answer)
    return float(np.mean(1.0 - sims))


def answer_relevancy(answer: SentenceSet, query: SentenceSet, kind: str = "mean",
                     flag_threshold: float = DEFAULT_FLAG_THRESHOLD) -> MetricScore:
    """How well each answer sentence addresses the query."""
    if answer.role != "answer" or query.role != "query":
        raise MetricError("answer_relevancy scores answer against query")
    return _profile_score(answer, query, kind, flag_threshold)
