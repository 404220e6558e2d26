"""The system under test: an external RAG callable.

The toolkit never embeds a generator. Real systems are reached over HTTP
with the contract  POST {query, context?} -> {answer, retrieved_context[]};
the built-in retrieval mock answers from the corpus deterministically so the
pipeline and tests run hermetically.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import httpx
import numpy as np


class RunnerError(Exception):
    pass


@dataclass
class RagResponse:
    answer: str
    retrieved_context: list[str]  # sentences, in retrieval order


class HttpRagRunner:
    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2,
                 backoff: float = 0.2, transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint
        self.retries = retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def run(self, query: str, context: list[str] | None = None) -> RagResponse:
        payload: dict = {"query": query}
        if context is not None:
            payload["context"] = context
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=payload)
                resp.raise_for_status()
                data = resp.json()
                return RagResponse(answer=data["answer"],
                                   retrieved_context=list(data.get("retrieved_context", [])))
            except (httpx.HTTPError, KeyError, json.JSONDecodeError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise RunnerError(f"RAG endpoint {self.endpoint} failed: {last}")


class MockRagRunner:
    """Deterministic retrieval-and-answer stand-in over a corpus.

    Retrieval ranks chunks by cosine similarity between the query embedding
    and each chunk embedding; the answer restates the best chunk's leading
    sentences. Pure function of (corpus, embedder, query).
    """

    def __init__(self, corpus, embedder, top_k: int = 3, answer_sentences: int = 2):
        self.corpus = corpus
        self.embedder = embedder
        self.top_k = top_k
        self.answer_sentences = answer_sentences
        texts = [c.text for c in corpus.chunks]
        vecs = embedder.embed_batch(texts)
        self._matrix = np.stack([v.as_array() for v in vecs])
        norms = np.linalg.norm(self._matrix, axis=1)
        self._matrix = self._matrix / norms[:, None]

    def run(self, query: str, context: list[str] | None = None) -> RagResponse:
        q = self.embedder.embed_one(query).as_array()
        qn = np.linalg.norm(q)
        if qn == 0:
            raise RunnerError("query embedded to zero vector")
        sims = self._matrix @ (q / qn)
        order = np.argsort(-sims, kind="stable")[:self.top_k]
        retrieved: list[str] = []
        for idx in order:
            retrieved.extend(s.text for s in self.corpus.chunks[int(idx)].sentences)
        best = self.corpus.chunks[int(order[0])]
        answer = " ".join(s.text for s in best.sentences[:self.answer_sentences])
        return RagResponse(answer=answer, retrieved_context=retrieved)


class EchoRagRunner:
    """Echoes the query back as the answer; handy for delta fixtures."""

    def run(self, query: str, context: list[str] | None = None) -> RagResponse:
        return RagResponse(answer=query, retrieved_context=list(context or [query]))
