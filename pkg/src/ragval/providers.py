"""Uniform interfaces to external model capabilities.

Four capabilities are wrapped: sentence embedding, NLI scoring, text
generation, and text classification (toxicity/sentiment). Each has a
deterministic mock implementation, so the whole pipeline runs hermetically,
and an HTTP client implementation for hosted services. Embeddings go through
a persistent JSONL cache that is semantically invisible: any call sequence
returns exactly what a cache-free run would.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import httpx
import numpy as np


class ProviderError(Exception):
    """Raised when a provider call fails after exhausting retries."""


@dataclass(frozen=True)
class EmbeddingVector:
    """A d-dimensional embedding tagged with the model that produced it.

    Vectors from different model_ids must never be compared; the metric
    layer enforces this.
    """

    values: tuple[float, ...]
    model_id: str

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.values):
            raise ProviderError(f"non-finite embedding from model {self.model_id}")

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class NliJudgment:
    """Entailment logit, classifier scale, and class probabilities.

    ``entailment_logit / scale`` is the signed distance to the entailment
    decision boundary; positive means the hypothesis is entailed.
    """

    entailment_logit: float
    scale: float
    labels: dict[str, float]  # entailment / neutral / contradiction, sums to 1

    def __post_init__(self):
        if self.scale <= 0:
            raise ProviderError("NLI scale must be > 0")
        total = sum(self.labels.values())
        if abs(total - 1.0) > 1e-9:
            raise ProviderError(f"NLI label probabilities sum to {total}, not 1")

    @property
    def boundary_distance(self) -> float:
        return self.entailment_logit / self.scale


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str = "mock"  # "mock" or an HTTP(S) URL
    model_id: str = "mock-model"
    dim: int = 32  # embedding dimension declared by the provider
    batch_size: int = 16
    timeout: float = 10.0
    max_inflight: int = 4
    retries: int = 2
    backoff: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ProviderError("batch_size must be >= 1")
        if self.timeout <= 0:
            raise ProviderError("timeout must be > 0")
        if self.dim < 1:
            raise ProviderError("dim must be >= 1")


def _load_lexicon(name: str) -> frozenset[str]:
    text = resources.files("ragval.data").joinpath(name).read_text(encoding="utf-8")
    return frozenset(
        line.strip().lower()
        for line in text.splitlines()
        if line.strip() and not line.startswith("#")
    )


_WORD_RE = re.compile(r"[A-Za-z0-9$%']+")


def tokenize(text: str) -> list[str]:
    return [w.lower() for w in _WORD_RE.findall(text)]


class MockProvider:
    """Deterministic stand-in for every capability.

    Pure function of (inputs, seed, model_id): embeddings hash the token
    multiset into d dimensions and unit-normalize; NLI derives its logit from
    embedding cosine similarity through a fixed affine map; generation applies
    the shipped prompt templates; classification counts lexicon hits.
    """

    # Affine map from cosine similarity to the entailment logit: identical
    # texts land well inside entailment, orthogonal ones on the negative side.
    NLI_GAIN = 6.0
    NLI_OFFSET = -1.0
    NLI_SCALE = 2.0

    def __init__(self, config: ProviderConfig):
        config.validate()
        self.config = config
        self._tox = _load_lexicon("toxicity_lexicon.txt")
        self._pos = _load_lexicon("sentiment_positive.txt")
        self._neg = _load_lexicon("sentiment_negative.txt")

    def _token_vector(self, token: str) -> np.ndarray:
        key = f"{self.config.model_id}|{self.config.seed}|{token}".encode()
        digest = hashlib.sha256(key).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.config.dim)

    def embed_one(self, text: str) -> EmbeddingVector:
        tokens = tokenize(text) or [text]
        vec = np.zeros(self.config.dim)
        for tok in tokens:
            vec += self._token_vector(tok)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec = self._token_vector("\x00" + text)
            norm = np.linalg.norm(vec)
        return EmbeddingVector(values=tuple(vec / norm), model_id=self.config.model_id)

    def embed_batch(self, texts: list[str]) -> list[EmbeddingVector]:
        return [self.embed_one(t) for t in texts]

    def nli_score(self, premise: str, hypothesis: str) -> NliJudgment:
        if not premise or not hypothesis:
            raise ProviderError("NLI premise and hypothesis must be non-empty")
        u = self.embed_one(premise).as_array()
        v = self.embed_one(hypothesis).as_array()
        sim = float(np.dot(u, v))  # both unit-norm
        z = self.NLI_GAIN * sim + self.NLI_OFFSET
        logits = np.array([z, 0.0, -z])
        exp = np.exp(logits - logits.max())
        probs = exp / exp.sum()
        return NliJudgment(
            entailment_logit=z,
            scale=self.NLI_SCALE,
            labels={"entailment": float(probs[0]), "neutral": float(probs[1]),
                    "contradiction": float(probs[2])},
        )

    def generate(self, prompt: str) -> str:
        if not prompt:
            raise ProviderError("prompt must be non-empty")
        out = self._realize(prompt)
        if not out:
            raise ProviderError("mock generation produced empty text")
        return out

    def _realize(self, prompt: str) -> str:
        if prompt.startswith("Q about: "):
            return f"What does the following state: {prompt[len('Q about: '):]}?"
        if prompt.startswith("YesNo about: "):
            return _invert_to_yes_no(prompt[len("YesNo about: "):])
        if prompt.startswith("Infer from: "):
            return f"What can be inferred from: {prompt[len('Infer from: '):]}?"
        if prompt.startswith("Choice about: "):
            fact = prompt[len("Choice about: "):]
            return f"Which is accurate: (a) {fact} (b) the opposite?"
        if prompt.startswith("MultiHop about: "):
            parts = prompt[len("MultiHop about: "):].split(" || ")
            joined = " and ".join(p.strip() for p in parts)
            return f"How are these connected: {joined}?"
        return f"Answer concerning: {prompt}"

    def classify(self, text: str, task: str) -> float:
        words = tokenize(text)
        if not words:
            return 0.0
        if task == "toxicity":
            hits = sum(1 for w in words if w in self._tox)
            return hits / len(words)
        if task == "sentiment":
            pos = sum(1 for w in words if w in self._pos)
            neg = sum(1 for w in words if w in self._neg)
            return (pos - neg) / len(words)
        raise ProviderError(f"unknown classification task: {task}")


def _invert_to_yes_no(fact: str) -> str:
    """Turn a declarative fact into a yes/no question by fronting the verb."""
    body = fact.rstrip(".!? ")
    for verb in (" is ", " are ", " was ", " were ", " has ", " have ", " can ", " will "):
        idx = body.lower().find(verb)
        if idx > 0:
            subject = body[:idx]
            rest = body[idx + len(verb):]
            subject = subject[0].lower() + subject[1:] if subject[:1].isupper() else subject
            return f"{verb.strip().capitalize()} {subject} {rest}?"
    return f"Is it true that {body[0].lower() + body[1:] if body[:1].isupper() else body}?"


class HttpProvider:
    """HTTP client for hosted model services.

    Wire formats (JSON):
      embed:    POST {model, inputs[]}            -> {vectors[][]}
      nli:      POST {model, premise, hypothesis} -> {entailment_logit, scale, labels{}}
                (services exposing only probabilities may omit logit/scale; the
                adapter reconstructs z = log(p_e / (1 - p_e)) with scale 1)
      generate: POST {model, prompt}              -> {text}
      classify: POST {model, text, task}          -> {score}
    """

    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None):
        config.validate()
        self.config = config
        self._client = httpx.Client(timeout=config.timeout, transport=transport)
        self._sem = threading.Semaphore(config.max_inflight)

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        url = self.config.endpoint.rstrip("/") + path
        last_error: Exception | None = None
        for attempt in range(self.config.retries + 1):
            try:
                with self._sem:
                    resp = self._client.post(url, json=payload)
                resp.raise_for_status()
                return resp.json()
            except (httpx.HTTPError, json.JSONDecodeError) as exc:
                last_error = exc
                if attempt < self.config.retries:
                    time.sleep(self.config.backoff * (2 ** attempt))
        raise ProviderError(f"provider call {url} failed after "
                            f"{self.config.retries + 1} attempts: {last_error}")

    def embed_batch(self, texts: list[str]) -> list[EmbeddingVector]:
        out: list[EmbeddingVector] = []
        for start in range(0, len(texts), self.config.batch_size):
            batch = texts[start:start + self.config.batch_size]
            try:
                data = self._post("/embed", {"model": self.config.model_id, "inputs": batch})
            except ProviderError as exc:
                indices = list(range(start, start + len(batch)))
                raise ProviderError(f"embedding failed for batch indices {indices}: {exc}") from exc
            vectors = data["vectors"]
            if len(vectors) != len(batch):
                raise ProviderError("provider returned wrong number of vectors")
            for vec in vectors:
                if len(vec) != self.config.dim:
                    raise ProviderError(
                        f"dimension mismatch: provider returned {len(vec)}, declared {self.config.dim}")
                out.append(EmbeddingVector(values=tuple(float(x) for x in vec),
                                           model_id=self.config.model_id))
        return out

    def embed_one(self, text: str) -> EmbeddingVector:
        return self.embed_batch([text])[0]

    def nli_score(self, premise: str, hypothesis: str) -> NliJudgment:
        if not premise or not hypothesis:
            raise ProviderError("NLI premise and hypothesis must be non-empty")
        data = self._post("/nli", {"model": self.config.model_id,
                                   "premise": premise, "hypothesis": hypothesis})
        labels = {k: float(v) for k, v in data["labels"].items()}
        if "entailment_logit" in data:
            z = float(data["entailment_logit"])
            scale = float(data.get("scale", 1.0))
        else:
            # Probability-only service: reconstruct the logit, unit scale.
            p = min(max(labels["entailment"], 1e-12), 1 - 1e-12)
            z = math.log(p / (1 - p))
            scale = 1.0
        return NliJudgment(entailment_logit=z, scale=scale, labels=labels)

    def generate(self, prompt: str) -> str:
        if not prompt:
            raise ProviderError("prompt must be non-empty")
        data = self._post("/generate", {"model": self.config.model_id, "prompt": prompt})
        text = data.get("text", "")
        if not text:
            raise ProviderError("provider returned empty generation")
        return text

    def classify(self, text: str, task: str) -> float:
        data = self._post("/classify", {"model": self.config.model_id, "text": text, "task": task})
        return float(data["score"])


def make_provider(config: ProviderConfig, transport: httpx.BaseTransport | None = None):
    if config.endpoint == "mock":
        return MockProvider(config)
    return HttpProvider(config, transport=transport)


class EmbeddingCache:
    """Append-only JSONL cache keyed by (model_id, sha256 of text).

    Corrupt lines are skipped with a warning, never fatal. Concurrent readers
    are safe; writes are serialized through a lock.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str], tuple[float, ...]] = {}
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        bad = 0
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    key = (rec["model_id"], rec["text_sha256"])
                    self._entries[key] = tuple(float(x) for x in rec["vector"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    bad += 1
        if bad:
            import warnings

            warnings.warn(f"embedding cache {self.path}: skipped {bad} corrupt line(s)")

    @staticmethod
    def key_for(model_id: str, text: str) -> tuple[str, str]:
        return model_id, hashlib.sha256(text.encode("utf-8")).hexdigest()

    def get(self, model_id: str, text: str) -> tuple[float, ...] | None:
        return self._entries.get(self.key_for(model_id, text))

    def put(self, model_id: str, text: str, values: tuple[float, ...]) -> None:
        key = self.key_for(model_id, text)
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = values
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({
                    "model_id": key[0], "text_sha256": key[1], "vector": list(values),
                }) + "\n")


@dataclass
class CachingEmbedder:
    """Order-preserving embed_batch that only sends cache misses upstream."""

    provider: object  # MockProvider or HttpProvider
    cache: EmbeddingCache | None = None
    model_id: str = ""
    calls: int = field(default=0)  # upstream texts actually requested

    def __post_init__(self):
        if not self.model_id:
            self.model_id = self.provider.config.model_id

    def embed_batch(self, texts: list[str]) -> list[EmbeddingVector]:
        for t in texts:
            if not t:
                raise ProviderError("cannot embed empty text")
        results: list[EmbeddingVector | None] = [None] * len(texts)
        miss_idx: list[int] = []
        seen: dict[str, int] = {}
        for i, text in enumerate(texts):
            cached = self.cache.get(self.model_id, text) if self.cache else None
            if cached is not None:
                results[i] = EmbeddingVector(values=cached, model_id=self.model_id)
            elif text in seen:
                pass  # duplicate miss inside this call; fill after upstream
            else:
                seen[text] = i
                miss_idx.append(i)
        if miss_idx:
            miss_texts = [texts[i] for i in miss_idx]
            self.calls += len(miss_texts)
            fetched = self.provider.embed_batch(miss_texts)
            for i, vec in zip(miss_idx, fetched):
                results[i] = vec
                if self.cache:
                    self.cache.put(self.model_id, texts[i], vec.values)
        for i, text in enumerate(texts):
            if results[i] is None:
                first = seen.get(text)
                if first is not None and results[first] is not None:
                    results[i] = results[first]
                else:
                    cached = self.cache.get(self.model_id, text) if self.cache else None
                    if cached is None:
                        raise ProviderError(f"embedding for text index {i} unresolved")
                    results[i] = EmbeddingVector(values=cached, model_id=self.model_id)
        return results  # type: ignore[return-value]

    def embed_one(self, text: str) -> EmbeddingVector:
        return self.embed_batch([text])[0]
