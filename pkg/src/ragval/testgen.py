"""Stratified test-query generation.

Allocates a query budget across topic strata (largest-remainder with a
floor of one per stratum), samples chunks inside each stratum, extracts key
facts, prompts the generation provider with shipped templates, and filters
the results by context relevancy against their own source chunks.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .metrics import SentenceSet, context_relevancy
from .topics import Stratum

QUERY_TYPES = ("simple_factual", "multi_hop", "inference", "yes_no", "multiple_choice")


class TestGenError(Exception):
    pass


@dataclass(frozen=True)
class SamplingSpec:
    total_budget: int
    mode: str = "proportional"  # or "weighted"
    weights: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> None:
        if self.total_budget < 1:
            raise TestGenError("total_budget must be >= 1")
        if self.mode not in ("proportional", "weighted"):
            raise TestGenError(f"unknown sampling mode: {self.mode}")
        if self.mode == "weighted":
            if any(w < 0 for w in self.weights.values()):
                raise TestGenError("weights must be >= 0")
            if not any(w > 0 for w in self.weights.values()):
                raise TestGenError("at least one weight must be positive")


@dataclass(frozen=True)
class TestQuery:
    query_id: str
    text: str
    query_type: str
    stratum_id: str
    source_chunk_ids: tuple[str, ...]
    key_facts: tuple[str, ...]
    tag: str = ""  # "" for generated, "ood" for out-of-distribution probes

    def __post_init__(self):
        if self.query_type not in QUERY_TYPES:
            raise TestGenError(f"unknown query type: {self.query_type}")
        if len(self.source_chunk_ids) < 1:
            raise TestGenError("a query needs at least one source chunk")
        if self.query_type == "multi_hop" and len(self.source_chunk_ids) < 2:
            raise TestGenError("multi_hop queries must cite >= 2 source chunks")


def allocate_budget(sizes: dict[str, int], spec: SamplingSpec) -> dict[str, int]:
    """Largest-remainder apportionment with a floor of one per stratum.

    Every non-empty stratum gets at least one query, then the remaining
    budget is split by size (proportional) or by the given weights. Equal
    remainders break toward the larger weight, then lexicographic id.
    """
    spec.validate()
    strata = [sid for sid, size in sizes.items() if size > 0]
    if not strata:
        raise TestGenError("no non-empty strata to allocate over")
    if spec.total_budget < len(strata):
        raise TestGenError(
            f"budget {spec.total_budget} is below the stratum count {len(strata)}; "
            "increase the budget or merge strata")
    if spec.mode == "proportional":
        weights = {sid: float(sizes[sid]) for sid in strata}
    else:
        weights = {sid: float(spec.weights.get(sid, 0.0)) for sid in strata}
        if not any(weights.values()):
            raise TestGenError("all strata have zero weight")

    alloc = {sid: 1 for sid in strata}
    remaining = spec.total_budget - len(strata)
    total_w = sum(weights.values())
    quotas = {sid: remaining * weights[sid] / total_w for sid in strata}
    for sid in strata:
        alloc[sid] += int(quotas[sid])
    leftover = remaining - sum(int(quotas[sid]) for sid in strata)
    frac_order = sorted(strata, key=lambda s: (-(quotas[s] - int(quotas[s])), -weights[s], s))
    for sid in frac_order[:leftover]:
        alloc[sid] += 1
    return alloc


def sample_chunks(stratum: Stratum, count: int, seed: int) -> list[str]:
    """Seeded uniform sampling without replacement, returned in id order."""
    ids = sorted(stratum.chunk_ids)
    if count > len(ids):
        raise TestGenError(f"cannot sample {count} from stratum of size {len(ids)}")
    if count == len(ids):
        return ids
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(ids), size=count, replace=False)
    return sorted(ids[i] for i in picked)


_NUMBER_RE = re.compile(r"\d")
_ENTITY_RE = re.compile(r"\b[A-Z][a-z]+(?:\s+[A-Z][a-z]+)+\b")
_DEFINITIONAL_RE = re.compile(
    r"\b(is|are|means|refers to|consists of|defined as|represents|requires|provides)\b",
    re.IGNORECASE)


def extract_key_facts(sentences: list[str]) -> list[str]:
    """Declarative sentences carrying a number, entity, or definitional verb."""
    facts = []
    for text in sentences:
        stripped = text.strip()
        if not stripped or stripped.endswith("?"):
            continue
        if len(stripped.split()) < 3:
            continue
        if (_NUMBER_RE.search(stripped) or _ENTITY_RE.search(stripped)
                or _DEFINITIONAL_RE.search(stripped)):
            facts.append(stripped)
    return facts


def load_prompt_template(query_type: str, template_dir: str | Path | None = None) -> str:
    if template_dir is not None:
        return (Path(template_dir) / f"{query_type}.txt").read_text(encoding="utf-8")
    return resources.files("ragval.data.prompts").joinpath(f"{query_type}.txt").read_text(encoding="utf-8")


def _query_id(text: str, query_type: str, sources: tuple[str, ...]) -> str:
    key = json.dumps([text, query_type, list(sources)], sort_keys=True)
    return "q-" + hashlib.sha256(key.encode("utf-8")).hexdigest()[:10]


@dataclass
class SkipRecord:
    chunk_ids: tuple[str, ...]
    query_type: str
    reason: str


def generate_queries(chunks, query_types: list[str], provider, stratum_id: str,
                     template_dir: str | Path | None = None,
                     max_per_type: int = 1) -> tuple[list[TestQuery], list[SkipRecord]]:
    """Generate typed queries for the given chunks via the generation provider.

    ``chunks`` is a list of corpus Chunks; multi_hop draws one fact from each
    of the first two chunks and cites both. Chunks with no extractable fact
    are skipped with a recorded reason.
    """
    queries: list[TestQuery] = []
    skips: list[SkipRecord] = []
    facts_by_chunk = [(c, extract_key_facts([s.text for s in c.sentences])) for c in chunks]

    for qtype in query_types:
        if qtype == "multi_hop":
            if len(chunks) < 2:
                skips.append(SkipRecord(tuple(c.chunk_id for c in chunks), qtype,
                                        "multi_hop needs >= 2 chunks"))
                continue
            pairs = [(c, f) for c, f in facts_by_chunk if f]
            if len(pairs) < 2:
                skips.append(SkipRecord(tuple(c.chunk_id for c in chunks), qtype,
                                        "fewer than 2 chunks with extractable facts"))
                continue
            (c1, f1), (c2, f2) = pairs[0], pairs[1]
            template = load_prompt_template(qtype, template_dir)
            prompt = template.format(fact_a=f1[0], fact_b=f2[0])
            text = provider.generate(prompt)
            if not text:
                raise TestGenError(f"empty generation for chunks {c1.chunk_id},{c2.chunk_id}")
            sources = (c1.chunk_id, c2.chunk_id)
            queries.append(TestQuery(
                query_id=_query_id(text, qtype, sources), text=text, query_type=qtype,
                stratum_id=stratum_id, source_chunk_ids=sources, key_facts=(f1[0], f2[0])))
            continue
        template = load_prompt_template(qtype, template_dir)
        for chunk, facts in facts_by_chunk:
            if not facts:
                skips.append(SkipRecord((chunk.chunk_id,), qtype, "no extractable fact"))
                continue
            for fact in facts[:max_per_type]:
                prompt = template.format(fact=fact)
                text = provider.generate(prompt)
                if not text:
                    raise TestGenError(f"empty generation for chunk {chunk.chunk_id}")
                sources = (chunk.chunk_id,)
                queries.append(TestQuery(
                    query_id=_query_id(text, qtype, sources), text=text, query_type=qtype,
                    stratum_id=stratum_id, source_chunk_ids=sources, key_facts=(fact,)))
    return queries, skips


@dataclass
class SelectionResult:
    accepted: list[TestQuery]
    rejected: list[tuple[TestQuery, float]]  # query and its relevancy score


def select_queries(queries: list[TestQuery], corpus: Corpus, embedder,
                   threshold: float) -> SelectionResult:
    """Keep queries whose context relevancy against their own sources >= threshold."""
    if not -1.0 <= threshold <= 1.0:
        raise TestGenError("threshold must lie in [-1, 1]")
    accepted, rejected = [], []
    for q in queries:
        context_sentences = []
        for cid in q.source_chunk_ids:
            context_sentences.extend(s.text for s in corpus.chunk_by_id(cid).sentences)
        qset = SentenceSet.from_texts("query", [q.text], embedder)
        cset = SentenceSet.from_texts("context", context_sentences, embedder)
        score = context_relevancy(qset, cset, kind="mean").value
        if score >= threshold:
            accepted.append(q)
        else:
            rejected.append((q, score))
    return SelectionResult(accepted=accepted, rejected=rejected)


def run_generation(corpus: Corpus, topic_model, spec: SamplingSpec, provider, embedder,
                   query_types: list[str] | None = None, relevancy_threshold: float = 0.0,
                   template_dir: str | Path | None = None) -> tuple[list[TestQuery], list[SkipRecord]]:
    """Full stratified generation pass over every non-noise stratum.

    Output is canonically ordered by (stratum_id, query_type, query_id) so
    concurrent generation can never change the artifact.
    """
    query_types = list(query_types or QUERY_TYPES)
    strata = topic_model.non_noise()
    sizes = {s.stratum_id: s.size for s in strata}
    alloc = allocate_budget(sizes, spec)
    by_id = {s.stratum_id: s for s in strata}

    all_queries: list[TestQuery] = []
    all_skips: list[SkipRecord] = []
    for sid in sorted(alloc):
        stratum = by_id[sid]
        count = min(alloc[sid], stratum.size)
        chunk_ids = sample_chunks(stratum, count, seed=spec.seed + _stable_offset(sid))
        chunks = [corpus.chunk_by_id(cid) for cid in chunk_ids]
        # Cycle the five types across this stratum's budget for diversity.
        for i, chunk in enumerate(chunks):
            qtype = query_types[i % len(query_types)]
            use = [chunk] if qtype != "multi_hop" else chunks[i:i + 2]
            if qtype == "multi_hop" and len(use) < 2:
                use = chunks[:2]
            qs, skips = generate_queries(use, [qtype], provider, sid, template_dir)
            all_queries.extend(qs)
            all_skips.extend(skips)
    selection = select_queries(all_queries, corpus, embedder, relevancy_threshold)
    result = sorted(selection.accepted, key=lambda q: (q.stratum_id, q.query_type, q.query_id))
    deduped = []
    seen_ids = set()
    for q in result:
        if q.query_id not in seen_ids:
            seen_ids.add(q.query_id)
            deduped.append(q)
    return deduped, all_skips


def _stable_offset(name: str) -> int:
    return int(hashlib.sha256(name.encode()).hexdigest()[:8], 16)


def save_queries(queries: list[TestQuery], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({
                "query_id": q.query_id, "text": q.text, "query_type": q.query_type,
                "stratum_id": q.stratum_id, "source_chunk_ids": list(q.source_chunk_ids),
                "key_facts": list(q.key_facts), "tag": q.tag,
            }, sort_keys=True) + "\n")


def load_queries(path: str | Path) -> list[TestQuery]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out.append(TestQuery(
                query_id=rec["query_id"], text=rec["text"], query_type=rec["query_type"],
                stratum_id=rec["stratum_id"], source_chunk_ids=tuple(rec["source_chunk_ids"]),
                key_facts=tuple(rec["key_facts"]), tag=rec.get("tag", "")))
    return out
