"""Robustness checks: seeded input perturbations and a clean-vs-perturbed suite.

Three perturbation families: character-level typos, distractor injection
into retrieved context, and out-of-distribution queries verified against the
topic strata. The suite runner evaluates every functionality metric on clean
and perturbed inputs and reports per-metric delta distributions.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import (SentenceSet, answer_relevancy, completeness_sim,
                      completeness_wasserstein, context_relevancy, groundedness_sim)
from .testgen import TestQuery, _query_id


class RobustnessError(Exception):
    pass


@dataclass(frozen=True)
class Perturbation:
    kind: str  # adversarial_distractor | ood_query | typo | colloquial
    seed: int = 0
    rate: float = 0.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise RobustnessError("rate must lie in [0, 1]")


MIN_TYPO_WORD_LEN = 3


def perturb_typos(text: str, rate: float, seed: int) -> str:
    """Apply one seeded character edit per word with probability ``rate``.

    Edits: adjacent swap, character drop, or character duplication. Words
    shorter than three characters are exempt. Deterministic per
    (text, rate, seed); rate 0 is the identity.
    """
    if not 0.0 <= rate <= 1.0:
        raise RobustnessError("rate must lie in [0, 1]")
    if rate == 0.0:
        return text
    rng = random.Random(seed)
    words = text.split(" ")
    out = []
    for word in words:
        if len(word) < MIN_TYPO_WORD_LEN or rng.random() >= rate:
            out.append(word)
            continue
        kind = rng.choice(("swap", "drop", "dup"))
        pos = rng.randrange(len(word) - 1)
        if kind == "swap":
            edited = word[:pos] + word[pos + 1] + word[pos] + word[pos + 2:]
        elif kind == "drop":
            edited = word[:pos] + word[pos + 1:]
        else:
            edited = word[:pos] + word[pos] + word[pos:]
        out.append(edited)
    return " ".join(out)


def count_eligible_words(text: str) -> int:
    return sum(1 for w in text.split(" ") if len(w) >= MIN_TYPO_WORD_LEN)


@dataclass
class InjectedContext:
    sentences: list[str]
    injected_indices: list[int]  # positions of distractor sentences
    distractor_stratum: str


def inject_distractor(context_sentences: list[str], context_stratum: str,
                      distractor_sentences: list[str], distractor_stratum: str,
                      position: int) -> InjectedContext:
    """Splice distractor sentences into the context at ``position``.

    The distractor must come from a different stratum, otherwise it is not a
    distractor. Provenance of injected sentences is recorded so metric deltas
    can be attributed.
    """
    if distractor_sentences and distractor_stratum == context_stratum:
        raise RobustnessError(
            f"distractor stratum {distractor_stratum!r} equals context stratum; not a distractor")
    position = max(0, min(position, len(context_sentences)))
    merged = (context_sentences[:position] + list(distractor_sentences)
              + context_sentences[position:])
    injected = list(range(position, position + len(distractor_sentences)))
    return InjectedContext(sentences=merged, injected_indices=injected,
                           distractor_stratum=distractor_stratum)


def gen_ood_queries(pool: list[str], count: int, seed: int, embedder,
                    projection, centroids: dict[str, tuple[float, ...]],
                    ceiling: float = 0.3) -> list[TestQuery]:
    """Sample queries verified to sit outside every topic stratum.

    A candidate passes when its reduced-space cosine similarity to every
    stratum centroid stays below ``ceiling``; failures are skipped and the
    next pool entry is tried. Raises when the pool runs out first.
    """
    if not pool:
        raise RobustnessError("OOD pool is empty")
    if count == 0:
        return []
    order = np.random.default_rng(seed).permutation(len(pool))
    accepted: list[TestQuery] = []
    for idx in order:
        text = pool[int(idx)].strip()
        if not text:
            continue
        vec = embedder.embed_one(text).as_array()
        reduced = projection.project(vec)[0]
        worst = max(_cosine(reduced, np.asarray(c)) for c in centroids.values())
        if worst < ceiling:
            accepted.append(TestQuery(
                query_id=_query_id(text, "simple_factual", ("ood",)),
                text=text, query_type="simple_factual", stratum_id="ood",
                source_chunk_ids=("ood",), key_facts=(), tag="ood"))
            if len(accepted) == count:
                return accepted
    raise RobustnessError(
        f"OOD pool exhausted: needed {count}, verified {len(accepted)} below ceiling {ceiling}")


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


METRIC_NAMES = ("c_relevancy", "groundedness_sim", "completeness_sim",
                "completeness_w", "a_relevancy")


def evaluate_functionality(query_text: str, context_sentences: list[str],
                           answer_text: str, embedder) -> dict[str, float]:
    """All similarity-based functionality metrics for one exchange."""
    from .corpus import segment_sentences

    q = SentenceSet.from_texts("query", [s.text for s in segment_sentences(query_text)] or [query_text], embedder)
    c = SentenceSet.from_texts("context", context_sentences, embedder)
    answer_sents = [s.text for s in segment_sentences(answer_text)] or [answer_text]
    a = SentenceSet.from_texts("answer", answer_sents, embedder)
    return {
        "c_relevancy": context_relevancy(q, c).value,
        "groundedness_sim": groundedness_sim(a, c).value,
        "completeness_sim": completeness_sim(c, a).value,
        "completeness_w": completeness_wasserstein(c, a),
        "a_relevancy": answer_relevancy(a, q).value,
    }


@dataclass
class RobustnessReport:
    per_metric: dict  # metric -> perturbation kind -> summary stats
    rows: list[dict]  # long form: one row per (query, perturbation, metric)
    failures: list[dict]
    header: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"header": self.header, "per_metric": self.per_metric,
                "failures": self.failures}


def run_robustness_suite(queries: list[TestQuery], rag_runner, perturbations: list[Perturbation],
                         embedder, worst_k: int = 3) -> RobustnessReport:
    """Metric deltas between clean and perturbed runs for every query.

    Runner failures are recorded per query and the suite continues. Report
    ordering is canonical (query_id, perturbation kind, metric).
    """
    rows: list[dict] = []
    failures: list[dict] = []
    for query in sorted(queries, key=lambda q: q.query_id):
        try:
            clean = rag_runner.run(query.text)
            clean_metrics = evaluate_functionality(query.text, clean.retrieved_context,
                                                   clean.answer, embedder)
        except Exception as exc:
            failures.append({"query_id": query.query_id, "perturbation": "clean",
                             "error": str(exc)})
            continue
        for pert in perturbations:
            if pert.kind == "typo":
                perturbed_text = perturb_typos(query.text, pert.rate, pert.seed)
            elif pert.kind == "colloquial":
                perturbed_text = _colloquialize(query.text, pert.rate, pert.seed)
            else:
                continue  # distractor/ood run through their dedicated entry points
            try:
                pr = rag_runner.run(perturbed_text)
                pm = evaluate_functionality(perturbed_text, pr.retrieved_context,
                                            pr.answer, embedder)
            except Exception as exc:
                failures.append({"query_id": query.query_id, "perturbation": pert.kind,
                                 "error": str(exc)})
                continue
            for metric in METRIC_NAMES:
                rows.append({
                    "query_id": query.query_id, "perturbation": pert.kind,
                    "seed": pert.seed, "rate": pert.rate, "metric": metric,
                    "clean": clean_metrics[metric], "perturbed": pm[metric],
                    "delta": pm[metric] - clean_metrics[metric],
                })

    per_metric: dict[str, dict] = {}
    for metric in METRIC_NAMES:
        per_metric[metric] = {}
        for pert in perturbations:
            deltas = [(r["delta"], r["query_id"]) for r in rows
                      if r["metric"] == metric and r["perturbation"] == pert.kind]
            if not deltas:
                continue
            values = np.array([d for d, _ in deltas])
            worst = sorted(deltas, key=lambda t: (t[0], t[1]))[:worst_k]
            per_metric[metric][pert.kind] = {
                "mean_delta": float(values.mean()),
                "p5": float(np.quantile(values, 0.05)),
                "p95": float(np.quantile(values, 0.95)),
                "worst": [{"query_id": qid, "delta": d} for d, qid in worst],
            }
    return RobustnessReport(per_metric=per_metric, rows=rows, failures=failures)


_COLLOQUIAL_SWAPS = (
    ("do not", "don't"), ("cannot", "can't"), ("will not", "won't"),
    ("what is", "what's"), ("it is", "it's"), ("you are", "you're"),
)


def _colloquialize(text: str, rate: float, seed: int) -> str:
    rng = random.Random(seed)
    out = text
    for formal, casual in _COLLOQUIAL_SWAPS:
        if formal in out.lower() and rng.random() < rate:
            idx = out.lower().find(formal)
            out = out[:idx] + casual + out[idx + len(formal):]
    return out


def save_report(report: RobustnessReport, json_path: str | Path, csv_path: str | Path) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")
    lines = ["query_id,perturbation,seed,rate,metric,clean,perturbed,delta"]
    for r in report.rows:
        lines.append(f"{r['query_id']},{r['perturbation']},{r['seed']},{r['rate']:.10g},"
                     f"{r['metric']},{r['clean']:.10g},{r['perturbed']:.10g},{r['delta']:.10g}")
    Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
