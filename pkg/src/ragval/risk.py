"""Risk and safety scans: toxicity, counterfactual bias, PII detection.

All three are auditable by construction: toxicity defers to the classifier
provider and compares against a threshold, bias probing swaps demographic
terms and measures response deltas, and privacy scanning runs shipped regex
rules plus a name gazetteer with exact spans.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

from .metrics import SentenceSet, answer_relevancy


class RiskError(Exception):
    pass


@dataclass(frozen=True)
class SwapPair:
    original: str
    counterfactual: str
    dimension: str  # gender | race | age | income

    def __post_init__(self):
        if self.original == self.counterfactual:
            raise RiskError("swap pair terms must differ")


@dataclass(frozen=True)
class PiiFinding:
    kind: str
    start: int
    end: int
    matched: str
    rule_id: str


@dataclass
class ToxicityResult:
    score: float
    threshold: float
    passed: bool


def toxicity_score(text: str, provider, threshold: float) -> ToxicityResult:
    """Provider toxicity score checked against the pass threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise RiskError("toxicity threshold must lie in [0, 1]")
    score = provider.classify(text, "toxicity")
    return ToxicityResult(score=score, threshold=threshold, passed=score <= threshold)


@dataclass
class BiasProbeResult:
    dimension: str
    original: str
    counterfactual: str
    query: str
    query_cf: str
    sentiment_delta: float
    relevancy_delta: float


@dataclass
class BiasReport:
    probes: list[BiasProbeResult]
    max_abs_delta_by_dimension: dict[str, float]
    tolerance: float
    flagged_dimensions: list[str]
    # Relevancy deltas extend the sentiment check; reports label them so.
    measures: tuple[str, ...] = ("sentiment", "answer_relevancy(extension)")


def _swap_term(text: str, original: str, replacement: str) -> str:
    pattern = re.compile(r"\b" + re.escape(original) + r"\b")
    if not pattern.search(text):
        raise RiskError(f"term {original!r} not present in template")
    return pattern.sub(replacement, text)


def bias_probe(query_template: str, swap_pairs: list[SwapPair], respond,
               sentiment_provider, embedder, tolerance: float) -> BiasReport:
    """Counterfactual probing: swap each pair's terms and compare responses.

    ``respond`` is the caller-supplied RAG invocation (query text -> answer
    text). For each pair the query and its counterfactual are both answered;
    the deltas are counterfactual minus original for mock-sentiment score and
    answer relevancy.
    """
    probes = []
    for pair in swap_pairs:
        query = query_template
        query_cf = _swap_term(query_template, pair.original, pair.counterfactual)
        answer = respond(query)
        answer_cf = respond(query_cf)
        sent = sentiment_provider.classify(answer, "sentiment")
        sent_cf = sentiment_provider.classify(answer_cf, "sentiment")
        rel = _relevancy(answer, query, embedder)
        rel_cf = _relevancy(answer_cf, query_cf, embedder)
        probes.append(BiasProbeResult(
            dimension=pair.dimension, original=pair.original,
            counterfactual=pair.counterfactual, query=query, query_cf=query_cf,
            sentiment_delta=sent_cf - sent, relevancy_delta=rel_cf - rel))
    max_by_dim: dict[str, float] = {}
    for p in probes:
        worst = max(abs(p.sentiment_delta), abs(p.relevancy_delta))
        max_by_dim[p.dimension] = max(max_by_dim.get(p.dimension, 0.0), worst)
    flagged = sorted(d for d, v in max_by_dim.items() if v > tolerance)
    return BiasReport(probes=probes, max_abs_delta_by_dimension=max_by_dim,
                      tolerance=tolerance, flagged_dimensions=flagged)


def _relevancy(answer: str, query: str, embedder) -> float:
    from .corpus import segment_sentences

    answer_sentences = [s.text for s in segment_sentences(answer)] or [answer]
    aset = SentenceSet.from_texts("answer", answer_sentences, embedder)
    qset = SentenceSet.from_texts("query", [query], embedder)
    return answer_relevancy(aset, qset, kind="mean").value


@dataclass
class _PiiRule:
    rule_id: str
    kind: str
    pattern: re.Pattern


class PrivacyScanner:
    """Shipped regex rules plus a given-name gazetteer; overlaps all reported."""

    def __init__(self, rules_path=None, names_path=None):
        if rules_path is None:
            raw = resources.files("ragval.data").joinpath("pii_rules.json").read_text(encoding="utf-8")
        else:
            raw = open(rules_path, encoding="utf-8").read()
        spec = json.loads(raw)
        self.rules = [
            _PiiRule(rule_id=r["rule_id"], kind=r["kind"], pattern=re.compile(r["pattern"]))
            for r in spec["rules"]
        ]
        if names_path is None:
            names_text = resources.files("ragval.data").joinpath("person_names.txt").read_text(encoding="utf-8")
        else:
            names_text = open(names_path, encoding="utf-8").read()
        names = [ln.strip() for ln in names_text.splitlines()
                 if ln.strip() and not ln.startswith("#")]
        if names:
            alternation = "|".join(re.escape(n) for n in sorted(names))
            self.name_pattern: re.Pattern | None = re.compile(
                r"\b(?:" + alternation + r")\s+[A-Z][a-z]+\b")
        else:
            self.name_pattern = None

    def scan(self, text: str) -> list[PiiFinding]:
        findings = []
        for rule in self.rules:
            for m in rule.pattern.finditer(text):
                findings.append(PiiFinding(kind=rule.kind, start=m.start(), end=m.end(),
                                           matched=m.group(0), rule_id=rule.rule_id))
        if self.name_pattern is not None:
            for m in self.name_pattern.finditer(text):
                findings.append(PiiFinding(kind="person_name", start=m.start(), end=m.end(),
                                           matched=m.group(0), rule_id="name-gazetteer"))
        findings.sort(key=lambda f: (f.start, f.end, f.rule_id))
        return findings


_default_scanner: PrivacyScanner | None = None


def privacy_scan(text: str) -> list[PiiFinding]:
    """Scan with the shipped rule set (scanner built once per process)."""
    global _default_scanner
    if _default_scanner is None:
        _default_scanner = PrivacyScanner()
    return _default_scanner.scan(text)
