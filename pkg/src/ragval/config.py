"""Declarative run configuration with strict (typo-rejecting) validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .providers import ProviderConfig


class ConfigError(Exception):
    pass


def _from_mapping(cls, data: dict, context: str):
    """Build a dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{context}: unknown key(s) {sorted(unknown)}; expected {sorted(known)}")
    return cls(**data)


@dataclass(frozen=True)
class CorpusSection:
    paths: list[str] = field(default_factory=list)
    max_tokens: int = 200
    max_sentences: int = 8
    overlap: int = 1


@dataclass(frozen=True)
class ProvidersSection:
    embedding: dict = field(default_factory=dict)
    nli: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    cache_file: str = "cache/embeddings.jsonl"

    def provider_config(self, name: str, seed: int) -> ProviderConfig:
        raw = dict(getattr(self, name))
        raw.setdefault("model_id", f"mock-{name}")
        raw.setdefault("seed", seed)
        known = {f.name for f in fields(ProviderConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"providers.{name}: unknown key(s) {sorted(unknown)}")
        return ProviderConfig(**raw)


@dataclass(frozen=True)
class TopicsSection:
    reduce_dim: int | None = None
    algorithm: str = "kmeans"
    k: int | None = None
    eps: float = 0.5
    min_pts: int = 3
    keyword_count: int = 5


@dataclass(frozen=True)
class SamplingSection:
    total_budget: int = 20
    mode: str = "proportional"
    weights: dict = field(default_factory=dict)
    query_types: list[str] = field(default_factory=lambda: [
        "simple_factual", "multi_hop", "inference", "yes_no", "multiple_choice"])
    relevancy_threshold: float = 0.0
    template_dir: str | None = None


@dataclass(frozen=True)
class MetricsSection:
    aggregation: str = "mean"
    flag_threshold: float = 0.5
    nli_premise_top_k: int = 3


@dataclass(frozen=True)
class RiskSection:
    toxicity_threshold: float = 0.5
    bias_tolerance: float = 0.2
    swap_pairs: list = field(default_factory=list)  # [{original, counterfactual, dimension}]
    bias_template: str = ""


@dataclass(frozen=True)
class CalibrationSection:
    alpha: float = 0.1
    split_ratio: float = 0.5
    stage1: str = "platt"  # or "isotonic"
    labels_file: str | None = None
    binarize_min: float | None = None
    synthesize_labels: bool = False
    metrics: list[str] = field(default_factory=lambda: ["groundedness_sim"])


@dataclass(frozen=True)
class RobustnessSection:
    typo_rate: float = 0.3
    ood_pool: str | None = None
    ood_count: int = 3
    ood_ceiling: float = 0.3
    worst_k: int = 3


@dataclass(frozen=True)
class RagSection:
    kind: str = "retrieval_mock"  # or "http" or "echo"
    endpoint: str | None = None
    top_k: int = 3
    timeout: float = 30.0


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    providers: ProvidersSection = field(default_factory=ProvidersSection)
    topics: TopicsSection = field(default_factory=TopicsSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    risk: RiskSection = field(default_factory=RiskSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    robustness: RobustnessSection = field(default_factory=RobustnessSection)
    rag: RagSection = field(default_factory=RagSection)
    output_dir: str = "runs/out"
    seed: int = 0

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()[:16]

    def stage_seed(self, stage: str) -> int:
        """Stable per-stage seed so one stage's logic never perturbs another's."""
        digest = hashlib.sha256(f"{self.seed}|{stage}".encode()).hexdigest()
        return int(digest[:16], 16) % (2 ** 63)


_SECTIONS = {
    "corpus": CorpusSection, "providers": ProvidersSection, "topics": TopicsSection,
    "sampling": SamplingSection, "metrics": MetricsSection, "risk": RiskSection,
    "calibration": CalibrationSection, "robustness": RobustnessSection, "rag": RagSection,
}


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Parse a YAML (or JSON) config file and validate every key."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}

    top_known = set(_SECTIONS) | {"output_dir", "seed"}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}; expected {sorted(top_known)}")

    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _from_mapping(cls, raw[name], name)
    if "output_dir" in raw:
        kwargs["output_dir"] = str(raw["output_dir"])
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    return RunConfig(**kwargs)
