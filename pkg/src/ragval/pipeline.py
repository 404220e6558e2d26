"""Pipeline stages over a persistent run directory.

Eight stages run in a fixed order (ingest, topics, generate, evaluate,
calibrate, conformal, robustness, report); each requires its predecessor's
artifact, writes its own files, and registers them in the manifest with
content hashes. Re-running a completed stage with unchanged inputs is a
no-op. One process owns a run directory at a time via a lock file.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (CalibrationSample, ConformalCalibrator, LabelRow, attach_scores,
                          calibrator_from_dict, conformal_calibrate, curve_samples,
                          error_analysis, fit_isotonic, fit_platt, load_labels_csv,
                          prediction_set, split_samples)
from .config import RunConfig
from .corpus import ChunkingConfig, ingest, load_corpus, save_corpus
from .metrics import (SentenceSet, answer_relevancy, completeness_sim,
                      completeness_wasserstein, context_relevancy, groundedness_nli,
                      groundedness_sim)
from .providers import CachingEmbedder, EmbeddingCache, make_provider
from .risk import SwapPair, bias_probe, privacy_scan, toxicity_score
from .robustness import (Perturbation, evaluate_functionality, gen_ood_queries,
                         inject_distractor, run_robustness_suite, save_report)
from .runner import EchoRagRunner, HttpRagRunner, MockRagRunner
from .testgen import SamplingSpec, load_queries, run_generation, save_queries
from .topics import NOISE, ReducedMatrix, fit_topics, load_topics, save_topics
from .weakness import EvalRecord, analyze, export_report, load_records, save_records

STAGES = ("ingest", "topics", "generate", "evaluate", "calibrate",
          "conformal", "robustness", "report")


class PipelineError(Exception):
    pass


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


class RunStore:
    """Manifest-backed run directory; artifacts are flat files."""

    def __init__(self, out_dir: str | Path, config: RunConfig):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.manifest_path = self.out_dir / "run.json"
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> dict:
        cfg_hash = self.config.config_hash()
        run_id = hashlib.sha256(f"{cfg_hash}|{self.config.seed}".encode()).hexdigest()[:12]
        if self.manifest_path.exists():
            manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
            if manifest.get("config_hash") != cfg_hash:
                raise PipelineError(
                    f"run directory {self.out_dir} was created with a different config "
                    f"(hash {manifest.get('config_hash')} vs {cfg_hash}); use a fresh --out")
            return manifest
        return {"run_id": run_id, "config_hash": cfg_hash, "tool_version": __version__,
                "stages": {}}

    def save_manifest(self) -> None:
        self.manifest_path.write_text(
            json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def register(self, stage: str, files: list[Path]) -> None:
        entry = {
            "files": {str(p.relative_to(self.out_dir)): _sha256_file(p) for p in files},
            "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        }
        self.manifest["stages"][stage] = entry
        self.save_manifest()

    def stage_fresh(self, stage: str) -> bool:
        """True when the stage's registered files still match what is on disk."""
        entry = self.manifest["stages"].get(stage)
        if not entry:
            return False
        for rel, digest in entry["files"].items():
            path = self.out_dir / rel
            if not path.exists() or _sha256_file(path) != digest:
                return False
        return True

    def require(self, stage: str) -> None:
        if not self.stage_fresh(stage):
            raise PipelineError(
                f"stage {stage!r} has no fresh artifact in {self.out_dir}; "
                f"run `ragval {stage}` first")

    def path(self, name: str) -> Path:
        return self.out_dir / name

    @contextmanager
    def lock(self):
        lock_path = self.out_dir / ".lock"
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(
                f"run directory {self.out_dir} is locked by another process "
                f"(remove {lock_path} if that process is gone)")
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            lock_path.unlink(missing_ok=True)


def _predecessor(stage: str) -> str | None:
    idx = STAGES.index(stage)
    return STAGES[idx - 1] if idx else None


def _check_predecessor(store: RunStore, stage: str) -> None:
    pred = _predecessor(stage)
    if pred is not None:
        if not store.stage_fresh(pred):
            raise PipelineError(f"stage {stage!r} requires {pred!r} to have run first")


def _build_embedder(cfg: RunConfig, store: RunStore) -> CachingEmbedder:
    provider = make_provider(cfg.providers.provider_config("embedding", cfg.seed))
    cache = EmbeddingCache(store.out_dir / cfg.providers.cache_file)
    return CachingEmbedder(provider=provider, cache=cache)


def _build_rag_runner(cfg: RunConfig, store: RunStore, corpus, embedder):
    if cfg.rag.kind == "retrieval_mock":
        return MockRagRunner(corpus, embedder, top_k=cfg.rag.top_k)
    if cfg.rag.kind == "echo":
        return EchoRagRunner()
    if cfg.rag.kind == "http":
        if not cfg.rag.endpoint:
            raise PipelineError("rag.kind is http but rag.endpoint is unset")
        return HttpRagRunner(cfg.rag.endpoint, timeout=cfg.rag.timeout)
    raise PipelineError(f"unknown rag.kind: {cfg.rag.kind}")


def stage_ingest(cfg: RunConfig, store: RunStore) -> Path:
    if store.stage_fresh("ingest"):
        return store.path("corpus.jsonl")
    chunking = ChunkingConfig(max_tokens=cfg.corpus.max_tokens,
                              max_sentences=cfg.corpus.max_sentences,
                              overlap=cfg.corpus.overlap)
    corpus = ingest(cfg.corpus.paths, chunking)
    out = store.path("corpus.jsonl")
    save_corpus(corpus, out)
    store.register("ingest", [out])
    return out


def stage_topics(cfg: RunConfig, store: RunStore) -> Path:
    _check_predecessor(store, "topics")
    if store.stage_fresh("topics"):
        return store.path("topics.json")
    corpus = load_corpus(store.path("corpus.jsonl"))
    embedder = _build_embedder(cfg, store)
    vecs = embedder.embed_batch([c.text for c in corpus.chunks])
    X = np.stack([v.as_array() for v in vecs])
    model, reduced = fit_topics(
        corpus, X, reduce_dim=cfg.topics.reduce_dim, algorithm=cfg.topics.algorithm,
        k=cfg.topics.k, eps=cfg.topics.eps, min_pts=cfg.topics.min_pts,
        seed=cfg.stage_seed("topics") % (2 ** 32), keyword_count=cfg.topics.keyword_count)
    json_path = store.path("topics.json")
    csv_path = store.path("topics_coords.csv")
    save_topics(model, reduced, corpus, json_path, csv_path)
    store.register("topics", [json_path, csv_path])
    return json_path


def _load_projection(store: RunStore) -> ReducedMatrix:
    _, proj = load_topics(store.path("topics.json"))
    return ReducedMatrix(rows=np.zeros((0, len(proj["components"]))),
                         explained_variance=(),
                         mean=np.asarray(proj["mean"]),
                         components=np.asarray(proj["components"]))


def stage_generate(cfg: RunConfig, store: RunStore) -> Path:
    _check_predecessor(store, "generate")
    if store.stage_fresh("generate"):
        return store.path("queries.jsonl")
    corpus = load_corpus(store.path("corpus.jsonl"))
    model, _ = load_topics(store.path("topics.json"))
    embedder = _build_embedder(cfg, store)
    gen = make_provider(cfg.providers.provider_config("generation", cfg.seed))
    spec = SamplingSpec(total_budget=cfg.sampling.total_budget, mode=cfg.sampling.mode,
                        weights=dict(cfg.sampling.weights),
                        seed=cfg.stage_seed("generate") % (2 ** 32))
    queries, skips = run_generation(
        corpus, model, spec, gen, embedder, query_types=cfg.sampling.query_types,
        relevancy_threshold=cfg.sampling.relevancy_threshold,
        template_dir=cfg.sampling.template_dir)
    out = store.path("queries.jsonl")
    save_queries(queries, out)
    skip_path = store.path("generation_skips.json")
    skip_path.write_text(json.dumps(
        [{"chunk_ids": list(s.chunk_ids), "query_type": s.query_type, "reason": s.reason}
         for s in skips], indent=2, sort_keys=True) + "\n", encoding="utf-8")
    store.register("generate", [out, skip_path])
    return out


@dataclass
class EvaluateOutcome:
    records_path: Path
    hard_failures: int


def stage_evaluate(cfg: RunConfig, store: RunStore) -> EvaluateOutcome:
    _check_predecessor(store, "evaluate")
    if store.stage_fresh("evaluate"):
        risk = json.loads(store.path("risk.json").read_text(encoding="utf-8"))
        return EvaluateOutcome(store.path("records.jsonl"), risk["hard_failures"])
    corpus = load_corpus(store.path("corpus.jsonl"))
    model, _ = load_topics(store.path("topics.json"))
    queries = load_queries(store.path("queries.jsonl"))
    embedder = _build_embedder(cfg, store)
    nli = make_provider(cfg.providers.provider_config("nli", cfg.seed))
    clf = make_provider(cfg.providers.provider_config("classifier", cfg.seed))
    runner = _build_rag_runner(cfg, store, corpus, embedder)

    records: list[EvalRecord] = []
    toxicity_failures = 0
    privacy_findings_total = 0
    for q in sorted(queries, key=lambda x: x.query_id):
        try:
            resp = runner.run(q.text)
        except Exception as exc:
            records.append(EvalRecord(
                record_id=q.query_id, query_id=q.query_id, stratum_id=q.stratum_id,
                query_type=q.query_type, answer="", metrics={},
                failed_metrics={m: f"rag runner failed: {exc}" for m in
                                ("c_relevancy", "groundedness_sim", "groundedness_nli",
                                 "completeness_sim", "completeness_w", "a_relevancy")},
                run_id=store.manifest["run_id"]))
            continue
        from .corpus import segment_sentences

        qset = SentenceSet.from_texts(
            "query", [s.text for s in segment_sentences(q.text)] or [q.text], embedder)
        cset = SentenceSet.from_texts("context", resp.retrieved_context, embedder)
        answer_sents = [s.text for s in segment_sentences(resp.answer)] or [resp.answer]
        aset = SentenceSet.from_texts("answer", answer_sents, embedder)
        agg = cfg.metrics.aggregation
        flag = cfg.metrics.flag_threshold
        tox = toxicity_score(resp.answer, clf, cfg.risk.toxicity_threshold)
        findings = privacy_scan(resp.answer)
        privacy_findings_total += len(findings)
        if not tox.passed:
            toxicity_failures += 1
        records.append(EvalRecord(
            record_id=q.query_id, query_id=q.query_id, stratum_id=q.stratum_id,
            query_type=q.query_type, answer=resp.answer,
            metrics={
                "c_relevancy": context_relevancy(qset, cset, kind=agg, flag_threshold=flag).value,
                "groundedness_sim": groundedness_sim(aset, cset, flag_threshold=flag).value,
                "groundedness_nli": groundedness_nli(
                    aset, cset, nli, flag_threshold=flag,
                    premise_top_k=cfg.metrics.nli_premise_top_k).value,
                "completeness_sim": completeness_sim(cset, aset, flag_threshold=flag).value,
                "completeness_w": completeness_wasserstein(cset, aset),
                "a_relevancy": answer_relevancy(aset, qset, kind=agg, flag_threshold=flag).value,
                "toxicity": tox.score,
            },
            detail={"privacy_findings": [
                {"kind": f.kind, "start": f.start, "end": f.end,
                 "matched": f.matched, "rule_id": f.rule_id} for f in findings]},
            run_id=store.manifest["run_id"]))

    risk_summary: dict = {"toxicity_failures": toxicity_failures,
                          "privacy_findings": privacy_findings_total}
    if cfg.risk.swap_pairs and cfg.risk.bias_template:
        pairs = [SwapPair(**p) for p in cfg.risk.swap_pairs]
        report = bias_probe(cfg.risk.bias_template, pairs,
                            lambda text: runner.run(text).answer, clf, embedder,
                            tolerance=cfg.risk.bias_tolerance)
        risk_summary["bias"] = {
            "max_abs_delta_by_dimension": report.max_abs_delta_by_dimension,
            "flagged_dimensions": report.flagged_dimensions,
            "tolerance": report.tolerance,
            "measures": list(report.measures),
        }
        hard_failures = toxicity_failures + len(report.flagged_dimensions)
    else:
        hard_failures = toxicity_failures
    risk_summary["hard_failures"] = hard_failures

    records_path = store.path("records.jsonl")
    save_records(records, records_path)
    risk_path = store.path("risk.json")
    risk_path.write_text(json.dumps(risk_summary, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    store.register("evaluate", [records_path, risk_path])
    return EvaluateOutcome(records_path, hard_failures)


def _synthesize_labels(records: list[EvalRecord], metrics: list[str], seed: int,
                       path: Path) -> None:
    """Demo-only deterministic labels: agreement odds rise with the score."""
    rng = np.random.default_rng(seed)
    lines = ["record_id,metric,label,annotator_id"]
    for metric in metrics:
        scored = [(r.record_id, r.metrics[metric]) for r in records if metric in r.metrics]
        if not scored:
            continue
        values = np.array([v for _, v in scored])
        mid = float(np.median(values))
        spread = max(float(values.std()), 1e-6)
        for rid, value in scored:
            p = 1.0 / (1.0 + np.exp(-(value - mid) / (0.75 * spread)))
            label = int(rng.random() < p)
            lines.append(f"{rid},{metric},{label},synthetic")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def stage_calibrate(cfg: RunConfig, store: RunStore) -> Path:
    _check_predecessor(store, "calibrate")
    if store.stage_fresh("calibrate"):
        return store.path("calibration.json")
    records = load_records(store.path("records.jsonl"))
    metrics = list(cfg.calibration.metrics)

    files: list[Path] = []
    if cfg.calibration.labels_file:
        labels_path = Path(cfg.calibration.labels_file)
    elif cfg.calibration.synthesize_labels:
        labels_path = store.path("labels.csv")
        _synthesize_labels(records, metrics, cfg.stage_seed("labels") % (2 ** 32), labels_path)
        files.append(labels_path)
    else:
        raise PipelineError("calibrate needs calibration.labels_file "
                            "(or calibration.synthesize_labels for demo runs)")
    rows = load_labels_csv(labels_path, binarize_min=cfg.calibration.binarize_min)
    scores_by_record = {r.record_id: r.metrics for r in records}

    payload: dict = {"stage1_kind": cfg.calibration.stage1,
                     "split_ratio": cfg.calibration.split_ratio,
                     "alpha": cfg.calibration.alpha, "metrics": {}}
    for metric in metrics:
        samples = attach_scores([r for r in rows if r.metric == metric], scores_by_record)
        if len(samples) < 4:
            raise PipelineError(f"metric {metric!r}: need >= 4 labeled samples, got {len(samples)}")
        stage1_samples, stage2_samples = split_samples(
            samples, cfg.calibration.split_ratio, cfg.stage_seed("calibrate") % (2 ** 32))
        if cfg.calibration.stage1 == "platt":
            stage1 = fit_platt(stage1_samples)
        elif cfg.calibration.stage1 == "isotonic":
            stage1 = fit_isotonic(stage1_samples)
        else:
            raise PipelineError(f"unknown stage1 calibrator: {cfg.calibration.stage1}")
        err = error_analysis(stage1, stage2_samples, 0.5)
        payload["metrics"][metric] = {
            "stage1": stage1.to_dict(),
            "stage1_ids": sorted(s.record_ref for s in stage1_samples),
            "stage2_ids": sorted(s.record_ref for s in stage2_samples),
            "error_analysis": err.to_dict(),
        }
        curve_path = store.path(f"curve_{metric}.csv")
        lo = min(s.machine_score for s in samples)
        hi = max(s.machine_score for s in samples)
        lines = ["score,calibrated_probability"]
        for x, fx in curve_samples(stage1, lo, hi, 101):
            lines.append(f"{x:.10g},{fx:.10g}")
        curve_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        files.append(curve_path)

    out = store.path("calibration.json")
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    store.register("calibrate", [out] + files)
    return out


def stage_conformal(cfg: RunConfig, store: RunStore) -> Path:
    _check_predecessor(store, "conformal")
    if store.stage_fresh("conformal"):
        return store.path("conformal.json")
    calib = json.loads(store.path("calibration.json").read_text(encoding="utf-8"))
    records = load_records(store.path("records.jsonl"))
    scores_by_record = {r.record_id: r.metrics for r in records}
    if cfg.calibration.labels_file:
        labels_path = Path(cfg.calibration.labels_file)
    else:
        labels_path = store.path("labels.csv")
    rows = load_labels_csv(labels_path, binarize_min=cfg.calibration.binarize_min)

    payload: dict = {"alpha": cfg.calibration.alpha, "metrics": {}}
    for metric, entry in calib["metrics"].items():
        stage1 = calibrator_from_dict(entry["stage1"])
        stage2_ids = set(entry["stage2_ids"])
        holdout = attach_scores(
            [r for r in rows if r.metric == metric and r.record_id in stage2_ids],
            scores_by_record)
        conformal = conformal_calibrate(stage1, holdout, cfg.calibration.alpha)
        payload["metrics"][metric] = conformal.to_dict()
    out = store.path("conformal.json")
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    store.register("conformal", [out])
    return out


def stage_robustness(cfg: RunConfig, store: RunStore) -> Path:
    _check_predecessor(store, "robustness")
    if store.stage_fresh("robustness"):
        return store.path("robustness.json")
    corpus = load_corpus(store.path("corpus.jsonl"))
    model, _ = load_topics(store.path("topics.json"))
    queries = load_queries(store.path("queries.jsonl"))
    embedder = _build_embedder(cfg, store)
    runner = _build_rag_runner(cfg, store, corpus, embedder)
    seed = cfg.stage_seed("robustness") % (2 ** 32)

    perturbations = [Perturbation(kind="typo", seed=seed, rate=cfg.robustness.typo_rate),
                     Perturbation(kind="colloquial", seed=seed, rate=1.0)]
    report = run_robustness_suite(queries, runner, perturbations, embedder,
                                  worst_k=cfg.robustness.worst_k)
    report.header = {"typo_rate": cfg.robustness.typo_rate, "seed": seed,
                     "ood_ceiling": cfg.robustness.ood_ceiling}

    # Distractor injection: splice a chunk from another stratum into the
    # retrieved context and re-score against the enlarged context.
    stratum_of = {cid: s.stratum_id for s in model.strata for cid in s.chunk_ids}
    chunks_by_stratum: dict[str, list] = {}
    for c in corpus.chunks:
        chunks_by_stratum.setdefault(stratum_of[c.chunk_id], []).append(c)
    for q in sorted(queries, key=lambda x: x.query_id):
        other = next((sid for sid in sorted(chunks_by_stratum) if sid != q.stratum_id), None)
        if other is None:
            break
        distractor = chunks_by_stratum[other][0]
        try:
            clean = runner.run(q.text)
            clean_m = evaluate_functionality(q.text, clean.retrieved_context, clean.answer, embedder)
            injected = inject_distractor(clean.retrieved_context, q.stratum_id,
                                         [s.text for s in distractor.sentences], other, 0)
            pert_m = evaluate_functionality(q.text, injected.sentences, clean.answer, embedder)
        except Exception as exc:
            report.failures.append({"query_id": q.query_id,
                                    "perturbation": "adversarial_distractor", "error": str(exc)})
            continue
        for m in clean_m:
            report.rows.append({
                "query_id": q.query_id, "perturbation": "adversarial_distractor",
                "seed": seed, "rate": 0.0, "metric": m,
                "clean": clean_m[m], "perturbed": pert_m[m],
                "delta": pert_m[m] - clean_m[m]})
    deltas_by = {}
    for r in report.rows:
        if r["perturbation"] != "adversarial_distractor":
            continue
        deltas_by.setdefault(r["metric"], []).append((r["delta"], r["query_id"]))
    for metric, pairs in deltas_by.items():
        values = np.array([d for d, _ in pairs])
        worst = sorted(pairs, key=lambda t: (t[0], t[1]))[:cfg.robustness.worst_k]
        report.per_metric.setdefault(metric, {})["adversarial_distractor"] = {
            "mean_delta": float(values.mean()),
            "p5": float(np.quantile(values, 0.05)),
            "p95": float(np.quantile(values, 0.95)),
            "worst": [{"query_id": qid, "delta": d} for d, qid in worst]}

    if cfg.robustness.ood_pool:
        pool = [ln for ln in Path(cfg.robustness.ood_pool).read_text(encoding="utf-8").splitlines()
                if ln.strip() and not ln.startswith("#")]
        projection = _load_projection(store)
        centroids = {s.stratum_id: s.centroid for s in model.non_noise()}
        ood = gen_ood_queries(pool, cfg.robustness.ood_count, seed, embedder,
                              projection, centroids, ceiling=cfg.robustness.ood_ceiling)
        ood_rows = []
        for q in ood:
            resp = runner.run(q.text)
            m = evaluate_functionality(q.text, resp.retrieved_context, resp.answer, embedder)
            # Answers surfaced for human review; refusal is not auto-graded.
            ood_rows.append({"query_id": q.query_id, "text": q.text, "answer": resp.answer,
                             "c_relevancy": m["c_relevancy"]})
        report.header["ood"] = ood_rows

    json_path = store.path("robustness.json")
    csv_path = store.path("robustness.csv")
    save_report(report, json_path, csv_path)
    store.register("robustness", [json_path, csv_path])
    return json_path


def _calibrated_flag_threshold(metric: str, conformal_payload: dict | None,
                               default: float = 0.5) -> float:
    """Raw-score threshold whose calibrated probability is 0.5, when known."""
    if not conformal_payload:
        return default
    entry = conformal_payload.get("metrics", {}).get(metric)
    if not entry:
        return default
    stage1 = entry["stage1"]
    if stage1["kind"] == "logistic" and stage1["weight"] > 0:
        return -stage1["bias"] / stage1["weight"]
    if stage1["kind"] == "isotonic":
        for bp, level in zip(stage1["breakpoints"], stage1["levels"]):
            if level >= 0.5:
                return bp
    return default


def stage_report(cfg: RunConfig, store: RunStore) -> Path:
    _check_predecessor(store, "report")
    if store.stage_fresh("report"):
        return store.path("report.json")
    records = load_records(store.path("records.jsonl"))
    conformal_payload = None
    conformal_path = store.path("conformal.json")
    if conformal_path.exists():
        conformal_payload = json.loads(conformal_path.read_text(encoding="utf-8"))

    present = sorted({m for r in records for m in r.metrics})
    reports = []
    for metric in present:
        threshold = _calibrated_flag_threshold(metric, conformal_payload,
                                               cfg.metrics.flag_threshold)
        reports.append(analyze(records, metric, flag_threshold=threshold))
    files = export_report(reports, store.out_dir)

    if conformal_payload:
        review: dict = {}
        for metric, entry in conformal_payload["metrics"].items():
            conformal = calibrator_from_dict(entry)
            assert isinstance(conformal, ConformalCalibrator)
            needs_review = []
            set_counts = {"singleton": 0, "both": 0, "empty": 0}
            for r in records:
                if metric not in r.metrics:
                    continue
                pred = prediction_set(conformal.stage1.predict(r.metrics[metric]), conformal)
                if len(pred) == 2:
                    set_counts["both"] += 1
                elif len(pred) == 1:
                    set_counts["singleton"] += 1
                else:
                    set_counts["empty"] += 1
                if len(pred) != 1:
                    needs_review.append(r.record_id)
            review[metric] = {"set_counts": set_counts,
                              "needs_human_review": sorted(needs_review)}
        review_path = store.path("conformal_review.json")
        review_path.write_text(json.dumps(review, indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")
        files.append(review_path)
    store.register("report", files)
    return store.path("report.json")


STAGE_FUNCS = {
    "ingest": stage_ingest, "topics": stage_topics, "generate": stage_generate,
    "evaluate": stage_evaluate, "calibrate": stage_calibrate, "conformal": stage_conformal,
    "robustness": stage_robustness, "report": stage_report,
}


def run_stage(stage: str, cfg: RunConfig) -> object:
    if stage not in STAGE_FUNCS:
        raise PipelineError(f"unknown stage {stage!r}; expected one of {list(STAGES)}")
    store = RunStore(cfg.output_dir, cfg)
    with store.lock():
        return STAGE_FUNCS[stage](cfg, store)


def run_all(cfg: RunConfig) -> tuple[RunStore, int]:
    """Run every stage in order; returns the store and hard-failure count."""
    store = RunStore(cfg.output_dir, cfg)
    hard_failures = 0
    with store.lock():
        for stage in STAGES:
            result = STAGE_FUNCS[stage](cfg, store)
            if isinstance(result, EvaluateOutcome):
                hard_failures = result.hard_failures
    return store, hard_failures
