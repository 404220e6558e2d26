"""Topic strata: dimensionality reduction, clustering, and keyword labels.

Chunk embeddings are reduced with PCA, clustered with k-means or DBSCAN, and
each cluster becomes a sampling stratum. Everything here is deterministic:
PCA uses a fixed sign convention, k-means seeds k-means++ from an explicit
RNG and breaks nearest-centroid ties toward the lowest centroid index, and
DBSCAN classifies core points independently of input order.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, tokenize_terms


class TopicsError(Exception):
    pass


@dataclass(frozen=True)
class ReducedMatrix:
    rows: np.ndarray               # n x r projected coordinates
    explained_variance: tuple[float, ...]  # top-r ratios, non-increasing
    mean: np.ndarray               # original-space mean (d,)
    components: np.ndarray         # r x d orthonormal basis

    def project(self, vectors: np.ndarray) -> np.ndarray:
        """Map new original-space vectors into the reduced space."""
        return (np.atleast_2d(vectors) - self.mean) @ self.components.T


def pca_reduce(X: np.ndarray, r: int) -> ReducedMatrix:
    """Project centered data onto the top-r principal directions.

    Sign convention: each component's largest-magnitude entry is positive
    (lowest index on ties), so repeated runs emit identical bases.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if n < 2:
        raise TopicsError("PCA needs at least 2 rows")
    if r < 1 or r > min(n - 1, d):
        raise TopicsError(f"r={r} out of range [1, {min(n - 1, d)}]")
    mean = X.mean(axis=0)
    centered = X - mean
    if not np.any(np.abs(centered) > 1e-15):
        raise TopicsError("zero-variance data: all rows identical")
    U, S, Vt = np.linalg.svd(centered, full_matrices=False)
    total = float(np.sum(S ** 2))
    components = Vt[:r].copy()
    for i in range(r):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    return ReducedMatrix(
        rows=centered @ components.T,
        explained_variance=tuple(float(s ** 2 / total) for s in S[:r]),
        mean=mean,
        components=components,
    )


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    sse: float
    n_iter: int
    sse_history: tuple[float, ...]


def _sq_dists_to(Y: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = Y - center
    return np.einsum("ij,ij->i", diff, diff)


def kmeans(Y: np.ndarray, k: int, seed: int = 0,
           init_centers: np.ndarray | None = None,
           max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from a k-means++ start until the assignment fixpoint.

    Ties in nearest-centroid go to the lowest centroid index. An empty
    cluster is re-seeded at the point farthest from its assigned centroid.
    ``init_centers`` overrides k-means++ (used by permutation-invariance
    checks and by callers wanting custom starts).
    """
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    if k < 1 or k > n:
        raise TopicsError(f"k={k} out of range [1, {n}]")

    if init_centers is not None:
        centers = np.array(init_centers, dtype=float)
        if centers.shape != (k, Y.shape[1]):
            raise TopicsError("init_centers shape mismatch")
    else:
        centers = _kmeans_pp(Y, k, np.random.default_rng(seed))

    labels = np.zeros(n, dtype=int)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dists = np.stack([_sq_dists_to(Y, centers[j]) for j in range(k)])
        new_labels = np.argmin(dists, axis=0)  # argmin takes the lowest index on ties
        for j in range(k):
            members = Y[new_labels == j]
            if len(members) == 0:
                # Re-seed at the point farthest from its assigned centroid.
                per_point = dists[new_labels, np.arange(n)]
                far = int(np.argmax(per_point))
                centers[j] = Y[far]
                new_labels[far] = j
            else:
                centers[j] = members.mean(axis=0)
        members_sse = 0.0
        for j in range(k):
            members = Y[new_labels == j]
            if len(members):
                members_sse += float(((members - centers[j]) ** 2).sum())
        history.append(members_sse)
        if np.array_equal(new_labels, labels) and n_iter > 1:
            labels = new_labels
            break
        labels = new_labels
    return KMeansResult(labels=labels, centroids=centers, sse=history[-1],
                        n_iter=n_iter, sse_history=tuple(history))


def _kmeans_pp(Y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = Y.shape[0]
    centers = np.empty((k, Y.shape[1]))
    first = int(rng.integers(n))
    centers[0] = Y[first]
    closest = _sq_dists_to(Y, centers[0])
    for j in range(1, k):
        total = closest.sum()
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = Y[idx]
        closest = np.minimum(closest, _sq_dists_to(Y, centers[j]))
    return centers


NOISE = -1


@dataclass(frozen=True)
class DbscanResult:
    labels: np.ndarray        # cluster index per point, NOISE for noise
    core_mask: np.ndarray     # True where the point is a core point


def dbscan(Y: np.ndarray, eps: float, min_pts: int) -> DbscanResult:
    """Density-reachability clustering with deterministic scan order.

    A point is core when its eps-ball (itself included) holds at least
    min_pts points; core status never depends on input order. Border points
    join the first cluster discovered that reaches them, clusters being
    discovered in ascending seed-point index order.
    """
    Y = np.asarray(Y, dtype=float)
    if eps <= 0:
        raise TopicsError("eps must be > 0")
    if min_pts < 1:
        raise TopicsError("min_pts must be >= 1")
    n = Y.shape[0]
    neighbors = [np.flatnonzero(_sq_dists_to(Y, Y[i]) <= eps * eps) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(n, NOISE, dtype=int)
    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        labels[i] = cluster
        queue = [i]
        while queue:
            p = queue.pop(0)
            for q in neighbors[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(int(q))
        cluster += 1
    return DbscanResult(labels=labels, core_mask=core)


def silhouette_score(Y: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over points in clusters of size >= 2."""
    Y = np.asarray(Y, dtype=float)
    uniq = [c for c in np.unique(labels) if c != NOISE]
    if len(uniq) < 2:
        return -1.0
    scores = []
    for i in range(len(Y)):
        own = labels[i]
        if own == NOISE:
            continue
        same = np.flatnonzero(labels == own)
        if len(same) < 2:
            continue
        d = np.sqrt(_sq_dists_to(Y, Y[i]))
        a = d[same[same != i]].mean()
        b = min(d[np.flatnonzero(labels == c)].mean() for c in uniq if c != own)
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores)) if scores else -1.0


@dataclass
class Stratum:
    stratum_id: str
    chunk_ids: list[str]
    centroid: tuple[float, ...]
    keywords: list[str] = field(default_factory=list)
    is_noise: bool = False

    @property
    def size(self) -> int:
        return len(self.chunk_ids)


def extract_keywords(stratum_terms: list[str], other_strata_terms: list[list[str]],
                     k: int = 5) -> list[str]:
    """Rank terms by within-stratum frequency x log(S / strata containing term).

    S counts all strata. A term present in every stratum scores 0 and can
    never outrank a stratum-exclusive term. Ties break lexicographically.
    """
    if not stratum_terms:
        raise TopicsError("cannot extract keywords from an empty stratum")
    total_strata = 1 + len(other_strata_terms)
    freq = Counter(stratum_terms)
    other_sets = [set(t) for t in other_strata_terms]
    scored = []
    for term, count in freq.items():
        df = 1 + sum(1 for s in other_sets if term in s)
        scored.append((-count * math.log(total_strata / df), term))
    scored.sort()
    return [term for _, term in scored[:k]]


@dataclass
class TopicModel:
    strata: list[Stratum]
    reducer_meta: dict
    algorithm: str

    def non_noise(self) -> list[Stratum]:
        return [s for s in self.strata if not s.is_noise]

    def stratum_of(self, chunk_id: str) -> str:
        for s in self.strata:
            if chunk_id in s.chunk_ids:
                return s.stratum_id
        raise KeyError(chunk_id)


def build_strata(corpus: Corpus, chunk_coords: np.ndarray, labels: np.ndarray,
                 reducer_meta: dict, algorithm: str, keyword_count: int = 5) -> TopicModel:
    """Package cluster assignments as strata; DBSCAN noise keeps its own stratum."""
    chunk_ids = [c.chunk_id for c in corpus.chunks]
    if len(chunk_ids) != len(labels):
        raise TopicsError("labels do not cover the chunk set")
    by_label: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        by_label.setdefault(int(lab), []).append(i)

    term_lists: dict[int, list[str]] = {}
    for lab, idxs in by_label.items():
        terms: list[str] = []
        for i in idxs:
            terms.extend(tokenize_terms(corpus.chunks[i].text))
        term_lists[lab] = terms

    strata: list[Stratum] = []
    ordered = sorted(lab for lab in by_label if lab != NOISE)
    for pos, lab in enumerate(ordered):
        idxs = by_label[lab]
        others = [term_lists[o] for o in ordered if o != lab]
        if NOISE in term_lists:
            others.append(term_lists[NOISE])
        strata.append(Stratum(
            stratum_id=f"s{pos:02d}",
            chunk_ids=[chunk_ids[i] for i in idxs],
            centroid=tuple(float(x) for x in chunk_coords[idxs].mean(axis=0)),
            keywords=extract_keywords(term_lists[lab], others, k=keyword_count),
            is_noise=False,
        ))
    if NOISE in by_label:
        idxs = by_label[NOISE]
        strata.append(Stratum(
            stratum_id="noise",
            chunk_ids=[chunk_ids[i] for i in idxs],
            centroid=tuple(float(x) for x in chunk_coords[idxs].mean(axis=0)),
            keywords=[],
            is_noise=True,
        ))
    assigned = [cid for s in strata for cid in s.chunk_ids]
    if sorted(assigned) != sorted(chunk_ids) or len(assigned) != len(set(assigned)):
        raise TopicsError("strata do not partition the chunk set")
    return TopicModel(strata=strata, reducer_meta=reducer_meta, algorithm=algorithm)


def auto_k_range(n: int) -> list[int]:
    upper = min(12, n // 3)
    return list(range(2, max(upper, 2) + 1))


def fit_topics(corpus: Corpus, embeddings: np.ndarray, *, reduce_dim: int | None = None,
               algorithm: str = "kmeans", k: int | None = None, eps: float = 0.5,
               min_pts: int = 3, seed: int = 0, keyword_count: int = 5) -> tuple[TopicModel, ReducedMatrix]:
    """End-to-end: reduce, cluster (auto-k by silhouette when unset), stratify."""
    n, d = embeddings.shape
    r = reduce_dim if reduce_dim is not None else min(10, d, n - 1)
    reduced = pca_reduce(embeddings, r)
    meta = {"r": r, "explained_variance": list(reduced.explained_variance)}
    if algorithm == "kmeans":
        if k is None:
            best = None
            for cand in auto_k_range(n):
                result = kmeans(reduced.rows, cand, seed=seed)
                score = silhouette_score(reduced.rows, result.labels)
                if best is None or score > best[0] + 1e-12:
                    best = (score, cand, result)
            _, k, result = best
        else:
            result = kmeans(reduced.rows, k, seed=seed)
        labels = result.labels
        meta.update({"algorithm": "kmeans", "k": int(k), "seed": seed})
    elif algorithm == "dbscan":
        result = dbscan(reduced.rows, eps=eps, min_pts=min_pts)
        labels = result.labels
        meta.update({"algorithm": "dbscan", "eps": eps, "min_pts": min_pts})
    else:
        raise TopicsError(f"unknown clustering algorithm: {algorithm}")
    model = build_strata(corpus, reduced.rows, labels, meta, algorithm, keyword_count)
    return model, reduced


def save_topics(model: TopicModel, reduced: ReducedMatrix, corpus: Corpus,
                json_path: str | Path, coords_csv_path: str | Path) -> None:
    """Emit the topics artifact plus 2-D coordinates for external plotting."""
    payload = {
        "strata": [
            {"stratum_id": s.stratum_id, "chunk_ids": s.chunk_ids,
             "keywords": s.keywords, "size": s.size, "is_noise": s.is_noise,
             "centroid": list(s.centroid)}
            for s in model.strata
        ],
        "reducer": model.reducer_meta,
        "projection": {"mean": [float(x) for x in reduced.mean],
                       "components": [[float(x) for x in row] for row in reduced.components]},
    }
    Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    stratum_by_chunk = {cid: s.stratum_id for s in model.strata for cid in s.chunk_ids}
    lines = ["chunk_id,x,y,stratum_id"]
    for i, chunk in enumerate(corpus.chunks):
        x = reduced.rows[i, 0]
        y = reduced.rows[i, 1] if reduced.rows.shape[1] > 1 else 0.0
        lines.append(f"{chunk.chunk_id},{x:.10g},{y:.10g},{stratum_by_chunk[chunk.chunk_id]}")
    Path(coords_csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_topics(json_path: str | Path) -> tuple[TopicModel, dict]:
    data = json.loads(Path(json_path).read_text(encoding="utf-8"))
    strata = [
        Stratum(stratum_id=s["stratum_id"], chunk_ids=list(s["chunk_ids"]),
                centroid=tuple(s["centroid"]), keywords=list(s["keywords"]),
                is_noise=bool(s["is_noise"]))
        for s in data["strata"]
    ]
    model = TopicModel(strata=strata, reducer_meta=data["reducer"],
                       algorithm=data["reducer"].get("algorithm", "kmeans"))
    return model, data["projection"]
