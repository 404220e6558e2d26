"""Weakness localization: marginal and bivariate score breakdowns.

Evaluation records are grouped by topic, query type, or perturbation tag;
each group gets count/mean/min/max/quantiles plus the references of
low-scoring records. The bivariate grid exposes joint weaknesses (a topic
that only fails on multi-hop questions, say) that marginals mask. Exports
are plot-ready CSV/JSON, byte-stable across repeated runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class WeaknessError(Exception):
    pass


DIMENSIONS = {"topic": "stratum_id", "query_type": "query_type",
              "perturbation": "perturbation"}

# Directional similarity scores double as the recall/precision analogues:
# completeness_sim covers context->answer (recall-like), groundedness_sim
# covers answer->context (precision-like).
DIRECTIONAL_ALIAS = {"recall_like": "completeness_sim", "precision_like": "groundedness_sim"}

QUANTILES = (5, 25, 50, 75, 95)


@dataclass
class EvalRecord:
    record_id: str
    query_id: str
    stratum_id: str
    query_type: str
    answer: str
    metrics: dict[str, float]
    perturbation: str = "clean"
    run_id: str = ""
    failed_metrics: dict[str, str] = field(default_factory=dict)
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"record_id": self.record_id, "query_id": self.query_id,
                "stratum_id": self.stratum_id, "query_type": self.query_type,
                "answer": self.answer, "metrics": self.metrics,
                "perturbation": self.perturbation, "run_id": self.run_id,
                "failed_metrics": self.failed_metrics, "detail": self.detail}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        return cls(record_id=d["record_id"], query_id=d["query_id"],
                   stratum_id=d["stratum_id"], query_type=d["query_type"],
                   answer=d["answer"], metrics=dict(d["metrics"]),
                   perturbation=d.get("perturbation", "clean"),
                   run_id=d.get("run_id", ""),
                   failed_metrics=dict(d.get("failed_metrics", {})),
                   detail=dict(d.get("detail", {})))


def save_records(records: list[EvalRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_records(path: str | Path) -> list[EvalRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            out.append(EvalRecord.from_dict(json.loads(line)))
    return out


@dataclass
class GroupStats:
    key: str | tuple[str, str]
    count: int
    mean: float
    min: float
    max: float
    quantiles: dict[int, float]
    low_refs: list[str]

    def to_dict(self) -> dict:
        return {"key": list(self.key) if isinstance(self.key, tuple) else self.key,
                "count": self.count, "mean": self.mean, "min": self.min,
                "max": self.max,
                "quantiles": {str(q): v for q, v in self.quantiles.items()},
                "low_refs": self.low_refs}


def _stats_for(key, members: list[tuple[str, float]], flag_threshold: float) -> GroupStats:
    values = np.array([v for _, v in members], dtype=float)
    return GroupStats(
        key=key, count=len(members),
        mean=float(values.mean()), min=float(values.min()), max=float(values.max()),
        quantiles={q: float(np.quantile(values, q / 100.0)) for q in QUANTILES},
        low_refs=sorted(rid for rid, v in members if v < flag_threshold))


def _dimension_value(record: EvalRecord, dimension: str) -> str:
    try:
        attr = DIMENSIONS[dimension]
    except KeyError:
        raise WeaknessError(f"unknown dimension {dimension!r}; expected one of {sorted(DIMENSIONS)}")
    return getattr(record, attr)


def marginal_analysis(records: list[EvalRecord], dimension: str, metric: str,
                      flag_threshold: float = 0.5) -> list[GroupStats]:
    """Per-group stats of one metric along one dimension, sorted by group key."""
    groups: dict[str, list[tuple[str, float]]] = {}
    for r in records:
        if metric not in r.metrics:
            continue
        groups.setdefault(_dimension_value(r, dimension), []).append(
            (r.record_id, r.metrics[metric]))
    if not groups:
        raise WeaknessError(f"metric {metric!r} absent from all records")
    return [_stats_for(key, groups[key], flag_threshold) for key in sorted(groups)]


def bivariate_analysis(records: list[EvalRecord], dim1: str, dim2: str, metric: str,
                       flag_threshold: float = 0.5) -> dict[tuple[str, str], GroupStats]:
    """Grid of stats over (dim1, dim2) pairs; cells with no records are absent."""
    if dim1 == dim2:
        raise WeaknessError("bivariate dimensions must differ")
    cells: dict[tuple[str, str], list[tuple[str, float]]] = {}
    for r in records:
        if metric not in r.metrics:
            continue
        key = (_dimension_value(r, dim1), _dimension_value(r, dim2))
        cells.setdefault(key, []).append((r.record_id, r.metrics[metric]))
    if not cells:
        raise WeaknessError(f"metric {metric!r} absent from all records")
    return {key: _stats_for(key, members, flag_threshold)
            for key, members in sorted(cells.items())}


def marginal_from_bivariate(grid: dict[tuple[str, str], GroupStats], axis: int = 0) -> dict[str, float]:
    """Recover marginal means by count-weighted combination of cell means."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for (v1, v2), cell in grid.items():
        key = (v1, v2)[axis]
        sums[key] = sums.get(key, 0.0) + cell.mean * cell.count
        counts[key] = counts.get(key, 0) + cell.count
    return {k: sums[k] / counts[k] for k in sums}


@dataclass
class WeaknessReport:
    metric: str
    dim1: str
    dim2: str
    marginal1: list[GroupStats]
    marginal2: list[GroupStats]
    grid: dict[tuple[str, str], GroupStats]
    flag_threshold: float

    def to_dict(self) -> dict:
        return {
            "metric": self.metric, "dim1": self.dim1, "dim2": self.dim2,
            "flag_threshold": self.flag_threshold,
            "directional_alias": DIRECTIONAL_ALIAS,
            "marginal1": [g.to_dict() for g in self.marginal1],
            "marginal2": [g.to_dict() for g in self.marginal2],
            "grid": {f"{k[0]}|{k[1]}": v.to_dict() for k, v in sorted(self.grid.items())},
        }


def analyze(records: list[EvalRecord], metric: str, dim1: str = "topic",
            dim2: str = "query_type", flag_threshold: float = 0.5) -> WeaknessReport:
    return WeaknessReport(
        metric=metric, dim1=dim1, dim2=dim2,
        marginal1=marginal_analysis(records, dim1, metric, flag_threshold),
        marginal2=marginal_analysis(records, dim2, metric, flag_threshold),
        grid=bivariate_analysis(records, dim1, dim2, metric, flag_threshold),
        flag_threshold=flag_threshold)


def export_report(reports: list[WeaknessReport], out_dir: str | Path) -> list[Path]:
    """Write report.json plus per-metric heatmap and violin CSVs.

    Outputs are byte-stable: keys sorted, floats rendered with repr, grid
    cells emitted in lexicographic order. Empty heatmap cells stay empty.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    payload = {r.metric: r.to_dict() for r in reports}
    report_path = out / "report.json"
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(report_path)

    for r in reports:
        rows = sorted({k[0] for k in r.grid})
        cols = sorted({k[1] for k in r.grid})
        lines = ["," + ",".join(cols)]
        for row in rows:
            cells = []
            for col in cols:
                cell = r.grid.get((row, col))
                cells.append(f"{cell.mean:.10g}" if cell is not None else "")
            lines.append(f"{row}," + ",".join(cells))
        heatmap = out / f"heatmap_{r.metric}.csv"
        heatmap.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(heatmap)

        vlines = ["group,count,mean,min,q5,q25,q50,q75,q95,max"]
        for g in r.marginal1 + r.marginal2:
            key = g.key if isinstance(g.key, str) else "|".join(g.key)
            vlines.append(
                f"{key},{g.count},{g.mean:.10g},{g.min:.10g},"
                + ",".join(f"{g.quantiles[q]:.10g}" for q in QUANTILES)
                + f",{g.max:.10g}")
        violin = out / f"violin_{r.metric}.csv"
        violin.write_text("\n".join(vlines) + "\n", encoding="utf-8")
        written.append(violin)
    return written


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
