"""Two-stage calibration of machine scores against human judgments.

Stage 1 maps a scalar machine score to a probability of human agreement,
either by logistic (Platt) fitting or by isotonic regression (pool adjacent
violators). Stage 2 wraps those probabilities in split conformal prediction:
the non-conformity score is |y - f(x)|, its calibrated quantile q_hat turns
any new probability into a prediction set over {0, 1} with finite-sample
marginal coverage 1 - alpha.
"""

from __future__ import annotations

import csv
import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CalibrationError(Exception):
    pass


@dataclass(frozen=True)
class CalibrationSample:
    machine_score: float
    human_label: int  # 0 or 1
    metric: str = ""
    record_ref: str = ""

    def __post_init__(self):
        if not math.isfinite(self.machine_score):
            raise CalibrationError("machine score must be finite")
        if self.human_label not in (0, 1):
            raise CalibrationError("human label must be 0 or 1")


@dataclass
class LogisticCalibrator:
    """Platt scaling: f(x) = sigmoid(w*x + b), fit by damped Newton."""

    weight: float
    bias: float
    diagnostics: dict = field(default_factory=dict)

    def predict(self, x: float) -> float:
        z = self.weight * x + self.bias
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)

    def to_dict(self) -> dict:
        return {"kind": "logistic", "weight": self.weight, "bias": self.bias,
                "diagnostics": self.diagnostics}


PARAM_CAP = 50.0  # |w|,|b| bound; hit only under perfect separation


def fit_platt(samples: list[CalibrationSample], max_iter: int = 100,
              tol: float = 1e-8) -> LogisticCalibrator:
    """Maximize the Bernoulli log-likelihood of (w, b) by damped Newton steps.

    Convergence at gradient norm < tol. On perfectly separable data the
    likelihood has no maximizer; iteration stops at the parameter-magnitude
    cap and diagnostics record the condition.
    """
    if len(samples) < 2:
        raise CalibrationError("need at least 2 calibration samples")
    x = np.array([s.machine_score for s in samples], dtype=float)
    y = np.array([s.human_label for s in samples], dtype=float)
    if not np.all(np.isfinite(x)):
        raise CalibrationError("non-finite machine scores")
    if y.min() == y.max():
        raise CalibrationError("both labels must be present to fit a probability")

    def nll(w: float, b: float) -> float:
        z = w * x + b
        # log(1 + e^z) - y*z, computed stably
        return float(np.sum(np.logaddexp(0.0, z) - y * z))

    w, b = 0.0, 0.0
    grad_norm = math.inf
    capped = False
    it = 0
    for it in range(1, max_iter + 1):
        z = w * x + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        r = p - y
        g = np.array([float(np.dot(r, x)), float(np.sum(r))])
        grad_norm = float(np.linalg.norm(g))
        if grad_norm < tol:
            break
        s = np.maximum(p * (1.0 - p), 1e-12)
        h11 = float(np.dot(s, x * x))
        h12 = float(np.dot(s, x))
        h22 = float(np.sum(s))
        det = h11 * h22 - h12 * h12
        if det <= 1e-300:
            step = g  # Hessian degenerate: fall back to gradient direction
        else:
            step = np.array([(h22 * g[0] - h12 * g[1]) / det,
                             (h11 * g[1] - h12 * g[0]) / det])
        # Backtracking damping: halve until the objective improves.
        base = nll(w, b)
        t = 1.0
        while t > 1e-10 and nll(w - t * step[0], b - t * step[1]) > base:
            t /= 2.0
        w -= t * step[0]
        b -= t * step[1]
        if abs(w) > PARAM_CAP or abs(b) > PARAM_CAP:
            scale = PARAM_CAP / max(abs(w), abs(b))
            w *= scale
            b *= scale
            capped = True
            break
    return LogisticCalibrator(weight=w, bias=b, diagnostics={
        "iterations": it, "final_gradient_norm": grad_norm,
        "converged": grad_norm < tol, "separation_capped": capped,
    })


@dataclass
class IsotonicCalibrator:
    """Piecewise-constant monotone fit; steps are left-closed at breakpoints."""

    breakpoints: list[float]  # ascending x values
    levels: list[float]       # non-decreasing fitted values

    def predict(self, x: float) -> float:
        i = bisect_right(self.breakpoints, x) - 1
        return self.levels[max(i, 0)]

    def to_dict(self) -> dict:
        return {"kind": "isotonic", "breakpoints": self.breakpoints, "levels": self.levels}


def fit_isotonic(samples: list[CalibrationSample]) -> IsotonicCalibrator:
    """Least-squares monotone fit by pool-adjacent-violators.

    Samples are sorted by score; ties in x are pre-averaged into one weighted
    point, then adjacent out-of-order blocks merge until non-decreasing.
    """
    if not samples:
        raise CalibrationError("need at least 1 sample")
    pairs = sorted((s.machine_score, float(s.human_label)) for s in samples)
    xs: list[float] = []
    ys: list[float] = []
    ws: list[float] = []
    for x, y in pairs:
        if xs and x == xs[-1]:
            ws[-1] += 1.0
            ys[-1] += (y - ys[-1]) / ws[-1]
        else:
            xs.append(x)
            ys.append(y)
            ws.append(1.0)
    # PAVA over (ys, ws): blocks as (value, weight, count)
    blocks: list[list[float]] = []
    for y, w in zip(ys, ws):
        blocks.append([y, w, 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            v2, w2, c2 = blocks.pop()
            v1, w1, c1 = blocks.pop()
            total = w1 + w2
            blocks.append([(v1 * w1 + v2 * w2) / total, total, c1 + c2])
    levels: list[float] = []
    for value, _, count in blocks:
        levels.extend([value] * count)
    return IsotonicCalibrator(breakpoints=xs, levels=levels)


ALL_COVERING = 1.0  # sentinel quantile: every prediction set is {0, 1}


@dataclass
class ConformalCalibrator:
    stage1: LogisticCalibrator | IsotonicCalibrator
    alpha: float
    q_hat: float
    n: int
    all_covering: bool = False

    def to_dict(self) -> dict:
        return {"kind": "conformal", "alpha": self.alpha, "q_hat": self.q_hat,
                "n": self.n, "all_covering": self.all_covering,
                "stage1": self.stage1.to_dict()}


def nonconformity(f_value: float, label: int) -> float:
    """|y - f(x)|, equivalently 1 - P(Y=y|x)."""
    return abs(label - f_value)


def conformal_calibrate(stage1, samples: list[CalibrationSample],
                        alpha: float) -> ConformalCalibrator:
    """Compute q_hat as the ceil((n+1)(1-alpha))-th smallest non-conformity.

    The holdout must be disjoint from the data used to fit stage 1. When the
    rank exceeds n the calibrator is flagged all-covering: every prediction
    set is {0, 1}.
    """
    if not samples:
        raise CalibrationError("empty conformal holdout")
    if not 0.0 < alpha < 1.0:
        raise CalibrationError("alpha must lie in (0, 1)")
    n = len(samples)
    scores = sorted(nonconformity(stage1.predict(s.machine_score), s.human_label)
                    for s in samples)
    rank = math.ceil((n + 1) * (1.0 - alpha))
    if rank > n:
        return ConformalCalibrator(stage1=stage1, alpha=alpha, q_hat=ALL_COVERING,
                                   n=n, all_covering=True)
    return ConformalCalibrator(stage1=stage1, alpha=alpha, q_hat=scores[rank - 1], n=n)


def prediction_set(f_value: float, calibrator: ConformalCalibrator) -> frozenset[int]:
    """The label set {y : P(Y=y|x) >= 1 - q_hat}.

    With f = P(Y=1|x): include 1 iff f >= 1 - q_hat, include 0 iff f <= q_hat.
    Depending on f and q_hat this yields {0}, {1}, {0,1}, or the empty set;
    boundary equalities resolve to inclusion.
    """
    q = calibrator.q_hat
    members = set()
    if f_value <= q:
        members.add(0)
    if f_value >= 1.0 - q:
        members.add(1)
    return frozenset(members)


@dataclass
class CoverageReport:
    coverage: float
    n: int
    set_counts: dict[str, int]  # singleton / both / empty

    def to_dict(self) -> dict:
        return {"coverage": self.coverage, "n": self.n, "set_counts": self.set_counts}


def coverage_eval(calibrator: ConformalCalibrator,
                  samples: list[CalibrationSample]) -> CoverageReport:
    """Empirical coverage and set-size histogram on a disjoint labeled test set."""
    if not samples:
        raise CalibrationError("empty test set")
    covered = 0
    counts = {"singleton": 0, "both": 0, "empty": 0}
    for s in samples:
        pred = prediction_set(calibrator.stage1.predict(s.machine_score), calibrator)
        if s.human_label in pred:
            covered += 1
        if len(pred) == 2:
            counts["both"] += 1
        elif len(pred) == 1:
            counts["singleton"] += 1
        else:
            counts["empty"] += 1
    return CoverageReport(coverage=covered / len(samples), n=len(samples), set_counts=counts)


@dataclass
class ErrorAnalysis:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    type_i_rate: float | None  # false-positive rate; None when no negatives
    type_ii_rate: float | None  # false-negative rate; None when no positives

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "tp": self.tp, "fp": self.fp,
                "tn": self.tn, "fn": self.fn,
                "type_i_rate": self.type_i_rate, "type_ii_rate": self.type_ii_rate}


def error_analysis(stage1, samples: list[CalibrationSample],
                   threshold: float) -> ErrorAnalysis:
    """Confusion counts for the rule: predict 1 iff f(x) >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise CalibrationError("decision threshold must lie in (0, 1)")
    tp = fp = tn = fn = 0
    for s in samples:
        pred = 1 if stage1.predict(s.machine_score) >= threshold else 0
        if pred == 1 and s.human_label == 1:
            tp += 1
        elif pred == 1 and s.human_label == 0:
            fp += 1
        elif pred == 0 and s.human_label == 0:
            tn += 1
        else:
            fn += 1
    negatives = fp + tn
    positives = tp + fn
    return ErrorAnalysis(
        threshold=threshold, tp=tp, fp=fp, tn=tn, fn=fn,
        type_i_rate=(fp / negatives) if negatives else None,
        type_ii_rate=(fn / positives) if positives else None)


@dataclass(frozen=True)
class LabelRow:
    record_id: str
    metric: str
    label: int
    annotator_id: str = ""


def load_labels_csv(path: str | Path, binarize_min: float | None = None) -> list[LabelRow]:
    """Read human labels: columns record_id, metric, label, annotator_id.

    Labels must be 0/1 unless ``binarize_min`` is given, in which case any
    label >= binarize_min maps to 1 and the rest to 0 (documented mapping for
    multi-level scales).
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"record_id", "metric", "label"}
        if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
            raise CalibrationError(f"labels CSV must have columns {sorted(required)}")
        for row in reader:
            raw = float(row["label"])
            if binarize_min is not None:
                label = 1 if raw >= binarize_min else 0
            elif raw in (0.0, 1.0):
                label = int(raw)
            else:
                raise CalibrationError(f"label {raw} is not binary; set a binarize threshold")
            rows.append(LabelRow(record_id=row["record_id"], metric=row["metric"],
                                 label=label, annotator_id=row.get("annotator_id", "")))
    return rows


def attach_scores(rows: list[LabelRow],
                  scores_by_record: dict[str, dict[str, float]]) -> list[CalibrationSample]:
    """Join label rows with machine scores keyed by (record_id, metric)."""
    out = []
    for r in rows:
        per_metric = scores_by_record.get(r.record_id)
        if per_metric is None or r.metric not in per_metric:
            continue
        out.append(CalibrationSample(machine_score=per_metric[r.metric],
                                     human_label=r.label, metric=r.metric,
                                     record_ref=r.record_id))
    return out


def split_samples(samples: list[CalibrationSample], split_ratio: float,
                  seed: int) -> tuple[list[CalibrationSample], list[CalibrationSample]]:
    """Seeded disjoint split into stage-1 and stage-2 (conformal) sets."""
    if not 0.0 < split_ratio < 1.0:
        raise CalibrationError("split_ratio must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(samples))
    cut = max(1, min(len(samples) - 1, int(round(split_ratio * len(samples)))))
    stage1 = [samples[i] for i in order[:cut]]
    stage2 = [samples[i] for i in order[cut:]]
    return stage1, stage2


def calibrator_from_dict(data: dict):
    kind = data.get("kind")
    if kind == "logistic":
        return LogisticCalibrator(weight=data["weight"], bias=data["bias"],
                                  diagnostics=data.get("diagnostics", {}))
    if kind == "isotonic":
        return IsotonicCalibrator(breakpoints=list(data["breakpoints"]),
                                  levels=list(data["levels"]))
    if kind == "conformal":
        return ConformalCalibrator(stage1=calibrator_from_dict(data["stage1"]),
                                   alpha=data["alpha"], q_hat=data["q_hat"],
                                   n=data["n"], all_covering=data["all_covering"])
    raise CalibrationError(f"unknown calibrator kind: {kind}")


def save_calibrators(calibrators: dict[str, object], path: str | Path) -> None:
    payload = {metric: c.to_dict() for metric, c in calibrators.items()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_calibrators(path: str | Path) -> dict[str, object]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {metric: calibrator_from_dict(d) for metric, d in data.items()}


def curve_samples(stage1, lo: float = 0.0, hi: float = 1.0, n: int = 101) -> list[tuple[float, float]]:
    """(x, f(x)) pairs for external plotting of the calibration curve."""
    xs = np.linspace(lo, hi, n)
    return [(float(x), stage1.predict(float(x))) for x in xs]
