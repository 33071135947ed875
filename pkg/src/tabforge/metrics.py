"""Scoring and stratified reporting: ROC-AUC, R², ROUGE-L, accuracy, Gini buckets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

#: Report header note: ROUGE-L here is sentence-level F1 with beta = 1
#: (symmetric in prediction and reference), not the recall-weighted variant.
ROUGE_VARIANT = "rouge_l_f1_beta1"


class MetricError(ValueError):
    """Inputs outside a metric's domain."""


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative (ties = 1/2).

    Computed from average ranks, which equals the Mann-Whitney pair statistic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be equal-length 1-D sequences")
    if not set(np.unique(labels)) <= {0, 1}:
        raise MetricError("labels must be binary 0/1")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc requires both classes present")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = float(np.sum(ranks[labels == 1]))
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def r_squared(y: Sequence[float], y_hat: Sequence[float]) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise MetricError("y and y_hat must be equal-length 1-D sequences")
    if len(y) < 2:
        raise MetricError("r_squared requires at least 2 observations")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricError("r_squared undefined for constant y")
    ss_res = float(np.sum((y - y_hat) ** 2))
    return 1.0 - ss_res / ss_tot


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # two-row dynamic program over token sequences
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for token_a in a:
        cur = [0] * (len(b) + 1)
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(prediction: str, reference: str) -> float:
    """Longest-common-subsequence F1 over lowercased whitespace tokens."""
    pred = prediction.lower().split()
    ref = reference.lower().split()
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    lcs = _lcs_length(pred, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(pred)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


def accuracy(predictions: Sequence[str], golds: Sequence[str]) -> float:
    if len(predictions) != len(golds) or not golds:
        raise MetricError("predictions and golds must be equal-length, non-empty")
    return sum(p == g for p, g in zip(predictions, golds)) / len(golds)


def gini_index(labels: Sequence, classes: Sequence | None = None) -> float:
    """Gini coefficient of the class-proportion vector.

    G = sum_ij |p_i - p_j| / (2 n^2 mu) with mu = 1/n. `classes` fixes the
    option set so absent classes count as zero-proportion (a single observed
    class over a 2-option set yields 0.5, the maximal 2-class inequality).
    """
    labels = list(labels)
    if not labels:
        raise MetricError("gini_index requires at least one label")
    if classes is None:
        classes = sorted({str(x) for x in labels})
    counts = {str(c): 0 for c in classes}
    for label in labels:
        key = str(label)
        if key not in counts:
            raise MetricError(f"label {key!r} not in class set {sorted(counts)}")
        counts[key] += 1
    proportions = np.asarray([counts[str(c)] / len(labels) for c in classes], dtype=np.float64)
    n = len(proportions)
    if n == 1:
        return 0.0
    diffs = np.abs(proportions[:, None] - proportions[None, :]).sum()
    return float(diffs / (2.0 * n * n * (1.0 / n)))


@dataclass(frozen=True)
class MetricRecord:
    task_id: str
    metric_name: str
    value: float | None
    strata: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.value is None:
            return
        v = float(self.value)
        bounds = {"roc_auc": (0.0, 1.0), "rouge_l": (0.0, 1.0), "accuracy": (0.0, 1.0)}
        if self.metric_name in bounds:
            lo, hi = bounds[self.metric_name]
            if not lo - 1e-12 <= v <= hi + 1e-12:
                raise MetricError(f"{self.metric_name} out of range: {v}")
        if self.metric_name == "r_squared" and v > 1.0 + 1e-12:
            raise MetricError(f"r_squared above 1: {v}")

    def to_json_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "metric_name": self.metric_name,
            "value": self.value,
            "strata": dict(self.strata),
        }


@dataclass
class MetricReport:
    records: list[MetricRecord] = field(default_factory=list)
    header: dict = field(default_factory=lambda: {"rouge_variant": ROUGE_VARIANT})

    def add(self, record: MetricRecord) -> None:
        self.records.append(record)

    def merge(self, other: "MetricReport") -> "MetricReport":
        merged = MetricReport(records=list(self.records) + list(other.records), header=dict(self.header))
        return merged

    def to_json(self) -> str:
        payload = {
            "header": self.header,
            "records": [r.to_json_dict() for r in self.records],
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        payload = json.loads(text)
        records = [
            MetricRecord(
                task_id=r["task_id"],
                metric_name=r["metric_name"],
                value=r["value"],
                strata=r.get("strata", {}),
            )
            for r in payload["records"]
        ]
        return MetricReport(records=records, header=payload.get("header", {}))

    def to_text(self) -> str:
        """Aligned-column plain text rendering."""
        rows = [("task", "metric", "value", "strata")]
        for r in self.records:
            strata = " ".join(f"{k}={v}" for k, v in sorted(r.strata.items(), key=lambda kv: str(kv[0])))
            value = "-" if r.value is None else f"{r.value:.6f}"
            rows.append((r.task_id, r.metric_name, value, strata))
        widths = [max(len(row[i]) for row in rows) for i in range(4)]
        lines = ["  ".join(col.ljust(widths[i]) for i, col in enumerate(row)).rstrip() for row in rows]
        return "\n".join(lines)

    def to_csv(self, path: str | Path) -> None:
        import csv

        keys = sorted({k for r in self.records for k in r.strata})
        with Path(path).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["task_id", "metric_name", "value", *keys])
            for r in self.records:
                writer.writerow(
                    [r.task_id, r.metric_name, "" if r.value is None else r.value]
                    + [r.strata.get(k, "") for k in keys]
                )


def stratify_by_gini(records: Sequence[MetricRecord], n_buckets: int = 3) -> MetricReport:
    """Bucket per-dataset records by their 'gini' stratum into equal-width bins.

    Emits one record per (metric, bucket) with the bucket mean; empty buckets
    are reported with value None rather than raising.
    """
    if n_buckets < 1:
        raise MetricError("n_buckets must be >= 1")
    tagged = [r for r in records if "gini" in r.strata and r.value is not None]
    if not tagged:
        raise MetricError("no records carry a 'gini' stratum")
    ginis = np.asarray([float(r.strata["gini"]) for r in tagged], dtype=np.float64)
    lo, hi = float(ginis.min()), float(ginis.max())
    width = (hi - lo) / n_buckets

    def bucket_of(g: float) -> int:
        if width == 0.0:
            return 0
        return min(int((g - lo) / width), n_buckets - 1)

    report = MetricReport()
    metric_names = sorted({r.metric_name for r in tagged})
    for metric_name in metric_names:
        grouped: dict[int, list[float]] = {b: [] for b in range(n_buckets)}
        for r, g in zip(tagged, ginis):
            if r.metric_name == metric_name:
                grouped[bucket_of(float(g))].append(float(r.value))
        for b in range(n_buckets):
            values = grouped[b]
            report.add(
                MetricRecord(
                    task_id="gini_strata",
                    metric_name=metric_name,
                    value=(sum(values) / len(values)) if values else None,
                    strata={
                        "gini_bucket": b,
                        "gini_lo": lo + b * width,
                        "gini_hi": lo + (b + 1) * width if width else hi,
                        "count": len(values),
                    },
                )
            )
    return report
